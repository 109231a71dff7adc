//! Configurable encoder / memory / decoder stack: a 7×7 stem, strided 3×3
//! down-sampling convolutions, residual blocks around the memory bottleneck,
//! mirrored 4×4 stride-2 transposed convolutions and a Tanh head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{
    self, AddressingConfig, AddressingResult, MemoryBank, MemoryError, TrustConfig,
};
use crate::substrate::ops::{self, BatchStats};
use crate::substrate::{Parameter, SubstrateError, Tape, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input size {h}x{w} is not divisible by 2^{downsamples}")]
    IndivisibleInput { h: usize, w: usize, downsamples: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("input values outside [-1, 1]: found {0}")]
    InputRange(f64),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

/// Architecture and bottleneck configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub input_size: (usize, usize),
    pub channels: usize,
    pub downsample_layers: usize,
    pub residual_blocks: usize,
    pub latent_dim: usize,
    pub memory_slots: usize,
    pub addressing: AddressingConfig,
    pub trust: TrustConfig,
    pub base_width: usize,
    pub memory_enabled: bool,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; the paper-scale setup is 256×256, 5 downsampling
    /// layers, Z=512, M=64, base width 32.
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            channels: 1,
            downsample_layers: 3,
            residual_blocks: 3,
            latent_dim: 64,
            memory_slots: 32,
            addressing: AddressingConfig::default(),
            trust: TrustConfig::default(),
            base_width: 16,
            memory_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self.input_size;
        let stride_total = 1usize << self.downsample_layers;
        if h == 0 || w == 0 || h % stride_total != 0 || w % stride_total != 0 {
            return Err(ModelError::IndivisibleInput {
                h,
                w,
                downsamples: self.downsample_layers,
            });
        }
        for (name, v) in [
            ("channels", self.channels),
            ("downsample_layers", self.downsample_layers),
            ("residual_blocks", self.residual_blocks),
            ("latent_dim", self.latent_dim),
            ("memory_slots", self.memory_slots),
            ("base_width", self.base_width),
        ] {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.addressing.k == 0 || self.addressing.k > self.memory_slots {
            return Err(ModelError::InvalidConfig(format!(
                "addressing.k={} out of range 1..={}",
                self.addressing.k, self.memory_slots
            )));
        }
        if self.trust.delta2 < 0.0 {
            return Err(ModelError::InvalidConfig("trust.delta2 must be >= 0".into()));
        }
        Ok(())
    }

    /// Spatial size of the bottleneck feature map.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        let s = 1usize << self.downsample_layers;
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    /// Output channel count after each down-sampling convolution. Widths
    /// double from `base_width`, capped at the latent dimension; the last
    /// stage always emits exactly `latent_dim` channels.
    pub fn encoder_widths(&self) -> Vec<usize> {
        (1..=self.downsample_layers)
            .map(|i| {
                if i == self.downsample_layers {
                    self.latent_dim
                } else {
                    (self.base_width << i).min(self.latent_dim)
                }
            })
            .collect()
    }
}

#[derive(Clone)]
struct ConvBn {
    kernel: Parameter,
    gamma: Parameter,
    beta: Parameter,
    running_mean: Tensor,
    running_var: Tensor,
}

impl ConvBn {
    fn new(kernel_shape: &[usize], norm_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in: usize = kernel_shape[1..].iter().product();
        let bound = (1.0 / fan_in as f64).sqrt();
        Self {
            kernel: Parameter::new(Tensor::rand_uniform(kernel_shape, -bound, bound, rng)),
            gamma: Parameter::new(Tensor::full(&[norm_channels], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[norm_channels])),
            running_mean: Tensor::zeros(&[norm_channels]),
            running_var: Tensor::full(&[norm_channels], 1.0),
        }
    }
}

/// conv → norm → ReLU → conv → norm with an identity skip.
#[derive(Clone)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
}

impl ResidualBlock {
    fn new(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: ConvBn::new(&[channels, channels, 3, 3], channels, rng),
            conv2: ConvBn::new(&[channels, channels, 3, 3], channels, rng),
        }
    }
}

#[derive(Clone)]
pub struct TrustMAEModel {
    pub config: ModelConfig,
    stem: ConvBn,
    downs: Vec<ConvBn>,
    enc_blocks: Vec<ResidualBlock>,
    pub bank: MemoryBank,
    dec_blocks: Vec<ResidualBlock>,
    ups: Vec<ConvBn>,
    head_kernel: Parameter,
    head_bias: Parameter,
}

/// Training / evaluation switch: training normalizes with batch statistics,
/// evaluation with the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    /// Reconstruction x̂:(n,C,H,W).
    pub reconstruction: Var,
    /// Pre-memory feature rows (n·h·w, Z).
    pub features: Var,
    /// Post-memory feature rows (n·h·w, Z); equals `features` when the
    /// memory is bypassed.
    pub approx_features: Var,
    /// Distance matrix (n·h·w, M) against the bank; None when bypassed.
    pub distances: Option<Var>,
    /// Final addressing weights (sparse if enabled); None when bypassed.
    pub weights: Option<Var>,
    /// Leaf var of the bank slots; None when bypassed.
    pub slots: Option<Var>,
    /// Batch-norm statistics in registry order, to fold into running stats.
    pub bn_stats: Vec<BatchStats>,
}

/// Value-level result of an evaluation forward pass.
pub struct ForwardResult {
    /// Pre-memory feature rows (n·h·w, Z).
    pub features: Tensor,
    /// Post-memory feature rows (n·h·w, Z).
    pub approx_features: Tensor,
    /// Reconstruction (n,C,H,W), Tanh range [-1, 1].
    pub reconstruction: Tensor,
    /// Per-position addressing in row order; empty when the memory is bypassed.
    pub addressing: Vec<AddressingResult>,
}

/// Deterministic model construction from a seed.
pub fn build(config: &ModelConfig, seed: u64) -> Result<TrustMAEModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = config.encoder_widths();
    let stem = ConvBn::new(
        &[config.base_width, config.channels, 7, 7],
        config.base_width,
        &mut rng,
    );
    let mut downs = Vec::with_capacity(config.downsample_layers);
    let mut in_ch = config.base_width;
    for &out_ch in &widths {
        downs.push(ConvBn::new(&[out_ch, in_ch, 3, 3], out_ch, &mut rng));
        in_ch = out_ch;
    }
    let z = config.latent_dim;
    let enc_blocks = (0..config.residual_blocks).map(|_| ResidualBlock::new(z, &mut rng)).collect();
    let bank = MemoryBank::new(config.memory_slots, z, &mut rng);
    let dec_blocks: Vec<ResidualBlock> =
        (0..config.residual_blocks).map(|_| ResidualBlock::new(z, &mut rng)).collect();
    // Mirror the encoder widths on the way up, ending at base_width.
    let mut ups = Vec::with_capacity(config.downsample_layers);
    let mut in_ch = z;
    for i in (0..config.downsample_layers).rev() {
        let out_ch = if i == 0 { config.base_width } else { widths[i - 1] };
        // Transposed kernels are stored (c_in, c_out, kh, kw).
        ups.push(ConvBn::new(&[in_ch, out_ch, 4, 4], out_ch, &mut rng));
        in_ch = out_ch;
    }
    let fan_in = config.base_width * 49;
    let bound = (1.0 / fan_in as f64).sqrt();
    let head_kernel = Parameter::new(Tensor::rand_uniform(
        &[config.channels, config.base_width, 7, 7],
        -bound,
        bound,
        &mut rng,
    ));
    let head_bias = Parameter::new(Tensor::zeros(&[config.channels]));
    Ok(TrustMAEModel {
        config: config.clone(),
        stem,
        downs,
        enc_blocks,
        bank,
        dec_blocks,
        ups,
        head_kernel,
        head_bias,
    })
}

struct LayerCtx<'a> {
    tape: &'a mut Tape,
    mode: Mode,
    bn_stats: Vec<BatchStats>,
}

impl<'a> LayerCtx<'a> {
    fn bn(&mut self, x: Var, layer: &ConvBn) -> Result<Var, SubstrateError> {
        let gamma = self.tape.leaf(layer.gamma.value.clone());
        let beta = self.tape.leaf(layer.beta.value.clone());
        match self.mode {
            Mode::Train => {
                let (y, stats) = ops::batch_norm_train(self.tape, x, gamma, beta, BN_EPS)?;
                self.bn_stats.push(stats);
                Ok(y)
            }
            Mode::Eval => ops::batch_norm_eval(
                self.tape,
                x,
                gamma,
                beta,
                &layer.running_mean,
                &layer.running_var,
                BN_EPS,
            ),
        }
    }

    fn conv_bn_relu(
        &mut self,
        x: Var,
        layer: &ConvBn,
        stride: usize,
        padding: usize,
    ) -> Result<Var, SubstrateError> {
        let kernel = self.tape.leaf(layer.kernel.value.clone());
        let y = ops::conv2d(self.tape, x, kernel, stride, padding)?;
        let y = self.bn(y, layer)?;
        Ok(ops::relu(self.tape, y))
    }

}

/// Parameter leaves of one training forward, in registry order, for copying
/// gradients back after the backward sweep.
pub struct BoundParams {
    pub names: Vec<String>,
    pub vars: Vec<Var>,
}

impl TrustMAEModel {
    pub fn validate_input(&self, x: &Tensor) -> Result<usize, ModelError> {
        let (h, w) = self.config.input_size;
        let n = match *x.shape() {
            [n, c, xh, xw] if c == self.config.channels && xh == h && xw == w => n,
            _ => {
                return Err(ModelError::InputShape {
                    got: x.shape().to_vec(),
                    expected: vec![0, self.config.channels, h, w],
                })
            }
        };
        x.check_finite("model input")?;
        for &v in x.data() {
            if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                return Err(ModelError::InputRange(v));
            }
        }
        Ok(n)
    }

    /// Full forward pass on a tape. The parameter leaves created on the tape
    /// are returned so callers can read their gradients after backward.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
    ) -> Result<(ForwardVars, BoundParams), ModelError> {
        self.forward_with_params(tape, x, mode, None)
    }

    /// Forward pass using caller-provided parameter variables (in registry
    /// order) instead of fresh leaves; the gradient-check harness drives the
    /// whole model through this entry point.
    pub fn forward_with_params(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        provided: Option<&[Var]>,
    ) -> Result<(ForwardVars, BoundParams), ModelError> {
        let n = match *tape.value(x).shape() {
            [n, _, _, _] => n,
            _ => {
                return Err(ModelError::InputShape {
                    got: tape.value(x).shape().to_vec(),
                    expected: vec![
                        0,
                        self.config.channels,
                        self.config.input_size.0,
                        self.config.input_size.1,
                    ],
                })
            }
        };
        let (bh, bw) = self.config.bottleneck_size();
        let mut ctx = LayerCtx { tape, mode, bn_stats: Vec::new() };
        let mut bound = BoundParams { names: Vec::new(), vars: Vec::new() };

        macro_rules! leaf {
            ($name:expr, $param:expr) => {{
                let v = match provided {
                    Some(vars) => vars[bound.vars.len()],
                    None => ctx.tape.leaf($param.value.clone()),
                };
                bound.names.push($name);
                bound.vars.push(v);
                v
            }};
        }

        let apply_conv_bn = |ctx: &mut LayerCtx,
                                 bound: &mut BoundParams,
                                 name: String,
                                 layer: &ConvBn,
                                 x: Var,
                                 stride: usize,
                                 padding: usize,
                                 transposed: bool|
         -> Result<Var, SubstrateError> {
            let bind = |param: &Parameter, suffix: &str, bound: &mut BoundParams, ctx: &mut LayerCtx| {
                let v = match provided {
                    Some(vars) => vars[bound.vars.len()],
                    None => ctx.tape.leaf(param.value.clone()),
                };
                bound.names.push(format!("{name}.{suffix}"));
                bound.vars.push(v);
                v
            };
            let k = bind(&layer.kernel, "kernel", bound, ctx);
            let y = if transposed {
                ops::conv_transpose2d(ctx.tape, x, k, stride, padding)?
            } else {
                ops::conv2d(ctx.tape, x, k, stride, padding)?
            };
            let gamma = bind(&layer.gamma, "gamma", bound, ctx);
            let beta = bind(&layer.beta, "beta", bound, ctx);
            match ctx.mode {
                Mode::Train => {
                    let (y, stats) = ops::batch_norm_train(ctx.tape, y, gamma, beta, BN_EPS)?;
                    ctx.bn_stats.push(stats);
                    Ok(y)
                }
                Mode::Eval => ops::batch_norm_eval(
                    ctx.tape,
                    y,
                    gamma,
                    beta,
                    &layer.running_mean,
                    &layer.running_var,
                    BN_EPS,
                ),
            }
        };

        let y = apply_conv_bn(&mut ctx, &mut bound, "enc.stem".into(), &self.stem, x, 1, 3, false)?;
        let mut y = ops::relu(ctx.tape, y);
        for (i, layer) in self.downs.iter().enumerate() {
            let t = apply_conv_bn(&mut ctx, &mut bound, format!("enc.down{i}"), layer, y, 2, 1, false)?;
            y = ops::relu(ctx.tape, t);
        }
        for (i, block) in self.enc_blocks.iter().enumerate() {
            let t = apply_conv_bn(&mut ctx, &mut bound, format!("enc.block{i}.conv1"), &block.conv1, y, 1, 1, false)?;
            let t = ops::relu(ctx.tape, t);
            let t = apply_conv_bn(&mut ctx, &mut bound, format!("enc.block{i}.conv2"), &block.conv2, t, 1, 1, false)?;
            y = ops::add(ctx.tape, y, t)?;
        }
        let features = ops::nchw_to_rows(ctx.tape, y)?;

        let (approx, distances, weights, slots) = if self.config.memory_enabled {
            let slots = leaf!("mem.slots".to_string(), self.bank.slots);
            let d = ops::pairwise_distance(ctx.tape, features, slots)?;
            let neg = ops::neg(ctx.tape, d);
            let dense = ops::softmax_rows(ctx.tape, neg)?;
            let w_hat = if self.config.addressing.sparse_enabled {
                ops::sparsify_rows(ctx.tape, dense, self.config.addressing.k)?
            } else {
                dense
            };
            let approx = ops::matmul(ctx.tape, w_hat, slots)?;
            (approx, Some(d), Some(w_hat), Some(slots))
        } else {
            // Keep the registry aligned: the slots leaf exists but is unused.
            let slots = leaf!("mem.slots".to_string(), self.bank.slots);
            let _ = slots;
            (features, None, None, None)
        };

        let mut y = ops::rows_to_nchw(ctx.tape, approx, n, bh, bw)?;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            let t = apply_conv_bn(&mut ctx, &mut bound, format!("dec.block{i}.conv1"), &block.conv1, y, 1, 1, false)?;
            let t = ops::relu(ctx.tape, t);
            let t = apply_conv_bn(&mut ctx, &mut bound, format!("dec.block{i}.conv2"), &block.conv2, t, 1, 1, false)?;
            y = ops::add(ctx.tape, y, t)?;
        }
        for (i, layer) in self.ups.iter().enumerate() {
            let t = apply_conv_bn(&mut ctx, &mut bound, format!("dec.up{i}"), layer, y, 2, 1, true)?;
            y = ops::relu(ctx.tape, t);
        }
        let head_kernel = leaf!("dec.head.kernel".to_string(), self.head_kernel);
        let y = ops::conv2d(ctx.tape, y, head_kernel, 1, 3)?;
        let head_bias = leaf!("dec.head.bias".to_string(), self.head_bias);
        let y = ops::add_channel_bias(ctx.tape, y, head_bias)?;
        let reconstruction = ops::tanh(ctx.tape, y);

        let vars = ForwardVars {
            reconstruction,
            features,
            approx_features: approx,
            distances,
            weights,
            slots,
            bn_stats: ctx.bn_stats,
        };
        Ok((vars, bound))
    }

    /// Fold batch statistics from a training forward into running statistics.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats]) {
        let mut idx = 0;
        self.visit_bn_mut(&mut |layer| {
            if let Some(s) = stats.get(idx) {
                for (r, &b) in layer.running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                for (r, &b) in layer.running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
            idx += 1;
        });
        debug_assert_eq!(idx, stats.len());
    }

    /// Evaluation forward pass over a batch, with per-position addressing
    /// diagnostics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<ForwardResult, ModelError> {
        self.validate_input(x)?;
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let (vars, _) = self.forward_on_tape(&mut tape, input, Mode::Eval)?;
        let features = tape.value(vars.features).clone();
        let approx_features = tape.value(vars.approx_features).clone();
        let reconstruction = tape.value(vars.reconstruction).clone();
        let mut addressing = Vec::new();
        if let (Some(d), Some(w)) = (vars.distances, vars.weights) {
            let dv = tape.value(d);
            let wv = tape.value(w);
            let m = self.config.memory_slots;
            let rows = dv.len() / m;
            for r in 0..rows {
                let drow = &dv.data()[r * m..(r + 1) * m];
                let (nearest_index, second_index) =
                    if m >= 2 { two_nearest_indices(drow) } else { (0, 0) };
                addressing.push(AddressingResult {
                    weights: Tensor::new(&[m], wv.data()[r * m..(r + 1) * m].to_vec())?,
                    distances: Tensor::new(&[m], drow.to_vec())?,
                    nearest_index,
                    second_index,
                });
            }
        }
        Ok(ForwardResult {
            features,
            approx_features,
            reconstruction,
            addressing,
        })
    }

    /// Encoder pass in eval mode returning the (n·h·w, Z) feature rows.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let result = self.forward_eval(x)?;
        Ok(result.features)
    }

    /// Encoder activations after each down-sampling stage, in eval mode;
    /// feature levels for the trained-encoder perceptual distance.
    pub fn encode_pyramid(&self, x: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        self.validate_input(x)?;
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let mut ctx = LayerCtx { tape: &mut tape, mode: Mode::Eval, bn_stats: Vec::new() };
        let mut levels = Vec::new();
        let mut y = ctx.conv_bn_relu(input, &self.stem, 1, 3)?;
        for layer in &self.downs {
            y = ctx.conv_bn_relu(y, layer, 2, 1)?;
            levels.push(ctx.tape.value(y).clone());
        }
        Ok(levels)
    }

    /// Run one statistics pass over a set of single images, populating the
    /// bank access counts.
    pub fn record_dataset_access(&mut self, images: &[Tensor]) -> Result<(), ModelError> {
        let (h, w) = self.config.input_size;
        let mut results = Vec::new();
        for x in images {
            let batch = x.clone().reshape(&[1, self.config.channels, h, w])?;
            let result = self.forward_eval(&batch)?;
            results.push(result.addressing);
        }
        for addressing in &results {
            for r in addressing {
                memory::record_access(r, &mut self.bank);
            }
        }
        Ok(())
    }

    /// Copy of the model with a replacement memory bank (used by pruning).
    pub fn clone_with_bank(&self, bank: crate::memory::MemoryBank) -> TrustMAEModel {
        let mut out = self.clone();
        out.bank = bank;
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, p| total += p.value.len());
        total
    }

    fn visit_bn_mut(&mut self, f: &mut impl FnMut(&mut ConvBn)) {
        f(&mut self.stem);
        for layer in &mut self.downs {
            f(layer);
        }
        for block in &mut self.enc_blocks {
            f(&mut block.conv1);
            f(&mut block.conv2);
        }
        for block in &mut self.dec_blocks {
            f(&mut block.conv1);
            f(&mut block.conv2);
        }
        for layer in &mut self.ups {
            f(layer);
        }
    }

    /// Visit every trainable parameter in the same stable order as the
    /// leaves bound by [`TrustMAEModel::forward_on_tape`].
    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Parameter)) {
        let visit_conv_bn = |name: &str, layer: &ConvBn, f: &mut dyn FnMut(&str, &Parameter)| {
            f(&format!("{name}.kernel"), &layer.kernel);
            f(&format!("{name}.gamma"), &layer.gamma);
            f(&format!("{name}.beta"), &layer.beta);
        };
        visit_conv_bn("enc.stem", &self.stem, f);
        for (i, layer) in self.downs.iter().enumerate() {
            visit_conv_bn(&format!("enc.down{i}"), layer, f);
        }
        for (i, block) in self.enc_blocks.iter().enumerate() {
            visit_conv_bn(&format!("enc.block{i}.conv1"), &block.conv1, f);
            visit_conv_bn(&format!("enc.block{i}.conv2"), &block.conv2, f);
        }
        f("mem.slots", &self.bank.slots);
        for (i, block) in self.dec_blocks.iter().enumerate() {
            visit_conv_bn(&format!("dec.block{i}.conv1"), &block.conv1, f);
            visit_conv_bn(&format!("dec.block{i}.conv2"), &block.conv2, f);
        }
        for (i, layer) in self.ups.iter().enumerate() {
            visit_conv_bn(&format!("dec.up{i}"), layer, f);
        }
        f("dec.head.kernel", &self.head_kernel);
        f("dec.head.bias", &self.head_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Parameter)) {
        let visit_conv_bn =
            |name: &str, layer: &mut ConvBn, f: &mut dyn FnMut(&str, &mut Parameter)| {
                f(&format!("{name}.kernel"), &mut layer.kernel);
                f(&format!("{name}.gamma"), &mut layer.gamma);
                f(&format!("{name}.beta"), &mut layer.beta);
            };
        visit_conv_bn("enc.stem", &mut self.stem, f);
        for (i, layer) in self.downs.iter_mut().enumerate() {
            visit_conv_bn(&format!("enc.down{i}"), layer, f);
        }
        for (i, block) in self.enc_blocks.iter_mut().enumerate() {
            visit_conv_bn(&format!("enc.block{i}.conv1"), &mut block.conv1, f);
            visit_conv_bn(&format!("enc.block{i}.conv2"), &mut block.conv2, f);
        }
        f("mem.slots", &mut self.bank.slots);
        for (i, block) in self.dec_blocks.iter_mut().enumerate() {
            visit_conv_bn(&format!("dec.block{i}.conv1"), &mut block.conv1, f);
            visit_conv_bn(&format!("dec.block{i}.conv2"), &mut block.conv2, f);
        }
        for (i, layer) in self.ups.iter_mut().enumerate() {
            visit_conv_bn(&format!("dec.up{i}"), layer, f);
        }
        f("dec.head.kernel", &mut self.head_kernel);
        f("dec.head.bias", &mut self.head_bias);
    }

    /// Visit non-trainable state tensors (running statistics).
    pub fn visit_state(&self, f: &mut impl FnMut(&str, &Tensor)) {
        let visit = |name: &str, layer: &ConvBn, f: &mut dyn FnMut(&str, &Tensor)| {
            f(&format!("{name}.running_mean"), &layer.running_mean);
            f(&format!("{name}.running_var"), &layer.running_var);
        };
        visit("enc.stem", &self.stem, f);
        for (i, layer) in self.downs.iter().enumerate() {
            visit(&format!("enc.down{i}"), layer, f);
        }
        for (i, block) in self.enc_blocks.iter().enumerate() {
            visit(&format!("enc.block{i}.conv1"), &block.conv1, f);
            visit(&format!("enc.block{i}.conv2"), &block.conv2, f);
        }
        for (i, block) in self.dec_blocks.iter().enumerate() {
            visit(&format!("dec.block{i}.conv1"), &block.conv1, f);
            visit(&format!("dec.block{i}.conv2"), &block.conv2, f);
        }
        for (i, layer) in self.ups.iter().enumerate() {
            visit(&format!("dec.up{i}"), layer, f);
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        let mut names = Vec::new();
        names.push("enc.stem".to_string());
        for i in 0..self.downs.len() {
            names.push(format!("enc.down{i}"));
        }
        for i in 0..self.enc_blocks.len() {
            names.push(format!("enc.block{i}.conv1"));
            names.push(format!("enc.block{i}.conv2"));
        }
        for i in 0..self.dec_blocks.len() {
            names.push(format!("dec.block{i}.conv1"));
            names.push(format!("dec.block{i}.conv2"));
        }
        for i in 0..self.ups.len() {
            names.push(format!("dec.up{i}"));
        }
        let mut idx = 0;
        self.visit_bn_mut(&mut |layer| {
            f(&format!("{}.running_mean", names[idx]), &mut layer.running_mean);
            f(&format!("{}.running_var", names[idx]), &mut layer.running_var);
            idx += 1;
        });
    }
}

fn two_nearest_indices(row: &[f64]) -> (usize, usize) {
    let (mut i1, mut i2) = if row[0] <= row[1] { (0, 1) } else { (1, 0) };
    for (i, &v) in row.iter().enumerate().skip(2) {
        if v < row[i1] {
            i2 = i1;
            i1 = i;
        } else if v < row[i2] {
            i2 = i;
        }
    }
    (i1, i2)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: (8, 8),
            channels: 1,
            downsample_layers: 1,
            residual_blocks: 1,
            latent_dim: 4,
            memory_slots: 3,
            addressing: AddressingConfig { k: 2, sparse_enabled: true },
            trust: TrustConfig::default(),
            base_width: 2,
            memory_enabled: true,
        }
    }

    fn tiny_input(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[n, 1, 8, 8], -0.9, 0.9, &mut rng)
    }

    #[test]
    fn bottleneck_shape_follows_downsample_count() {
        let mut cfg = ModelConfig::default();
        cfg.downsample_layers = 5;
        cfg.input_size = (64, 64);
        assert_eq!(cfg.bottleneck_size(), (2, 2));
        cfg.input_size = (256, 256);
        assert_eq!(cfg.bottleneck_size(), (8, 8));
    }

    #[test]
    fn encoder_widths_double_capped_at_latent() {
        let mut cfg = ModelConfig::default();
        cfg.base_width = 32;
        cfg.latent_dim = 512;
        cfg.downsample_layers = 5;
        cfg.input_size = (256, 256);
        assert_eq!(cfg.encoder_widths(), vec![64, 128, 256, 512, 512]);
        let desk = ModelConfig::default();
        assert_eq!(desk.encoder_widths(), vec![32, 64, 64]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.input_size = (60, 64);
        assert!(matches!(build(&cfg, 0), Err(ModelError::IndivisibleInput { .. })));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let cfg = tiny_config();
        let a = build(&cfg, 42).unwrap();
        let b = build(&cfg, 42).unwrap();
        let mut params_a = Vec::new();
        a.visit_params(&mut |name, p| params_a.push((name.to_string(), p.value.clone())));
        let mut i = 0;
        b.visit_params(&mut |name, p| {
            assert_eq!(params_a[i].0, name);
            assert_eq!(params_a[i].1, p.value);
            i += 1;
        });
        assert_eq!(i, params_a.len());
        let c = build(&cfg, 43).unwrap();
        let mut any_diff = false;
        let mut i = 0;
        c.visit_params(&mut |_, p| {
            if params_a[i].1 != p.value {
                any_diff = true;
            }
            i += 1;
        });
        assert!(any_diff);
    }

    #[test]
    fn forward_shapes_and_output_range() {
        let model = build(&tiny_config(), 7).unwrap();
        let x = tiny_input(2, 1);
        let out = model.forward_eval(&x).unwrap();
        assert_eq!(out.reconstruction.shape(), &[2, 1, 8, 8]);
        assert_eq!(out.features.shape(), &[2 * 4 * 4, 4]);
        assert!(out.reconstruction.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(out.addressing.len(), 2 * 4 * 4);
    }

    #[test]
    fn identical_inputs_give_identical_features() {
        let model = build(&tiny_config(), 7).unwrap();
        let x = tiny_input(1, 2);
        let f1 = model.encode(&x).unwrap();
        let f2 = model.encode(&x).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn approx_features_lie_in_top_k_convex_hull() {
        let model = build(&tiny_config(), 9).unwrap();
        let x = tiny_input(1, 3);
        let out = model.forward_eval(&x).unwrap();
        let z = model.config.latent_dim;
        for (row, addr) in out.addressing.iter().enumerate() {
            let positive = addr.weights.data().iter().filter(|&&w| w > 0.0).count();
            assert!(positive <= model.config.addressing.k);
            let sum: f64 = addr.weights.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            // Exact reconstruction from weights and slots.
            let mut expect = vec![0.0; z];
            for (slot, &w) in addr.weights.data().iter().enumerate() {
                if w > 0.0 {
                    for (e, &s) in expect.iter_mut().zip(model.bank.slot(slot)) {
                        *e += w * s;
                    }
                }
            }
            let got = &out.approx_features.data()[row * z..(row + 1) * z];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memory_bypass_reproduces_plain_autoencoder() {
        let mut cfg = tiny_config();
        cfg.memory_enabled = false;
        let model = build(&cfg, 11).unwrap();
        let x = tiny_input(1, 4);
        let out = model.forward_eval(&x).unwrap();
        assert_eq!(out.features, out.approx_features);
        assert!(out.addressing.is_empty());
    }

    #[test]
    fn bound_params_cover_registry_in_order() {
        let model = build(&tiny_config(), 5).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(tiny_input(1, 5));
        let (_, bound) = model.forward_on_tape(&mut tape, x, Mode::Train).unwrap();
        let mut registry = Vec::new();
        model.visit_params(&mut |name, _| registry.push(name.to_string()));
        assert_eq!(bound.names, registry);
    }

    #[test]
    fn parameter_count_is_config_function() {
        let model = build(&tiny_config(), 0).unwrap();
        let other = build(&tiny_config(), 99).unwrap();
        assert_eq!(model.parameter_count(), other.parameter_count());
        // Frozen for the tiny config: stem 2·1·49+2+2 = 102; down 4·2·9+4+4 = 80;
        // enc block 2·(4·4·9+4+4) = 304; slots 3·4 = 12; dec block 304;
        // up 4·2·16+2+2 = 132; head 1·2·49+1 = 99.
        assert_eq!(model.parameter_count(), 102 + 80 + 304 + 12 + 304 + 132 + 99);
    }

    #[test]
    fn rejects_wrong_input_shape_and_range() {
        let model = build(&tiny_config(), 1).unwrap();
        let wrong = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(model.forward_eval(&wrong), Err(ModelError::InputShape { .. })));
        let out_of_range = Tensor::full(&[1, 1, 8, 8], 2.0);
        assert!(matches!(model.forward_eval(&out_of_range), Err(ModelError::InputRange(_))));
    }

    #[test]
    fn encode_pyramid_halves_spatial_sizes() {
        let model = build(&tiny_config(), 1).unwrap();
        let x = tiny_input(1, 8);
        let levels = model.encode_pyramid(&x).unwrap();
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].shape(), &[1, 4, 4, 4]);
    }
}
