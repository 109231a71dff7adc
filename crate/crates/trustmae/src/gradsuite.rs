//! Finite-difference verification suite covering every differentiable
//! primitive plus the composite losses and the whole training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::losses::{self, LossConfig};
use crate::memory::{AddressingConfig, TrustConfig};
use crate::model::{self, Mode, ModelConfig};
use crate::substrate::gradcheck::grad_check;
use crate::substrate::{ops, SubstrateError, Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Deterministic non-uniform weights so every output coordinate of an op
/// gets a distinct sensitivity in the scalarized objective.
fn weighted_sum(tape: &mut Tape, x: Var) -> Result<Var, SubstrateError> {
    let shape = tape.value(x).shape().to_vec();
    let weights = tape.leaf(Tensor::from_fn(&shape, |i| (i as f64 * 0.7).sin() + 1.2));
    let prod = ops::mul(tape, x, weights)?;
    ops::sum(tape, prod)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

type CheckFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, SubstrateError>>;

fn run_check(
    rows: &mut Vec<CheckRow>,
    name: &str,
    f: CheckFn,
    inputs: Vec<Tensor>,
) {
    let result = grad_check(&move |tape: &mut Tape, vars: &[Var]| f(tape, vars), &inputs, EPS);
    match result {
        Ok(err) => rows.push(CheckRow {
            name: name.to_string(),
            max_rel_error: err,
            pass: err <= TOLERANCE,
        }),
        Err(e) => rows.push(CheckRow {
            name: format!("{name} ({e})"),
            max_rel_error: f64::INFINITY,
            pass: false,
        }),
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_size: (8, 8),
        channels: 1,
        downsample_layers: 1,
        residual_blocks: 1,
        latent_dim: 4,
        memory_slots: 3,
        addressing: AddressingConfig { k: 2, sparse_enabled: true },
        trust: TrustConfig { delta2: 5.0, enabled: true },
        base_width: 2,
        memory_enabled: true,
    }
}

/// Run the whole suite for one seed.
pub fn run_seed(seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    // Elementwise (inputs kept away from the relu/abs kinks).
    let a = uniform(&mut rng, &[3, 4], 0.1, 1.0);
    let b = uniform(&mut rng, &[3, 4], 0.2, 1.1);
    for (name, f) in [
        ("add", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::add(t, v[0], v[1])?;
            weighted_sum(t, y)
        }) as CheckFn),
        ("sub", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::sub(t, v[0], v[1])?;
            weighted_sum(t, y)
        })),
        ("mul", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::mul(t, v[0], v[1])?;
            weighted_sum(t, y)
        })),
        ("div", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::div(t, v[0], v[1])?;
            weighted_sum(t, y)
        })),
    ] {
        run_check(&mut rows, name, f, vec![a.clone(), b.clone()]);
    }
    let signed = uniform(&mut rng, &[12], -1.0, 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for (name, f) in [
        ("scale", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::scale(t, v[0], -1.7);
            weighted_sum(t, y)
        }) as CheckFn),
        ("square", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::square(t, v[0]);
            weighted_sum(t, y)
        })),
        ("abs", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::abs(t, v[0]);
            weighted_sum(t, y)
        })),
        ("relu", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::relu(t, v[0]);
            weighted_sum(t, y)
        })),
        ("leaky_relu", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::leaky_relu(t, v[0], 0.2);
            weighted_sum(t, y)
        })),
        ("tanh", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = ops::tanh(t, v[0]);
            weighted_sum(t, y)
        })),
    ] {
        run_check(&mut rows, name, f, vec![signed.clone()]);
    }

    // Linear algebra.
    run_check(
        &mut rows,
        "matmul",
        Box::new(|t, v| {
            let y = ops::matmul(t, v[0], v[1])?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[4, 2], -1.0, 1.0)],
    );
    run_check(
        &mut rows,
        "linear",
        Box::new(|t, v| {
            let y = ops::linear(t, v[0], v[1], v[2])?;
            weighted_sum(t, y)
        }),
        vec![
            uniform(&mut rng, &[3, 4], -1.0, 1.0),
            uniform(&mut rng, &[4, 2], -1.0, 1.0),
            uniform(&mut rng, &[2], -1.0, 1.0),
        ],
    );

    // Convolutions.
    run_check(
        &mut rows,
        "conv2d",
        Box::new(|t, v| {
            let y = ops::conv2d(t, v[0], v[1], 2, 1)?;
            weighted_sum(t, y)
        }),
        vec![
            uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0),
            uniform(&mut rng, &[3, 2, 3, 3], -0.7, 0.7),
        ],
    );
    run_check(
        &mut rows,
        "conv_transpose2d",
        Box::new(|t, v| {
            let y = ops::conv_transpose2d(t, v[0], v[1], 2, 1)?;
            weighted_sum(t, y)
        }),
        vec![
            uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2, 3, 4, 4], -0.7, 0.7),
        ],
    );
    run_check(
        &mut rows,
        "add_channel_bias",
        Box::new(|t, v| {
            let y = ops::add_channel_bias(t, v[0], v[1])?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0), uniform(&mut rng, &[3], -1.0, 1.0)],
    );

    // Normalization.
    run_check(
        &mut rows,
        "batch_norm_train",
        Box::new(|t, v| {
            let (y, _) = ops::batch_norm_train(t, v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y)
        }),
        vec![
            uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], 0.5, 1.5),
            uniform(&mut rng, &[2], -0.5, 0.5),
        ],
    );
    let rm = uniform(&mut rng, &[2], -0.3, 0.3);
    let rv = uniform(&mut rng, &[2], 0.5, 1.5);
    run_check(
        &mut rows,
        "batch_norm_eval",
        Box::new(move |t, v| {
            let y = ops::batch_norm_eval(t, v[0], v[1], v[2], &rm, &rv, 1e-5)?;
            weighted_sum(t, y)
        }),
        vec![
            uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0),
            uniform(&mut rng, &[2], 0.5, 1.5),
            uniform(&mut rng, &[2], -0.5, 0.5),
        ],
    );

    // Addressing chain.
    run_check(
        &mut rows,
        "softmax",
        Box::new(|t, v| {
            let y = ops::softmax(t, v[0])?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[6], -2.0, 2.0)],
    );
    run_check(
        &mut rows,
        "softmax_rows",
        Box::new(|t, v| {
            let y = ops::softmax_rows(t, v[0])?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[3, 5], -2.0, 2.0)],
    );
    run_check(
        &mut rows,
        "sparsify_rows",
        Box::new(|t, v| {
            let w = ops::softmax_rows(t, v[0])?;
            let s = ops::sparsify_rows(t, w, 2)?;
            weighted_sum(t, s)
        }),
        vec![uniform(&mut rng, &[3, 5], -2.0, 2.0)],
    );
    run_check(
        &mut rows,
        "pairwise_distance",
        Box::new(|t, v| {
            let d = ops::pairwise_distance(t, v[0], v[1])?;
            weighted_sum(t, d)
        }),
        vec![uniform(&mut rng, &[4, 3], -1.0, 1.0), uniform(&mut rng, &[5, 3], -1.0, 1.0)],
    );
    run_check(
        &mut rows,
        "retrieve (weights x slots)",
        Box::new(|t, v| {
            let d = ops::pairwise_distance(t, v[0], v[1])?;
            let neg = ops::neg(t, d);
            let w = ops::softmax_rows(t, neg)?;
            let s = ops::sparsify_rows(t, w, 2)?;
            let z = ops::matmul(t, s, v[1])?;
            weighted_sum(t, z)
        }),
        vec![uniform(&mut rng, &[4, 3], -1.0, 1.0), uniform(&mut rng, &[5, 3], -1.0, 1.0)],
    );
    run_check(
        &mut rows,
        "margin_loss",
        Box::new(|t, v| {
            let d = ops::pairwise_distance(t, v[0], v[1])?;
            ops::margin_from_distances(t, d)
        }),
        vec![uniform(&mut rng, &[4, 3], -1.0, 1.0), uniform(&mut rng, &[5, 3], -1.0, 1.0)],
    );
    run_check(
        &mut rows,
        "trust_loss_batch",
        Box::new(|t, v| {
            let d = ops::pairwise_distance(t, v[0], v[1])?;
            let (loss, _) = ops::trust_from_distances(t, d, 5.0)?;
            Ok(loss)
        }),
        vec![uniform(&mut rng, &[6, 3], -1.5, 1.5), uniform(&mut rng, &[4, 3], -1.0, 1.0)],
    );

    // Resampling and filtering.
    run_check(
        &mut rows,
        "bilinear_upsample",
        Box::new(|t, v| {
            let y = ops::bilinear_upsample(t, v[0], 7, 9)?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)],
    );
    run_check(
        &mut rows,
        "box_mean",
        Box::new(|t, v| {
            let y = ops::box_mean(t, v[0], 3)?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[1, 2, 6, 6], -1.0, 1.0)],
    );
    run_check(
        &mut rows,
        "nchw_to_rows",
        Box::new(|t, v| {
            let y = ops::nchw_to_rows(t, v[0])?;
            weighted_sum(t, y)
        }),
        vec![uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0)],
    );

    // Composite losses.
    run_check(
        &mut rows,
        "l1_recon",
        Box::new(|t, v| {
            losses::l1_recon_on_tape(t, v[0], v[1]).map_err(to_substrate)
        }),
        vec![uniform(&mut rng, &[1, 1, 12, 12], -0.9, 0.9), uniform(&mut rng, &[1, 1, 12, 12], -0.9, 0.9)],
    );
    let ssim_cfg = LossConfig::default();
    run_check(
        &mut rows,
        "ssim_loss",
        Box::new(move |t, v| {
            losses::ssim_loss_on_tape(t, v[0], v[1], &ssim_cfg).map_err(to_substrate)
        }),
        vec![uniform(&mut rng, &[1, 1, 12, 12], -0.9, 0.9), uniform(&mut rng, &[1, 1, 12, 12], -0.9, 0.9)],
    );

    // Whole objective on a 2-image batch of a tiny model: gradients flow
    // from the total loss through addressing to every parameter.
    let cfg = tiny_model_config();
    let template = model::build(&cfg, seed ^ 0x5eed).expect("tiny model");
    let mut inputs = vec![uniform(&mut rng, &[2, 1, 8, 8], -0.9, 0.9)];
    template.visit_params(&mut |_, p| inputs.push(p.value.clone()));
    let mut loss_cfg = LossConfig::default();
    loss_cfg.ssim_window = 5;
    let trust_cfg = cfg.trust;
    run_check(
        &mut rows,
        "total_loss (tiny model)",
        Box::new(move |t, v| {
            let (fwd, _) = template
                .forward_with_params(t, v[0], Mode::Train, Some(&v[1..]))
                .map_err(|e| SubstrateError::InvalidArgument {
                    op: "total_loss",
                    msg: e.to_string(),
                })?;
            let lv = losses::total_loss_on_tape(t, v[0], &fwd, &loss_cfg, &trust_cfg)
                .map_err(to_substrate)?;
            Ok(lv.total)
        }),
        inputs,
    );

    rows
}

fn to_substrate(e: losses::LossError) -> SubstrateError {
    match e {
        losses::LossError::Substrate(s) => s,
        other => SubstrateError::InvalidArgument {
            op: "loss",
            msg: other.to_string(),
        },
    }
}

/// Run the suite over several seeds; returns all rows.
pub fn run(seeds: &[u64]) -> Vec<CheckRow> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for mut row in run_seed(seed) {
            row.name = format!("{} [seed {seed}]", row.name);
            rows.push(row);
        }
    }
    rows
}

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_on_default_seeds() {
        let rows = run(&DEFAULT_SEEDS);
        let failures: Vec<&CheckRow> = rows.iter().filter(|r| !r.pass).collect();
        assert!(
            failures.is_empty(),
            "failing checks: {:?}",
            failures
                .iter()
                .map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error))
                .collect::<Vec<_>>()
        );
    }
}
