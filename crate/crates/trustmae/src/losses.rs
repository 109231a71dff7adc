//! Training loss terms — L1 reconstruction, SSIM, margin, trust — and their
//! weighted total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::TrustConfig;
use crate::model::ForwardVars;
use crate::substrate::ops::{self, TrustBatchInfo};
use crate::substrate::{SubstrateError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
}

/// Loss weights and SSIM constants. The λ defaults follow the training setup
/// the architecture was tuned with; c1 and c2 assume unit dynamic range, so
/// images are remapped from [-1,1] to [0,1] before SSIM statistics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_sm: f64,
    pub lambda_margin: f64,
    pub lambda_trust: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_rec: 10.0,
            lambda_sm: 10.0,
            lambda_margin: 0.1,
            lambda_trust: 1.0,
            ssim_window: 11,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

/// Per-term loss values for one step; `total` is the λ-weighted sum of the
/// enabled terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub ssim: f64,
    pub margin: f64,
    pub trust: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, cfg: &LossConfig, trust_enabled: bool) -> f64 {
        let mut t = cfg.lambda_rec * self.rec + cfg.lambda_sm * self.ssim;
        t += cfg.lambda_margin * self.margin;
        if trust_enabled {
            t += cfg.lambda_trust * self.trust;
        }
        t
    }
}

/// Tape handles of the individual terms plus the wired total.
pub struct LossVars {
    pub rec: Var,
    pub ssim: Var,
    pub margin: Option<Var>,
    pub trust: Option<Var>,
    pub total: Var,
    pub trust_info: Option<TrustBatchInfo>,
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute error over all elements, on the tape.
pub fn l1_recon_on_tape(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var, LossError> {
    check_same_shape(tape.value(x), tape.value(x_hat))?;
    let diff = ops::sub(tape, x_hat, x)?;
    let mag = ops::abs(tape, diff);
    Ok(ops::mean(tape, mag)?)
}

/// Mean absolute error between two tensors.
pub fn l1_recon(x: &Tensor, x_hat: &Tensor) -> Result<f64, LossError> {
    check_same_shape(x, x_hat)?;
    Ok(x.zip(x_hat, |a, b| (a - b).abs())?.mean())
}

/// Per-pixel SSIM of (n,C,H,W) images in [-1,1], on the tape. Inputs are
/// remapped to [0,1]; statistics use a uniform window with border clamping.
pub fn ssim_map_on_tape(
    tape: &mut Tape,
    p: Var,
    q: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    check_same_shape(tape.value(p), tape.value(q))?;
    let p = remap_unit(tape, p);
    let q = remap_unit(tape, q);
    let w = cfg.ssim_window;
    let mu_p = ops::box_mean(tape, p, w)?;
    let mu_q = ops::box_mean(tape, q, w)?;
    let pp = ops::mul(tape, p, p)?;
    let qq = ops::mul(tape, q, q)?;
    let pq = ops::mul(tape, p, q)?;
    let e_pp = ops::box_mean(tape, pp, w)?;
    let e_qq = ops::box_mean(tape, qq, w)?;
    let e_pq = ops::box_mean(tape, pq, w)?;
    let mu_p2 = ops::mul(tape, mu_p, mu_p)?;
    let mu_q2 = ops::mul(tape, mu_q, mu_q)?;
    let mu_pq = ops::mul(tape, mu_p, mu_q)?;
    let var_p = ops::sub(tape, e_pp, mu_p2)?;
    let var_q = ops::sub(tape, e_qq, mu_q2)?;
    let cov = ops::sub(tape, e_pq, mu_pq)?;

    let lum_n = ops::scale(tape, mu_pq, 2.0);
    let lum_n = ops::add_scalar(tape, lum_n, cfg.ssim_c1);
    let str_n = ops::scale(tape, cov, 2.0);
    let str_n = ops::add_scalar(tape, str_n, cfg.ssim_c2);
    let num = ops::mul(tape, lum_n, str_n)?;

    let lum_d = ops::add(tape, mu_p2, mu_q2)?;
    let lum_d = ops::add_scalar(tape, lum_d, cfg.ssim_c1);
    let str_d = ops::add(tape, var_p, var_q)?;
    let str_d = ops::add_scalar(tape, str_d, cfg.ssim_c2);
    let den = ops::mul(tape, lum_d, str_d)?;

    Ok(ops::div(tape, num, den)?)
}

fn remap_unit(tape: &mut Tape, x: Var) -> Var {
    let half = ops::scale(tape, x, 0.5);
    ops::add_scalar(tape, half, 0.5)
}

/// 1 − mean SSIM, on the tape.
pub fn ssim_loss_on_tape(tape: &mut Tape, p: Var, q: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    let map = ssim_map_on_tape(tape, p, q, cfg)?;
    let m = ops::mean(tape, map)?;
    let neg = ops::neg(tape, m);
    Ok(ops::add_scalar(tape, neg, 1.0))
}

/// Per-pixel SSIM map of a (C,H,W) image pair, averaged over channels.
pub fn ssim_map(p: &Tensor, q: &Tensor, cfg: &LossConfig) -> Result<Tensor, LossError> {
    check_same_shape(p, q)?;
    let (c, h, w) = match *p.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(LossError::ShapeMismatch {
                left: p.shape().to_vec(),
                right: vec![0, 0, 0],
            })
        }
    };
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone().reshape(&[1, c, h, w])?);
    let qv = tape.leaf(q.clone().reshape(&[1, c, h, w])?);
    let map = ssim_map_on_tape(&mut tape, pv, qv, cfg)?;
    let full = tape.value(map);
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&full.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v / c as f64;
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

/// 1 − mean SSIM of a (C,H,W) image pair.
pub fn ssim_loss(p: &Tensor, q: &Tensor, cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(1.0 - ssim_map(p, q, cfg)?.mean())
}

/// Compose the weighted total over a completed forward pass. Every term
/// value is computed for the breakdown, but only terms with a nonzero λ
/// (and an available graph) are wired into the total, so a zero λ
/// contributes exactly zero gradient.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    x: Var,
    fwd: &ForwardVars,
    cfg: &LossConfig,
    trust_cfg: &TrustConfig,
) -> Result<LossVars, LossError> {
    let rec = l1_recon_on_tape(tape, x, fwd.reconstruction)?;
    let ssim = ssim_loss_on_tape(tape, x, fwd.reconstruction, cfg)?;
    let (margin, trust, trust_info) = match fwd.distances {
        Some(d) => {
            let margin = ops::margin_from_distances(tape, d)?;
            if trust_cfg.enabled {
                let (t, info) = ops::trust_from_distances(tape, d, trust_cfg.delta2)?;
                (Some(margin), Some(t), Some(info))
            } else {
                (Some(margin), None, None)
            }
        }
        None => (None, None, None),
    };

    let mut total: Option<Var> = None;
    let wire = |tape: &mut Tape, term: Var, lambda: f64, total: &mut Option<Var>| {
        if lambda == 0.0 {
            return Ok::<(), LossError>(());
        }
        let scaled = ops::scale(tape, term, lambda);
        *total = Some(match *total {
            Some(t) => ops::add(tape, t, scaled)?,
            None => scaled,
        });
        Ok(())
    };
    wire(tape, rec, cfg.lambda_rec, &mut total)?;
    wire(tape, ssim, cfg.lambda_sm, &mut total)?;
    if let Some(m) = margin {
        wire(tape, m, cfg.lambda_margin, &mut total)?;
    }
    if let Some(t) = trust {
        wire(tape, t, cfg.lambda_trust, &mut total)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.leaf(Tensor::scalar(0.0)),
    };
    Ok(LossVars {
        rec,
        ssim,
        margin,
        trust,
        total,
        trust_info,
    })
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            rec: tape.value(self.rec).as_scalar().unwrap_or(f64::NAN),
            ssim: tape.value(self.ssim).as_scalar().unwrap_or(f64::NAN),
            margin: self
                .margin
                .map(|m| tape.value(m).as_scalar().unwrap_or(f64::NAN))
                .unwrap_or(0.0),
            trust: self
                .trust
                .map(|t| tape.value(t).as_scalar().unwrap_or(f64::NAN))
                .unwrap_or(0.0),
            total: tape.value(self.total).as_scalar().unwrap_or(f64::NAN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l1_examples() {
        let x = Tensor::full(&[1, 4, 4], 0.25);
        assert_eq!(l1_recon(&x, &x).unwrap(), 0.0);
        let shifted = x.map(|v| v + 0.5);
        assert!((l1_recon(&x, &shifted).unwrap() - 0.5).abs() < 1e-12);
        let wrong = Tensor::zeros(&[1, 2, 2]);
        assert!(l1_recon(&x, &wrong).is_err());
    }

    #[test]
    fn l1_gradient_away_from_zeros_is_sign_over_count() {
        let f = |tape: &mut Tape, inputs: &[Var]| {
            l1_recon_on_tape(tape, inputs[0], inputs[1]).map_err(|e| match e {
                LossError::Substrate(s) => s,
                other => SubstrateError::InvalidArgument {
                    op: "l1",
                    msg: other.to_string(),
                },
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let x_hat = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(&f, &[x, x_hat], 1e-6).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }

    #[test]
    fn ssim_of_identical_images_is_one_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::rand_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng);
        let map = ssim_map(&p, &p, &LossConfig::default()).unwrap();
        for &v in map.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(ssim_loss(&p, &p, &LossConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Tensor::rand_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng);
        let q = Tensor::rand_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng);
        let cfg = LossConfig::default();
        let a = ssim_map(&p, &q, &cfg).unwrap();
        let b = ssim_map(&q, &p, &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_of_constant_offset_images_matches_hand_formula() {
        // Constant p and q = p + 0.1 (in [0,1] units after the remap):
        // variances and covariance vanish, so
        // SSIM = (2 mu_p mu_q + c1) / (mu_p^2 + mu_q^2 + c1) * (c2 / c2).
        let cfg = LossConfig::default();
        let p = Tensor::full(&[1, 16, 16], -0.2); // remaps to 0.4
        let q = Tensor::full(&[1, 16, 16], 0.0); // remaps to 0.5
        let (mp, mq) = (0.4, 0.5);
        let expect = (2.0 * mp * mq + cfg.ssim_c1) / (mp * mp + mq * mq + cfg.ssim_c1);
        let map = ssim_map(&p, &q, &cfg).unwrap();
        for &v in map.data() {
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn ssim_loss_is_within_zero_to_two_and_decreases_toward_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Tensor::rand_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng);
        let noise = Tensor::rand_uniform(&[1, 16, 16], -1.0, 1.0, &mut rng);
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for step in 0..=4 {
            let t = step as f64 / 4.0;
            // Interpolate q from noise toward p.
            let q = noise.zip(&p, |nv, pv| nv + (pv - nv) * t).unwrap();
            let loss = ssim_loss(&p, &q, &cfg).unwrap();
            assert!((0.0..=2.0).contains(&loss));
            assert!(loss <= last + 1e-12, "not monotone at step {step}");
            last = loss;
        }
        assert!(last.abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let p = Tensor::zeros(&[1, 8, 8]);
        assert!(ssim_map(&p, &p, &LossConfig::default()).is_err());
    }
}
