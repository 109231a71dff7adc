//! Per-channel batch normalization over NCHW activations.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

/// Batch mean/variance observed during one training forward, returned so the
/// caller can fold them into its running statistics. Gradients never flow
/// through these.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), SubstrateError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(SubstrateError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![0, 0, 0, 0],
        }),
    }
}

fn check_channel_param(op: &'static str, t: &Tensor, c: usize) -> Result<(), SubstrateError> {
    if t.shape() != [c] {
        return Err(SubstrateError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![c],
        });
    }
    Ok(())
}

/// Training mode: normalize with the biased batch statistics of x.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats), SubstrateError> {
    let (n, c, hw) = nchw("batch_norm", tape.value(x))?;
    check_channel_param("batch_norm", tape.value(gamma), c)?;
    check_channel_param("batch_norm", tape.value(beta), c)?;
    let count = (n * hw) as f64;

    let xv = tape.value(x).data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            mean[ch] += xv[base..base + hw].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            var[ch] += xv[base..base + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }

    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(beta).data().to_vec();
    let mut out = vec![0.0; xv.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for k in 0..hw {
                out[base + k] = gv[ch] * (xv[base + k] - mean[ch]) * inv + bv[ch];
            }
        }
    }
    let stats = BatchStats { mean: mean.clone(), var: var.clone() };
    let value = Tensor::new(tape.value(x).shape(), out)?;
    let var_out = tape.push(
        value,
        &[x, gamma, beta],
        Box::new(move |g, parents| {
            let xv = parents[0].data();
            let gammav = parents[1].data();
            let gd = g.data();
            let mut gx = vec![0.0; xv.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                // Channel-wide sums of dy and dy * x_hat.
                let mut sum_g = 0.0;
                let mut sum_gx_hat = 0.0;
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for k in 0..hw {
                        let x_hat = (xv[base + k] - mean[ch]) * inv;
                        sum_g += gd[base + k];
                        sum_gx_hat += gd[base + k] * x_hat;
                    }
                }
                ggamma[ch] = sum_gx_hat;
                gbeta[ch] = sum_g;
                let mg = sum_g / count;
                let mgx = sum_gx_hat / count;
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for k in 0..hw {
                        let x_hat = (xv[base + k] - mean[ch]) * inv;
                        gx[base + k] = gammav[ch] * inv * (gd[base + k] - mg - x_hat * mgx);
                    }
                }
            }
            vec![
                Tensor::new(parents[0].shape(), gx).expect("grad shape"),
                Tensor::new(&[c], ggamma).expect("grad shape"),
                Tensor::new(&[c], gbeta).expect("grad shape"),
            ]
        }),
    );
    Ok((var_out, stats))
}

/// Inference mode: normalize with fixed running statistics.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Var, SubstrateError> {
    let (n, c, hw) = nchw("batch_norm", tape.value(x))?;
    check_channel_param("batch_norm", tape.value(gamma), c)?;
    check_channel_param("batch_norm", tape.value(beta), c)?;
    check_channel_param("batch_norm", running_mean, c)?;
    check_channel_param("batch_norm", running_var, c)?;

    let mean = running_mean.data().to_vec();
    let var = running_var.data().to_vec();
    let xv = tape.value(x).data();
    let gv = tape.value(gamma).data();
    let bv = tape.value(beta).data();
    let mut out = vec![0.0; xv.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for k in 0..hw {
                out[base + k] = gv[ch] * (xv[base + k] - mean[ch]) * inv + bv[ch];
            }
        }
    }
    let value = Tensor::new(tape.value(x).shape(), out)?;
    Ok(tape.push(
        value,
        &[x, gamma, beta],
        Box::new(move |g, parents| {
            let xv = parents[0].data();
            let gammav = parents[1].data();
            let gd = g.data();
            let mut gx = vec![0.0; xv.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                for i in 0..n {
                    let base = (i * c + ch) * hw;
                    for k in 0..hw {
                        let x_hat = (xv[base + k] - mean[ch]) * inv;
                        gx[base + k] = gammav[ch] * inv * gd[base + k];
                        ggamma[ch] += gd[base + k] * x_hat;
                        gbeta[ch] += gd[base + k];
                    }
                }
            }
            vec![
                Tensor::new(parents[0].shape(), gx).expect("grad shape"),
                Tensor::new(&[c], ggamma).expect("grad shape"),
                Tensor::new(&[c], gbeta).expect("grad shape"),
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.leaf(Tensor::full(&[1], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[1]));
        let (y, stats) = batch_norm_train(&mut tape, x, gamma, beta, 1e-5).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.var[0] - 1.25).abs() < 1e-12);
        let out = tape.value(y).data();
        let m: f64 = out.iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap());
        let gamma = tape.leaf(Tensor::full(&[1], 2.0));
        let beta = tape.leaf(Tensor::full(&[1], 1.0));
        let rm = Tensor::full(&[1], 3.0);
        let rv = Tensor::full(&[1], 4.0);
        let y = batch_norm_eval(&mut tape, x, gamma, beta, &rm, &rv, 0.0).unwrap();
        // (3-3)/2*2+1 = 1, (5-3)/2*2+1 = 3
        let out = tape.value(y).data();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 3.0).abs() < 1e-12);
    }
}
