//! Numerically stable softmax and top-k sparsification with renormalization.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

/// Stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Indices of the k largest entries of a row, ties broken toward the lower
/// index, returned in ascending index order.
pub(crate) fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

fn softmax_value(t: &Tensor, cols: usize) -> Result<Tensor, SubstrateError> {
    t.check_finite("softmax input")?;
    let rows = t.len() / cols;
    let mut out = vec![0.0; t.len()];
    for r in 0..rows {
        softmax_row(&t.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(t.shape(), out)
}

fn softmax_backward(y: &Tensor, g: &Tensor, cols: usize) -> Tensor {
    let rows = y.len() / cols;
    let mut gx = vec![0.0; y.len()];
    for r in 0..rows {
        let ys = &y.data()[r * cols..(r + 1) * cols];
        let gs = &g.data()[r * cols..(r + 1) * cols];
        let dot: f64 = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for c in 0..cols {
            gx[r * cols + c] = ys[c] * (gs[c] - dot);
        }
    }
    Tensor::new(y.shape(), gx).expect("grad shape")
}

/// Softmax of a 1-D vector.
pub fn softmax(tape: &mut Tape, v: Var) -> Result<Var, SubstrateError> {
    let t = tape.value(v);
    if t.rank() != 1 {
        return Err(SubstrateError::ShapeMismatch {
            op: "softmax",
            left: t.shape().to_vec(),
            right: vec![0],
        });
    }
    let cols = t.len();
    let value = softmax_value(t, cols)?;
    let y = value.clone();
    Ok(tape.push(
        value,
        &[v],
        Box::new(move |g, _| vec![softmax_backward(&y, g, cols)]),
    ))
}

/// Row-wise softmax of a (rows, cols) matrix.
pub fn softmax_rows(tape: &mut Tape, m: Var) -> Result<Var, SubstrateError> {
    let t = tape.value(m);
    let cols = match *t.shape() {
        [_, c] => c,
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "softmax_rows",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    let value = softmax_value(t, cols)?;
    let y = value.clone();
    Ok(tape.push(
        value,
        &[m],
        Box::new(move |g, _| vec![softmax_backward(&y, g, cols)]),
    ))
}

/// Keep the k largest entries of each row, zero the rest, renormalize each
/// row to sum 1. Gradients flow only through the kept entries.
pub fn sparsify_rows(tape: &mut Tape, w: Var, k: usize) -> Result<Var, SubstrateError> {
    let t = tape.value(w);
    let cols = match *t.shape() {
        [_, c] => c,
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "sparsify_rows",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if k == 0 || k > cols {
        return Err(SubstrateError::InvalidArgument {
            op: "sparsify_rows",
            msg: format!("k={k} out of range 1..={cols}"),
        });
    }
    let rows = t.len() / cols;
    let mut out = vec![0.0; t.len()];
    let mut kept_per_row: Vec<Vec<usize>> = Vec::with_capacity(rows);
    let mut sums: Vec<f64> = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let kept = topk_indices(row, k);
        let s: f64 = kept.iter().map(|&i| row[i]).sum();
        debug_assert!(s > 0.0, "sparsify on a non-positive row");
        for &i in &kept {
            out[r * cols + i] = row[i] / s;
        }
        kept_per_row.push(kept);
        sums.push(s);
    }
    let value = Tensor::new(t.shape(), out.clone())?;
    Ok(tape.push(
        value,
        &[w],
        Box::new(move |g, parents| {
            let mut gx = vec![0.0; parents[0].len()];
            for r in 0..rows {
                let s = sums[r];
                let kept = &kept_per_row[r];
                let dot: f64 = kept.iter().map(|&i| g.data()[r * cols + i] * out[r * cols + i]).sum();
                for &i in kept {
                    gx[r * cols + i] = (g.data()[r * cols + i] - dot) / s;
                }
            }
            vec![Tensor::new(parents[0].shape(), gx).expect("grad shape")]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_input_gives_uniform_weights() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(&[4]));
        let y = softmax(&mut tape, v).unwrap();
        for &w in tape.value(y).data() {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn large_inputs_do_not_overflow() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = softmax(&mut tape, v).unwrap();
        let out = tape.value(y).data();
        assert!(out[0] > 1.0 - 1e-12 && out[1] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn two_point_softmax_matches_direct_evaluation() {
        // softmax([0, -2]) = [e^0, e^-2] / (e^0 + e^-2)
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[2], vec![0.0, -2.0]).unwrap());
        let y = softmax(&mut tape, v).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.8808).abs() < 1e-4);
        assert!((out[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn nan_input_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        assert!(softmax(&mut tape, v).is_err());
    }

    #[test]
    fn sparsify_renormalizes_top_k() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(&[1, 4], vec![0.5, 0.3, 0.1, 0.1]).unwrap());
        let y = sparsify_rows(&mut tape, w, 2).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.625).abs() < 1e-12);
        assert!((out[1] - 0.375).abs() < 1e-12);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn sparsify_with_k_equal_len_is_identity() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap());
        let y = sparsify_rows(&mut tape, w, 3).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([0.2, 0.5, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn topk_ties_break_to_lower_index() {
        assert_eq!(topk_indices(&[0.4, 0.4, 0.2], 1), vec![0]);
        assert_eq!(topk_indices(&[0.2, 0.4, 0.4], 2), vec![1, 2]);
        assert_eq!(topk_indices(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
    }
}
