//! Distance-matrix operations used by the memory addressing and the margin
//! and trust-region losses.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

/// Regularizer inside the euclidean norm so its gradient exists at zero
/// distance: d = sqrt(sum of squares + EPS).
pub const NORM_EPS: f64 = 1e-12;

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    (s + NORM_EPS).sqrt()
}

/// Two smallest entries of a row (ties toward the lower index):
/// returns (index_of_smallest, index_of_second_smallest).
pub(crate) fn two_nearest(row: &[f64]) -> (usize, usize) {
    debug_assert!(row.len() >= 2);
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

/// D[p, i] = ‖z_p − m_i‖₂ for z:(P,Z) against m:(M,Z).
pub fn pairwise_distance(tape: &mut Tape, z: Var, m: Var) -> Result<Var, SubstrateError> {
    let (zv, mv) = (tape.value(z), tape.value(m));
    let (p, zdim) = match *zv.shape() {
        [p, d] => (p, d),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "pairwise_distance",
                left: zv.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    let (slots, mdim) = match *mv.shape() {
        [s, d] => (s, d),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "pairwise_distance",
                left: mv.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if zdim != mdim {
        return Err(SubstrateError::ShapeMismatch {
            op: "pairwise_distance",
            left: zv.shape().to_vec(),
            right: mv.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; p * slots];
    for pi in 0..p {
        let zrow = &zv.data()[pi * zdim..(pi + 1) * zdim];
        for si in 0..slots {
            out[pi * slots + si] = euclidean(zrow, &mv.data()[si * zdim..(si + 1) * zdim]);
        }
    }
    let value = Tensor::new(&[p, slots], out.clone())?;
    Ok(tape.push(
        value,
        &[z, m],
        Box::new(move |g, parents| {
            let (zv, mv) = (parents[0].data(), parents[1].data());
            let mut gz = vec![0.0; p * zdim];
            let mut gm = vec![0.0; slots * zdim];
            for pi in 0..p {
                for si in 0..slots {
                    let coeff = g.data()[pi * slots + si] / out[pi * slots + si];
                    if coeff == 0.0 {
                        continue;
                    }
                    for d in 0..zdim {
                        let diff = zv[pi * zdim + d] - mv[si * zdim + d];
                        gz[pi * zdim + d] += coeff * diff;
                        gm[si * zdim + d] -= coeff * diff;
                    }
                }
            }
            vec![
                Tensor::new(&[p, zdim], gz).expect("grad shape"),
                Tensor::new(&[slots, zdim], gm).expect("grad shape"),
            ]
        }),
    ))
}

/// Mean over rows of the hinge [d⁽¹⁾ − d⁽²⁾ + 1]₊ between the two smallest
/// distances of each row; subgradient 0 on the hinge boundary.
pub fn margin_from_distances(tape: &mut Tape, d: Var) -> Result<Var, SubstrateError> {
    let t = tape.value(d);
    let (rows, cols) = match *t.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "margin_from_distances",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if cols < 2 {
        return Err(SubstrateError::InvalidArgument {
            op: "margin_from_distances",
            msg: "needs at least 2 memory slots".into(),
        });
    }
    let mut total = 0.0;
    let mut active: Vec<(usize, usize, usize)> = Vec::new();
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let (i1, i2) = two_nearest(row);
        let h = row[i1] - row[i2] + 1.0;
        if h > 0.0 {
            total += h;
            active.push((r, i1, i2));
        }
    }
    let value = Tensor::scalar(total / rows as f64);
    Ok(tape.push(
        value,
        &[d],
        Box::new(move |g, parents| {
            let scale = g.data()[0] / rows as f64;
            let mut gd = vec![0.0; parents[0].len()];
            for &(r, i1, i2) in &active {
                gd[r * cols + i1] += scale;
                gd[r * cols + i2] -= scale;
            }
            vec![Tensor::new(parents[0].shape(), gd).expect("grad shape")]
        }),
    ))
}

/// Per-row trust labels and the per-slot adaptive inner radius computed from
/// one batch of nearest-slot distances. Pure bookkeeping; no gradients.
#[derive(Clone, Debug)]
pub struct TrustBatchInfo {
    /// Nearest slot per row.
    pub nearest: Vec<usize>,
    /// Distance to the nearest slot per row.
    pub nearest_distance: Vec<f64>,
    /// Adaptive δ1 per slot (mean assigned distance); None if unassigned.
    pub delta1: Vec<Option<f64>>,
    /// Region label per row: +1 pull, −1 push, 0 ignore.
    pub labels: Vec<i8>,
}

pub(crate) fn trust_label(distance: f64, delta1: f64, delta2: f64) -> i8 {
    if distance <= delta1 {
        1
    } else if distance <= delta2 {
        -1
    } else {
        0
    }
}

/// Mean over rows of r(z, M⁽¹⁾) · ‖z − M⁽¹⁾‖₂ with the adaptive per-slot δ1.
/// Labels and δ1 are computed from detached values; gradients flow only
/// through the nearest distance of each row.
pub fn trust_from_distances(
    tape: &mut Tape,
    d: Var,
    delta2: f64,
) -> Result<(Var, TrustBatchInfo), SubstrateError> {
    let t = tape.value(d);
    let (rows, cols) = match *t.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "trust_from_distances",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if rows == 0 {
        return Err(SubstrateError::InvalidArgument {
            op: "trust_from_distances",
            msg: "empty batch".into(),
        });
    }
    let mut nearest = vec![0usize; rows];
    let mut nearest_distance = vec![0.0; rows];
    let mut sums = vec![0.0; cols];
    let mut counts = vec![0usize; cols];
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        let mut i1 = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v < row[i1] {
                i1 = i;
            }
        }
        nearest[r] = i1;
        nearest_distance[r] = row[i1];
        sums[i1] += row[i1];
        counts[i1] += 1;
    }
    let delta1: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    let mut labels = vec![0i8; rows];
    let mut total = 0.0;
    for r in 0..rows {
        let d1 = delta1[nearest[r]].expect("assigned slot has a mean distance");
        let label = trust_label(nearest_distance[r], d1, delta2);
        labels[r] = label;
        total += label as f64 * nearest_distance[r];
    }
    let info = TrustBatchInfo {
        nearest: nearest.clone(),
        nearest_distance,
        delta1,
        labels: labels.clone(),
    };
    let value = Tensor::scalar(total / rows as f64);
    let var = tape.push(
        value,
        &[d],
        Box::new(move |g, parents| {
            let scale = g.data()[0] / rows as f64;
            let mut gd = vec![0.0; parents[0].len()];
            for r in 0..rows {
                if labels[r] != 0 {
                    gd[r * cols + nearest[r]] += scale * labels[r] as f64;
                }
            }
            vec![Tensor::new(parents[0].shape(), gd).expect("grad shape")]
        }),
    );
    Ok((var, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_nearest_breaks_ties_low() {
        assert_eq!(two_nearest(&[1.0, 1.0, 2.0]), (0, 1));
        assert_eq!(two_nearest(&[3.0, 1.0, 1.0]), (1, 2));
        assert_eq!(two_nearest(&[2.0, 1.0]), (1, 0));
    }

    #[test]
    fn margin_forced_arithmetic() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::new(&[1, 2], vec![2.0, 2.4]).unwrap());
        let m = margin_from_distances(&mut tape, d).unwrap();
        assert!((tape.value(m).as_scalar().unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn margin_is_one_for_equal_distances_and_zero_when_separated() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::new(&[1, 2], vec![1.5, 1.5]).unwrap());
        let m = margin_from_distances(&mut tape, d).unwrap();
        assert_eq!(tape.value(m).as_scalar().unwrap(), 1.0);

        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.5]).unwrap());
        let m = margin_from_distances(&mut tape, d).unwrap();
        assert_eq!(tape.value(m).as_scalar().unwrap(), 0.0);
    }

    #[test]
    fn margin_requires_two_slots() {
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        assert!(margin_from_distances(&mut tape, d).is_err());
    }

    #[test]
    fn trust_hand_example_from_region_rules() {
        // Two rows, single dominant slot at distances 1 and 3, delta2=20:
        // delta1 = 2, labels (+1, -1), loss = (1*1 + (-1)*3)/2 = -1.
        let mut tape = Tape::new();
        let d = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 100.0, 3.0, 100.0]).unwrap());
        let (loss, info) = trust_from_distances(&mut tape, d, 20.0).unwrap();
        assert!((tape.value(loss).as_scalar().unwrap() - (-1.0)).abs() < 1e-12);
        assert_eq!(info.labels, vec![1, -1]);
        assert_eq!(info.delta1[0], Some(2.0));
        assert_eq!(info.delta1[1], None);
    }

    #[test]
    fn features_beyond_delta2_contribute_zero() {
        let mut tape = Tape::new();
        // Single feature at distance 25 > delta2=20: delta1 = 25, label by
        // the first branch would be +1 (25 <= 25) — check the exact rule:
        // distance <= delta1 wins, so this is labeled +1, not ignored.
        // Use two features so delta1 = 15 < 25 and the far one is ignored.
        let d = tape.leaf(Tensor::new(&[2, 1], vec![5.0, 25.0]).unwrap());
        let (loss, info) = trust_from_distances(&mut tape, d, 20.0).unwrap();
        assert_eq!(info.labels, vec![1, 0]);
        assert!((tape.value(loss).as_scalar().unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn trust_label_boundaries_are_inclusive() {
        assert_eq!(trust_label(1.0, 1.0, 2.0), 1);
        assert_eq!(trust_label(2.0, 1.0, 2.0), -1);
        assert_eq!(trust_label(2.0 + 1e-9, 1.0, 2.0), 0);
    }
}
