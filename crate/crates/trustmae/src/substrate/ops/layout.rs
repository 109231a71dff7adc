//! Layout permutations between NCHW activations and per-position feature rows.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

fn to_rows(data: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let hw = h * w;
    for img in 0..n {
        for ch in 0..c {
            let src = (img * c + ch) * hw;
            for pos in 0..hw {
                out[(img * hw + pos) * c + ch] = data[src + pos];
            }
        }
    }
    out
}

fn from_rows(data: &[f64], n: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let hw = h * w;
    for img in 0..n {
        for ch in 0..c {
            let dst = (img * c + ch) * hw;
            for pos in 0..hw {
                out[dst + pos] = data[(img * hw + pos) * c + ch];
            }
        }
    }
    out
}

/// (n, c, h, w) → (n·h·w, c): one row per spatial position, the channel
/// vector of that position.
pub fn nchw_to_rows(tape: &mut Tape, x: Var) -> Result<Var, SubstrateError> {
    let t = tape.value(x);
    let (n, c, h, w) = match *t.shape() {
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "nchw_to_rows",
                left: t.shape().to_vec(),
                right: vec![0, 0, 0, 0],
            })
        }
    };
    let value = Tensor::new(&[n * h * w, c], to_rows(t.data(), n, c, h, w))?;
    Ok(tape.push(
        value,
        &[x],
        Box::new(move |g, parents| {
            vec![Tensor::new(parents[0].shape(), from_rows(g.data(), n, c, h, w)).expect("grad shape")]
        }),
    ))
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw(
    tape: &mut Tape,
    x: Var,
    n: usize,
    h: usize,
    w: usize,
) -> Result<Var, SubstrateError> {
    let t = tape.value(x);
    let (rows, c) = match *t.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "rows_to_nchw",
                left: t.shape().to_vec(),
                right: vec![0, 0],
            })
        }
    };
    if rows != n * h * w {
        return Err(SubstrateError::InvalidArgument {
            op: "rows_to_nchw",
            msg: format!("{rows} rows cannot fill {n}x{h}x{w} positions"),
        });
    }
    let value = Tensor::new(&[n, c, h, w], from_rows(t.data(), n, c, h, w))?;
    Ok(tape.push(
        value,
        &[x],
        Box::new(move |g, parents| {
            vec![Tensor::new(parents[0].shape(), to_rows(g.data(), n, c, h, w)).expect("grad shape")]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let rows = nchw_to_rows(&mut tape, x).unwrap();
        assert_eq!(tape.value(rows).shape(), &[8, 3]);
        // Position (img 0, 0, 0) carries channels [0, 4, 8].
        assert_eq!(&tape.value(rows).data()[0..3], &[0.0, 4.0, 8.0]);
        let back = rows_to_nchw(&mut tape, rows, 2, 2, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }
}
