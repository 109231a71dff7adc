//! Bilinear resampling and normalized box filtering.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

/// Source coordinate and lerp weights for one output index under the
/// align-corners=false convention.
fn lerp_coords(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let clamped = src.clamp(0.0, (in_len - 1) as f64);
            let lo = clamped.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, clamped - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_resize_plane(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dst: &mut [f64],
) {
    let ys = lerp_coords(out_h, h);
    let xs = lerp_coords(out_w, w);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            dst[oy * out_w + ox] = top + (bot - top) * fy;
        }
    }
}

/// Pure bilinear resize of a (C,H,W) tensor; exact identity at equal sizes.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, SubstrateError> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "bilinear_resize",
                left: x.shape().to_vec(),
                right: vec![0, 0, 0],
            })
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(SubstrateError::InvalidArgument {
            op: "bilinear_resize",
            msg: "output size must be positive".into(),
        });
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        bilinear_resize_plane(
            &x.data()[ch * h * w..(ch + 1) * h * w],
            h,
            w,
            out_h,
            out_w,
            &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w],
        );
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Differentiable bilinear upsample of a (C,H,W) tensor.
pub fn bilinear_upsample(
    tape: &mut Tape,
    x: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var, SubstrateError> {
    let value = bilinear_resize(tape.value(x), out_h, out_w)?;
    let (c, h, w) = match *tape.value(x).shape() {
        [c, h, w] => (c, h, w),
        _ => unreachable!("validated by bilinear_resize"),
    };
    Ok(tape.push(
        value,
        &[x],
        Box::new(move |g, parents| {
            // Transpose of the interpolation: scatter each output gradient
            // onto its four source corners with the same weights.
            let mut gx = vec![0.0; parents[0].len()];
            let ys = lerp_coords(out_h, h);
            let xs = lerp_coords(out_w, w);
            for ch in 0..c {
                let src_base = ch * h * w;
                let dst_base = ch * out_h * out_w;
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let gv = g.data()[dst_base + oy * out_w + ox];
                        gx[src_base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        gx[src_base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                        gx[src_base + y1 * w + x0] += gv * fy * (1.0 - fx);
                        gx[src_base + y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Tensor::new(parents[0].shape(), gx).expect("grad shape")]
        }),
    ))
}

fn window_counts(len: usize, r: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(len - 1);
            (hi - lo + 1) as f64
        })
        .collect()
}

/// Clamped-window sum along rows then columns of one (h, w) plane.
fn box_sum_plane(src: &[f64], h: usize, w: usize, r: usize, tmp: &mut [f64], dst: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let lo = j.saturating_sub(r);
            let hi = (j + r).min(w - 1);
            tmp[i * w + j] = src[i * w + lo..=i * w + hi].iter().sum();
        }
    }
    for j in 0..w {
        for i in 0..h {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(h - 1);
            let mut s = 0.0;
            for row in lo..=hi {
                s += tmp[row * w + j];
            }
            dst[i * w + j] = s;
        }
    }
}

/// Local mean over an odd `window`, window clamped at the borders and the
/// divisor reduced to the actual overlap, applied per (n, c) plane.
pub fn box_mean(tape: &mut Tape, x: Var, window: usize) -> Result<Var, SubstrateError> {
    let t = tape.value(x);
    let (n, c, h, w) = match *t.shape() {
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(SubstrateError::ShapeMismatch {
                op: "box_mean",
                left: t.shape().to_vec(),
                right: vec![0, 0, 0, 0],
            })
        }
    };
    if window % 2 == 0 || window == 0 {
        return Err(SubstrateError::InvalidArgument {
            op: "box_mean",
            msg: format!("window {window} must be odd"),
        });
    }
    if h < window || w < window {
        return Err(SubstrateError::InvalidArgument {
            op: "box_mean",
            msg: format!("image {h}x{w} smaller than window {window}"),
        });
    }
    let r = window / 2;
    let ch_counts = window_counts(h, r);
    let cw_counts = window_counts(w, r);
    let plane = h * w;
    let mut out = vec![0.0; t.len()];
    let mut tmp = vec![0.0; plane];
    for p in 0..n * c {
        box_sum_plane(&t.data()[p * plane..(p + 1) * plane], h, w, r, &mut tmp, &mut out[p * plane..(p + 1) * plane]);
        for i in 0..h {
            for j in 0..w {
                out[p * plane + i * w + j] /= ch_counts[i] * cw_counts[j];
            }
        }
    }
    let value = Tensor::new(t.shape(), out)?;
    Ok(tape.push(
        value,
        &[x],
        Box::new(move |g, parents| {
            // Adjoint of a clamped-window mean: divide by the local count,
            // then clamped-window sum (window membership is symmetric).
            let mut scaled = vec![0.0; g.len()];
            for p in 0..n * c {
                for i in 0..h {
                    for j in 0..w {
                        let idx = p * plane + i * w + j;
                        scaled[idx] = g.data()[idx] / (ch_counts[i] * cw_counts[j]);
                    }
                }
            }
            let mut gx = vec![0.0; g.len()];
            let mut tmp = vec![0.0; plane];
            for p in 0..n * c {
                box_sum_plane(&scaled[p * plane..(p + 1) * plane], h, w, r, &mut tmp, &mut gx[p * plane..(p + 1) * plane]);
            }
            vec![Tensor::new(parents[0].shape(), gx).expect("grad shape")]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_exact_identity() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 0.37 - 1.0);
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn constant_map_stays_constant_at_any_size() {
        let x = Tensor::full(&[1, 3, 3], 0.7);
        for (h, w) in [(1, 1), (2, 5), (7, 7), (16, 4)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            for &v in y.data() {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsampled_values_stay_between_endpoints() {
        let x = Tensor::new(&[1, 1, 2], vec![-0.5, 0.9]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        let d = y.data();
        for &v in d {
            assert!((-0.5..=0.9).contains(&v));
        }
        for pair in d.windows(2) {
            assert!(pair[0] <= pair[1] + 1e-12);
        }
    }

    #[test]
    fn box_mean_of_constant_is_constant_even_at_borders() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 8, 8], 0.3));
        let y = box_mean(&mut tape, x, 3).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn box_mean_rejects_even_window_and_small_images() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(box_mean(&mut tape, x, 4).is_err());
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(box_mean(&mut tape, x, 11).is_err());
    }

    #[test]
    fn box_mean_interior_matches_hand_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64));
        let y = box_mean(&mut tape, x, 3).unwrap();
        // Interior (2,2): mean of the 3x3 block centered at 12.
        let expect = (6.0 + 7.0 + 8.0 + 11.0 + 12.0 + 13.0 + 16.0 + 17.0 + 18.0) / 9.0;
        assert!((tape.value(y).data()[2 * 5 + 2] - expect).abs() < 1e-12);
    }
}
