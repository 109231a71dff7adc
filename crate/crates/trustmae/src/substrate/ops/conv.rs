//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Layouts are NCHW for activations, (c_out, c_in, kh, kw) for conv kernels
//! and (c_in, c_out, kh, kw) for transposed-conv kernels. Both operations
//! share three kernels: `conv_fwd`, `conv_bwd_input`, `conv_bwd_kernel`;
//! a transposed convolution is the input-backward of a convolution with the
//! roles of input and output swapped.

use super::matmul::gemm;
use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, SubstrateError> {
    let padded = input + 2 * padding;
    // floor((padded - kernel) / stride) + 1, the standard convolution size
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(SubstrateError::BadConvGeometry {
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, SubstrateError> {
    let grown = (input - 1) * stride + kernel;
    if input == 0 || stride == 0 || grown < 2 * padding + 1 {
        return Err(SubstrateError::BadConvGeometry {
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok(grown - 2 * padding)
}

/// cols[(c*kh+di)*kw+dj][oi*ow+oj] = x[c][oi*s-p+di][oj*s-p+dj] (0 outside).
fn im2col(x: &[f64], g: Geometry, cols: &mut [f64]) {
    let Geometry { c_in, kh, kw, stride, padding, h, w, oh, ow, .. } = g;
    debug_assert_eq!(x.len(), c_in * h * w);
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    cols.fill(0.0);
    for c in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((c * kh + di) * kw + dj) * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + di) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = (c * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + dj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[row + oi * ow + oj] = x[src + jj as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add columns back into image coordinates.
fn col2im(cols: &[f64], g: Geometry, x: &mut [f64]) {
    let Geometry { c_in, kh, kw, stride, padding, h, w, oh, ow, .. } = g;
    debug_assert_eq!(x.len(), c_in * h * w);
    debug_assert_eq!(cols.len(), c_in * kh * kw * oh * ow);
    for c in 0..c_in {
        for di in 0..kh {
            for dj in 0..kw {
                let row = ((c * kh + di) * kw + dj) * oh * ow;
                for oi in 0..oh {
                    let ii = (oi * stride + di) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = (c * h + ii as usize) * w;
                    for oj in 0..ow {
                        let jj = (oj * stride + dj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        x[dst + jj as usize] += cols[row + oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// y(co, oh*ow) = K(co, ci*kh*kw) · im2col(x); one image.
fn conv_fwd(x: &[f64], kernel: &[f64], g: Geometry, cols: &mut [f64], y: &mut [f64]) {
    im2col(x, g, cols);
    gemm(g.c_out, g.c_in * g.kh * g.kw, g.oh * g.ow, kernel, false, cols, false, 0.0, y);
}

/// gx = col2im(Kᵀ · gy); one image.
fn conv_bwd_input(gy: &[f64], kernel: &[f64], g: Geometry, cols: &mut [f64], gx: &mut [f64]) {
    gemm(g.c_in * g.kh * g.kw, g.c_out, g.oh * g.ow, kernel, true, gy, false, 0.0, cols);
    gx.fill(0.0);
    col2im(cols, g, gx);
}

/// gK += gy · im2col(x)ᵀ; one image.
fn conv_bwd_kernel(x: &[f64], gy: &[f64], g: Geometry, cols: &mut [f64], gk: &mut [f64]) {
    im2col(x, g, cols);
    gemm(g.c_out, g.oh * g.ow, g.c_in * g.kh * g.kw, gy, false, cols, true, 1.0, gk);
}

fn conv_geometry(
    op: &'static str,
    x_shape: &[usize],
    k_shape: &[usize],
    stride: usize,
    padding: usize,
    transposed: bool,
) -> Result<(usize, Geometry), SubstrateError> {
    let mismatch = || SubstrateError::ShapeMismatch {
        op,
        left: x_shape.to_vec(),
        right: k_shape.to_vec(),
    };
    let (n, xc, h, w) = match *x_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(mismatch()),
    };
    let (k0, k1, kh, kw) = match *k_shape {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(mismatch()),
    };
    // conv kernel: (c_out, c_in, kh, kw); transposed kernel: (c_in, c_out, kh, kw)
    let (c_in, c_out) = if transposed { (k0, k1) } else { (k1, k0) };
    if xc != c_in {
        return Err(mismatch());
    }
    if transposed {
        // `Geometry` always describes the underlying convolution, whose
        // input is this op's output.
        let oh = conv_transpose_output_len(h, kh, stride, padding)?;
        let ow = conv_transpose_output_len(w, kw, stride, padding)?;
        Ok((
            n,
            Geometry { c_in: c_out, c_out: c_in, kh, kw, stride, padding, h: oh, w: ow, oh: h, ow: w },
        ))
    } else {
        let oh = conv_output_len(h, kh, stride, padding)?;
        let ow = conv_output_len(w, kw, stride, padding)?;
        Ok((n, Geometry { c_in, c_out, kh, kw, stride, padding, h, w, oh, ow }))
    }
}

/// Cross-correlation of x:(n,c_in,h,w) with kernel:(c_out,c_in,kh,kw).
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    stride: usize,
    padding: usize,
) -> Result<Var, SubstrateError> {
    let (n, g) =
        conv_geometry("conv2d", tape.value(x).shape(), tape.value(kernel).shape(), stride, padding, false)?;
    let xin = g.c_in * g.h * g.w;
    let yout = g.c_out * g.oh * g.ow;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * g.oh * g.ow];
    let mut out = vec![0.0; n * yout];
    for i in 0..n {
        conv_fwd(
            &tape.value(x).data()[i * xin..(i + 1) * xin],
            tape.value(kernel).data(),
            g,
            &mut cols,
            &mut out[i * yout..(i + 1) * yout],
        );
    }
    let value = Tensor::new(&[n, g.c_out, g.oh, g.ow], out)?;
    Ok(tape.push(
        value,
        &[x, kernel],
        Box::new(move |gy, parents| {
            let (xv, kv) = (parents[0], parents[1]);
            let mut cols = vec![0.0; g.c_in * g.kh * g.kw * g.oh * g.ow];
            let mut gx = vec![0.0; n * xin];
            let mut gk = vec![0.0; kv.len()];
            let mut gx_img = vec![0.0; xin];
            for i in 0..n {
                let gy_img = &gy.data()[i * yout..(i + 1) * yout];
                conv_bwd_input(gy_img, kv.data(), g, &mut cols, &mut gx_img);
                gx[i * xin..(i + 1) * xin].copy_from_slice(&gx_img);
                conv_bwd_kernel(&xv.data()[i * xin..(i + 1) * xin], gy_img, g, &mut cols, &mut gk);
            }
            vec![
                Tensor::new(xv.shape(), gx).expect("grad shape"),
                Tensor::new(kv.shape(), gk).expect("grad shape"),
            ]
        }),
    ))
}

/// Transposed convolution of x:(n,c_in,h,w) with kernel:(c_in,c_out,kh,kw);
/// output spatial size is (h-1)*stride - 2*padding + kh.
pub fn conv_transpose2d(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    stride: usize,
    padding: usize,
) -> Result<Var, SubstrateError> {
    let (n, g) = conv_geometry(
        "conv_transpose2d",
        tape.value(x).shape(),
        tape.value(kernel).shape(),
        stride,
        padding,
        true,
    )?;
    // For the underlying convolution: its input (c_in,h,w) is our output and
    // its output (c_out,oh,ow) is our input.
    let xin = g.c_out * g.oh * g.ow;
    let yout = g.c_in * g.h * g.w;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * g.oh * g.ow];
    let mut out = vec![0.0; n * yout];
    let mut y_img = vec![0.0; yout];
    for i in 0..n {
        conv_bwd_input(
            &tape.value(x).data()[i * xin..(i + 1) * xin],
            tape.value(kernel).data(),
            g,
            &mut cols,
            &mut y_img,
        );
        out[i * yout..(i + 1) * yout].copy_from_slice(&y_img);
    }
    let value = Tensor::new(&[n, g.c_in, g.h, g.w], out)?;
    Ok(tape.push(
        value,
        &[x, kernel],
        Box::new(move |gy, parents| {
            let (xv, kv) = (parents[0], parents[1]);
            let mut cols = vec![0.0; g.c_in * g.kh * g.kw * g.oh * g.ow];
            let mut gx = vec![0.0; n * xin];
            let mut gk = vec![0.0; kv.len()];
            for i in 0..n {
                let gy_img = &gy.data()[i * yout..(i + 1) * yout];
                conv_fwd(gy_img, kv.data(), g, &mut cols, &mut gx[i * xin..(i + 1) * xin]);
                conv_bwd_kernel(gy_img, &xv.data()[i * xin..(i + 1) * xin], g, &mut cols, &mut gk);
            }
            vec![
                Tensor::new(xv.shape(), gx).expect("grad shape"),
                Tensor::new(kv.shape(), gk).expect("grad shape"),
            ]
        }),
    ))
}

/// y[n,c,i,j] = x[n,c,i,j] + b[c].
pub fn add_channel_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var, SubstrateError> {
    let shape = tape.value(x).shape().to_vec();
    let (n, c, hw) = match shape.as_slice() {
        [n, c, h, w] => (*n, *c, h * w),
        other => {
            return Err(SubstrateError::ShapeMismatch {
                op: "add_channel_bias",
                left: other.to_vec(),
                right: vec![0, 0, 0, 0],
            })
        }
    };
    if tape.value(b).shape() != [c] {
        return Err(SubstrateError::ShapeMismatch {
            op: "add_channel_bias",
            left: tape.value(b).shape().to_vec(),
            right: vec![c],
        });
    }
    let mut out = tape.value(x).data().to_vec();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let bias = tape.value(b).data()[ch];
            for v in &mut out[base..base + hw] {
                *v += bias;
            }
        }
    }
    let value = Tensor::new(&shape, out)?;
    Ok(tape.push(
        value,
        &[x, b],
        Box::new(move |g, parents| {
            let mut gb = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    gb[ch] += g.data()[base..base + hw].iter().sum::<f64>();
                }
            }
            vec![g.clone(), Tensor::new(parents[1].shape(), gb).expect("grad shape")]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_kernel_scales_elementwise() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let k = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let y = conv2d(&mut tape, x, k, 1, 0).unwrap();
        let expected: Vec<f64> = (0..9).map(|i| 2.0 * i as f64).collect();
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn strided_conv_shape_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let y = conv2d(&mut tape, x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn empty_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(conv2d(&mut tape, x, k, 1, 0).is_err());
    }

    #[test]
    fn odd_input_with_stride_two_floors() {
        // floor((5 + 2 - 3) / 2) + 1 = 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let y = conv2d(&mut tape, x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    }

    #[test]
    fn conv_transpose_shape_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let y = conv_transpose2d(&mut tape, x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn identity_conv_transpose() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0));
        let k = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = conv_transpose2d(&mut tape, x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_matches_hand_computed_cross_correlation() {
        // 2x2 input, 2x2 kernel, valid conv -> single value = sum(x * k)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let y = conv2d(&mut tape, x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5 - 2.0 + 6.0 + 1.0]);
    }

    #[test]
    fn conv_transpose_scatters_kernel_per_input_pixel() {
        // One input pixel of value v spreads v * kernel across the output.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let k = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = conv_transpose2d(&mut tape, x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn channel_bias_broadcasts_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let b = tape.leaf(Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let y = add_channel_bias(&mut tape, x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let s = crate::substrate::ops::sum(&mut tape, y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0]);
    }
}
