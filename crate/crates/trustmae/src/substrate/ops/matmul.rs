//! Matrix multiplication and affine layers on top of a blocked GEMM kernel.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

/// Row-major C(m,n) += A(m,k) * B(k,n), with optional logical transposes of
/// the stored operands. `beta` scales the existing contents of `c`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), SubstrateError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(SubstrateError::ShapeMismatch {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// C = A(m,k) · B(k,n).
pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var, SubstrateError> {
    let (m, ka) = dims2("matmul", tape.value(a))?;
    let (kb, n) = dims2("matmul", tape.value(b))?;
    if ka != kb {
        return Err(SubstrateError::ShapeMismatch {
            op: "matmul",
            left: tape.value(a).shape().to_vec(),
            right: tape.value(b).shape().to_vec(),
        });
    }
    let k = ka;
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, tape.value(a).data(), false, tape.value(b).data(), false, 0.0, &mut out);
    let value = Tensor::new(&[m, n], out)?;
    Ok(tape.push(
        value,
        &[a, b],
        Box::new(move |g, parents| {
            let (av, bv) = (parents[0], parents[1]);
            // dA = dC · Bᵀ ; dB = Aᵀ · dC
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut ga);
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut gb);
            vec![
                Tensor::new(&[m, k], ga).expect("grad shape"),
                Tensor::new(&[k, n], gb).expect("grad shape"),
            ]
        }),
    ))
}

/// y = x·W + b with x:(n,in), W:(in,out), b:(out); b broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, SubstrateError> {
    let (n, fin) = dims2("linear", tape.value(x))?;
    let (win, wout) = dims2("linear", tape.value(w))?;
    if fin != win {
        return Err(SubstrateError::ShapeMismatch {
            op: "linear",
            left: tape.value(x).shape().to_vec(),
            right: tape.value(w).shape().to_vec(),
        });
    }
    if tape.value(b).shape() != [wout] {
        return Err(SubstrateError::ShapeMismatch {
            op: "linear",
            left: tape.value(b).shape().to_vec(),
            right: vec![wout],
        });
    }
    let mut out = vec![0.0; n * wout];
    gemm(n, fin, wout, tape.value(x).data(), false, tape.value(w).data(), false, 0.0, &mut out);
    for row in 0..n {
        for col in 0..wout {
            out[row * wout + col] += tape.value(b).data()[col];
        }
    }
    let value = Tensor::new(&[n, wout], out)?;
    Ok(tape.push(
        value,
        &[x, w, b],
        Box::new(move |g, parents| {
            let (xv, wv) = (parents[0], parents[1]);
            let mut gx = vec![0.0; n * fin];
            gemm(n, wout, fin, g.data(), false, wv.data(), true, 0.0, &mut gx);
            let mut gw = vec![0.0; fin * wout];
            gemm(fin, n, wout, xv.data(), true, g.data(), false, 0.0, &mut gw);
            let mut gb = vec![0.0; wout];
            for row in 0..n {
                for col in 0..wout {
                    gb[col] += g.data()[row * wout + col];
                }
            }
            vec![
                Tensor::new(&[n, fin], gx).expect("grad shape"),
                Tensor::new(&[fin, wout], gw).expect("grad shape"),
                Tensor::new(&[wout], gb).expect("grad shape"),
            ]
        }),
    ))
}
