//! Elementwise tape operations and activations.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), SubstrateError> {
    if a.shape() != b.shape() {
        return Err(SubstrateError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn unary(
    tape: &mut Tape,
    x: Var,
    forward: impl Fn(f64) -> f64,
    dydx: impl Fn(f64) -> f64 + 'static,
) -> Var {
    let y = tape.value(x).map(&forward);
    tape.push(
        y,
        &[x],
        Box::new(move |g, parents| {
            let x = parents[0];
            let gx = Tensor::from_fn(x.shape(), |i| g.data()[i] * dydx(x.data()[i]));
            vec![gx]
        }),
    )
}

fn binary(
    tape: &mut Tape,
    op: &'static str,
    a: Var,
    b: Var,
    forward: impl Fn(f64, f64) -> f64,
    dfda: impl Fn(f64, f64) -> f64 + 'static,
    dfdb: impl Fn(f64, f64) -> f64 + 'static,
) -> Result<Var, SubstrateError> {
    let (va, vb) = (tape.value(a), tape.value(b));
    same_shape(op, va, vb)?;
    let y = va.zip(vb, &forward)?;
    Ok(tape.push(
        y,
        &[a, b],
        Box::new(move |g, parents| {
            let (a, b) = (parents[0], parents[1]);
            let ga = Tensor::from_fn(a.shape(), |i| {
                g.data()[i] * dfda(a.data()[i], b.data()[i])
            });
            let gb = Tensor::from_fn(b.shape(), |i| {
                g.data()[i] * dfdb(a.data()[i], b.data()[i])
            });
            vec![ga, gb]
        }),
    ))
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var, SubstrateError> {
    binary(tape, "add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var, SubstrateError> {
    binary(tape, "sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var, SubstrateError> {
    binary(tape, "mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
}

pub fn div(tape: &mut Tape, a: Var, b: Var) -> Result<Var, SubstrateError> {
    binary(
        tape,
        "div",
        a,
        b,
        |x, y| x / y,
        |_, y| 1.0 / y,
        |x, y| -x / (y * y),
    )
}

pub fn scale(tape: &mut Tape, x: Var, c: f64) -> Var {
    unary(tape, x, |v| v * c, move |_| c)
}

pub fn neg(tape: &mut Tape, x: Var) -> Var {
    scale(tape, x, -1.0)
}

pub fn add_scalar(tape: &mut Tape, x: Var, c: f64) -> Var {
    unary(tape, x, |v| v + c, |_| 1.0)
}

pub fn square(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, |v| v * v, |v| 2.0 * v)
}

/// |x| with subgradient 0 at the origin.
pub fn abs(tape: &mut Tape, x: Var) -> Var {
    unary(
        tape,
        x,
        f64::abs,
        |v| if v == 0.0 { 0.0 } else { v.signum() },
    )
}

/// max(0, x) with subgradient 0 at the kink.
pub fn relu(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// LeakyReLU with negative slope `alpha`; subgradient 0 at the kink.
pub fn leaky_relu(tape: &mut Tape, x: Var, alpha: f64) -> Var {
    unary(
        tape,
        x,
        move |v| if v >= 0.0 { v } else { alpha * v },
        move |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                alpha
            } else {
                0.0
            }
        },
    )
}

pub fn tanh(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, f64::tanh, |v| {
        let t = v.tanh();
        1.0 - t * t
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: Vec<f64>) -> Var {
        let n = data.len();
        tape.leaf(Tensor::new(&[n], data).unwrap())
    }

    #[test]
    fn binary_ops_reject_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(add(&mut tape, a, b).is_err());
    }

    #[test]
    fn abs_subgradient_is_zero_at_origin() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![-2.0, 0.0, 3.0]);
        let y = abs(&mut tape, x);
        let s = crate::substrate::ops::sum(&mut tape, y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_forward_and_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![-1.0, 0.0, 2.0]);
        let y = leaky_relu(&mut tape, x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.2, 0.0, 2.0]);
        let s = crate::substrate::ops::sum(&mut tape, y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.2, 0.0, 1.0]);
    }
}
