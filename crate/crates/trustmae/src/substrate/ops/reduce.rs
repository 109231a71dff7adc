//! Scalar reductions.

use crate::substrate::tape::{Tape, Var};
use crate::substrate::tensor::Tensor;
use crate::substrate::SubstrateError;

pub fn sum(tape: &mut Tape, x: Var) -> Result<Var, SubstrateError> {
    let total = tape.value(x).sum();
    Ok(tape.push(
        Tensor::scalar(total),
        &[x],
        Box::new(|g, parents| {
            let g = g.data()[0];
            vec![Tensor::full(parents[0].shape(), g)]
        }),
    ))
}

pub fn mean(tape: &mut Tape, x: Var) -> Result<Var, SubstrateError> {
    let v = tape.value(x);
    if v.is_empty() {
        return Err(SubstrateError::InvalidArgument {
            op: "mean",
            msg: "empty tensor".into(),
        });
    }
    let n = v.len() as f64;
    let m = v.sum() / n;
    Ok(tape.push(
        Tensor::scalar(m),
        &[x],
        Box::new(move |g, parents| {
            let g = g.data()[0] / n;
            vec![Tensor::full(parents[0].shape(), g)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_grad_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = mean(&mut tape, x).unwrap();
        assert_eq!(tape.value(m).as_scalar().unwrap(), 2.5);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }
}
