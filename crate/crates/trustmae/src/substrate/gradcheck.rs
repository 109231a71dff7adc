//! Central finite-difference verification of backward passes.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::SubstrateError;

/// Builds a scalar loss from leaf variables; must be deterministic.
pub trait ScalarFn {
    fn eval(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var, SubstrateError>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, SubstrateError>,
{
    fn eval(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var, SubstrateError> {
        self(tape, inputs)
    }
}

fn eval_scalar(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64, SubstrateError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.value(out).as_scalar()
}

/// Max over all input coordinates of
/// |analytic − central difference| / max(1, |analytic|).
pub fn grad_check(f: &impl ScalarFn, inputs: &[Tensor], eps: f64) -> Result<f64, SubstrateError> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(SubstrateError::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-7, 1e-4]"),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(SubstrateError::NotScalar {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for coord in 0..t.len() {
            let orig = t.data()[coord];
            perturbed[ti].data_mut()[coord] = orig + eps;
            let plus = eval_scalar(f, &perturbed)?;
            perturbed[ti].data_mut()[coord] = orig - eps;
            let minus = eval_scalar(f, &perturbed)?;
            perturbed[ti].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_exact() {
        let f = |tape: &mut Tape, inputs: &[Var]| {
            let sq = ops::square(tape, inputs[0]);
            ops::sum(tape, sq)
        };
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.01]).unwrap();
        let err = grad_check(&f, &[x], 1e-5).unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn rejects_out_of_range_eps_and_non_scalar() {
        let f = |tape: &mut Tape, inputs: &[Var]| {
            let sq = ops::square(tape, inputs[0]);
            ops::sum(tape, sq)
        };
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(&f, &[x.clone()], 1e-2).is_err());
        let id = |_: &mut Tape, inputs: &[Var]| Ok(inputs[0]);
        assert!(grad_check(&id, &[x], 1e-5).is_err());
    }

    #[test]
    fn conv_and_linear_backwards_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let k = Tensor::rand_uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let conv = |tape: &mut Tape, inputs: &[Var]| {
            let y = ops::conv2d(tape, inputs[0], inputs[1], 2, 1)?;
            let sq = ops::square(tape, y);
            ops::sum(tape, sq)
        };
        let err = grad_check(&conv, &[x, k], 1e-5).unwrap();
        assert!(err <= 1e-5, "conv2d rel err {err}");

        let x = Tensor::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(&[2], -1.0, 1.0, &mut rng);
        let lin = |tape: &mut Tape, inputs: &[Var]| {
            let y = ops::linear(tape, inputs[0], inputs[1], inputs[2])?;
            ops::sum(tape, y)
        };
        let err = grad_check(&lin, &[x, w, b], 1e-5).unwrap();
        assert!(err <= 1e-5, "linear rel err {err}");
    }
}
