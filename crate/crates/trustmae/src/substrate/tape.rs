//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every forward operation appends a node holding its output value, its
//! parent indices, and a one-shot backward closure. Nodes are created in
//! topological order, so the backward sweep is a single reverse pass.

use super::tensor::Tensor;
use super::SubstrateError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward closure: given the gradient w.r.t. this node's output and the
/// parent values, produce one gradient contribution per parent.
pub type BackwardFn = Box<dyn FnOnce(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert an interior node produced by an operation.
    pub fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|v| v.0).collect(),
            backward: Some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar root. Consumes the backward closures, so
    /// a tape can only be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, SubstrateError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(SubstrateError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_value.shape(), vec![1.0]).expect("scalar"));

        for i in (0..=root.0).rev() {
            // A node's gradient is final once every consumer (all created
            // later) has been processed, so it can be moved out here.
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let Some(backward) = self.nodes[i].backward.take() else {
                grads[i] = Some(grad_out); // leaf: keep for the caller
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let parent_values: Vec<&Tensor> = parents.iter().map(|&p| &self.nodes[p].value).collect();
            let contributions = backward(&grad_out, &parent_values);
            debug_assert_eq!(contributions.len(), parents.len());
            for (&p, c) in parents.iter().zip(contributions) {
                debug_assert_eq!(self.nodes[p].value.shape(), c.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c)?,
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients per tape node after a backward sweep. Interior nodes consumed
/// during the sweep report `None`; leaves report their accumulated gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::ops;

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = ops::square(&mut tape, x);
        let total = ops::sum(&mut tape, sq).unwrap();
        let grads = tape.backward(total).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x -> dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = ops::add(&mut tape, x, x).unwrap();
        let total = ops::sum(&mut tape, y).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }
}
