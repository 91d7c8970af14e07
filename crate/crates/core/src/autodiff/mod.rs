//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value, its parent handles and a closure computing the
//! vector-Jacobian product. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order by construction.
//!
//! A graph is single-threaded; independent graphs may live on separate
//! threads.

mod nn;
mod ops;

pub use nn::Conv2dSpec;

use crate::error::{Result, TensorError};
use crate::{Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward closure.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; receives a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A detached input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a new detached node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation node. The backward closure is dropped when no
    /// parent requires a gradient.
    pub fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                needs: &needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p.0].value.shape(),
                    "gradient shape for parent of node {i}"
                );
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves (and nodes without a
/// backward closure) retain their gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let l = g.sum(x);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn sum_of_squares_gives_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.5, -1.0]));
        let y = g.add(x, x).unwrap();
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn non_scalar_and_detached_losses_are_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let c = g.constant(t(&[2], &[1., 2.]));
        let l = g.sum(c);
        assert!(matches!(g.backward(l), Err(TensorError::DetachedLoss)));
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1., 2.]);
        assert!(gr.get(d).is_none());
    }
}
