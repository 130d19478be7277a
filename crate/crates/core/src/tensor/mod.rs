//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: every operation appends a node holding its
//! forward result and a closure that scatters the output gradient back to the
//! operation's inputs. Nodes are created in topological order, so `backward`
//! is a single reverse sweep over node ids.
//!
//! Tensors are generic over the element type: training runs in `f32`, while
//! gradient checks and oracle comparisons instantiate the same code with `f64`.

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

pub mod adam;
pub mod conv;
pub mod elementwise;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod norm;

pub use adam::OptimizerState;

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + Default + Debug + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense row-major tensor recorded on the tape.
pub struct Tensor<T: Scalar> {
    pub(crate) data: Vec<T>,
    pub(crate) shape: Vec<usize>,
    pub(crate) requires_grad: bool,
    pub(crate) backward: Option<BackwardFn<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Gradient storage, parallel to the node list.
pub(crate) type GradStore<T> = [Option<Vec<T>>];

/// Backward closure: reads forward values from the node list, receives the
/// output gradient, and accumulates into the parents' gradient slots.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Tensor<T>], &[T], &mut GradStore<T>) + Send + Sync>;

/// Borrow the gradient slot for `id`, allocating zeros on first touch.
pub(crate) fn grad_slot<T: Scalar>(
    grads: &mut GradStore<T>,
    id: TensorId,
    len: usize,
) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// The autodiff tape. One tape per forward/backward pass; parameters are
/// copied in as leaves each step and their gradients read back afterwards.
pub struct Tape<T: Scalar> {
    nodes: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: Vec<(String, TensorId)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
        }
    }

    /// Insert a named parameter leaf and remember the binding so gradients
    /// can be collected by name after `backward`.
    pub fn bind_param(
        &mut self,
        name: &str,
        data: Vec<T>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId> {
        let id = self.leaf(data, shape, requires_grad)?;
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Gradients of every grad-requiring bound parameter, keyed by name.
    pub fn bound_grads(&self) -> std::collections::HashMap<String, Vec<T>> {
        let mut map = std::collections::HashMap::new();
        for (name, id) in &self.bound {
            if self.nodes[id.0].requires_grad {
                if let Some(g) = self.grads[id.0].as_ref() {
                    map.insert(name.clone(), g.clone());
                }
            }
        }
        map
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor (input or parameter).
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::invalid(
                "leaf",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, None))
    }

    /// Insert a leaf holding a single scalar.
    pub fn scalar(&mut self, value: T, requires_grad: bool) -> TensorId {
        self.push(vec![value], vec![1], requires_grad, None)
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of `id`, if populated by a previous `backward` call.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Clear all gradient slots.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates gradients of every
    /// tensor with `requires_grad` reachable from `loss`; unreached
    /// grad-requiring leaves are filled with zeros. Calling twice without
    /// `zero_grads` accumulates one unit seed per call.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", node.shape),
            ));
        }
        // Propagate into a fresh buffer, then merge, so repeated calls each
        // contribute exactly one sweep.
        let mut local: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if local[i].is_none() {
                continue;
            }
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            // Take the grad out so the closure can borrow the store mutably.
            let out_grad = local[i].take().expect("checked above");
            backward(&self.nodes, &out_grad, &mut local);
            local[i] = Some(out_grad);
        }
        for (slot, new) in self.grads.iter_mut().zip(local) {
            match (slot.as_mut(), new) {
                (Some(acc), Some(add)) => {
                    for (a, b) in acc.iter_mut().zip(add) {
                        *a += b;
                    }
                }
                (None, Some(add)) => *slot = Some(add),
                _ => {}
            }
        }
        // Zero-fill leaves that require grad but were never reached.
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            if n.requires_grad && n.backward.is_none() && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); n.data.len()]);
            }
        }
        Ok(())
    }

    pub(crate) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_bad_shape() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.leaf(vec![1.0, 2.0], &[3], true).is_err());
        assert!(tape.leaf(vec![], &[0], true).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], &[3], true).unwrap();
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_quadratic() {
        // loss = sum(x*x) at x=[1,2] -> grad [2,4]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0], &[1], true).unwrap();
        let unused = tape.leaf(vec![5.0, 6.0], &[2], true).unwrap();
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }
}
