//! Reverse-mode autodiff on dense row-major tensors.
//!
//! A `Graph` records every operation eagerly into an arena; `backward` replays
//! the arena in reverse, accumulating vector-Jacobian products. Gradients of
//! intermediate nodes are transient per backward call; gradients of leaves
//! created with `requires_grad` persist and accumulate across calls until
//! `zero_grads`.
//!
//! Graphs are deliberately single-threaded (`Rc` handles); data parallelism
//! lives inside the operation kernels, which split work over disjoint output
//! regions with a fixed reduction order so parallel and sequential execution
//! are bit-identical.

mod adam;
mod kernels;
mod op;
pub mod par;

pub use adam::{adam_update, AdamState};
pub(crate) use op::Op;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

/// Scalar element type for all tensor computation.
///
/// Tests and oracles run at `f64`; training runs may use `f32`.
pub trait Real:
    num_traits::Float
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) struct Node<T: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Persistent gradient buffer; only populated for grad leaves.
    pub grad: Option<Vec<T>>,
    /// True when this node, or any ancestor, is a leaf with `requires_grad`.
    pub requires_grad: bool,
    pub param_id: Option<u32>,
    pub op: Op<T>,
}

pub(crate) struct Tape<T: Real> {
    pub nodes: Vec<Node<T>>,
}

/// Handle to a recorded computation graph. Cloning is cheap (shared arena).
pub struct Graph<T: Real> {
    inner: Rc<RefCell<Tape<T>>>,
}

impl<T: Real> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tensor in a graph. Cloning aliases the same node.
pub struct Tensor<T: Real> {
    pub(crate) graph: Graph<T>,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { graph: self.graph.clone(), id: self.id, shape: self.shape.clone() }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(Tape { nodes: Vec::new() })) }
    }

    /// Insert a leaf node. `param_id` tags the leaf for gradient harvesting.
    pub fn leaf(
        &self,
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        param_id: Option<u32>,
    ) -> Result<Tensor<T>> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "leaf data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(data, shape, Op::Leaf, requires_grad, param_id))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&self, data: Vec<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        self.leaf(data, shape, false, None)
    }

    /// Rank-0 constant.
    pub fn scalar(&self, v: T) -> Tensor<T> {
        self.push(vec![v], vec![], Op::Leaf, false, None)
    }

    /// Rank-0 leaf with gradient tracking.
    pub fn scalar_param(&self, v: T) -> Tensor<T> {
        self.push(vec![v], vec![], Op::Leaf, true, None)
    }

    pub(crate) fn push(
        &self,
        data: Vec<T>,
        shape: Vec<usize>,
        op: Op<T>,
        requires_grad: bool,
        param_id: Option<u32>,
    ) -> Tensor<T> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut tape = self.inner.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node { shape: shape.clone(), data, grad: None, requires_grad, param_id, op });
        Tensor { graph: self.clone(), id, shape }
    }

    pub(crate) fn tape(&self) -> std::cell::Ref<'_, Tape<T>> {
        self.inner.borrow()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Run reverse-mode accumulation from a scalar loss.
    ///
    /// Gradients of `requires_grad` leaves accumulate into their persistent
    /// buffers; repeated calls without `zero_grads` keep adding.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        let mut tape = self.inner.borrow_mut();
        tape.backward(loss.id)
    }

    /// Clear all persistent leaf gradients.
    pub fn zero_grads(&self) {
        let mut tape = self.inner.borrow_mut();
        for node in &mut tape.nodes {
            node.grad = None;
        }
    }

    /// Harvest accumulated gradients of param-tagged leaves, in node order.
    pub fn param_grads(&self) -> Vec<(u32, Vec<T>)> {
        let tape = self.inner.borrow();
        tape.nodes
            .iter()
            .filter_map(|n| match (n.param_id, &n.grad) {
                (Some(id), Some(g)) => Some((id, g.clone())),
                _ => None,
            })
            .collect()
    }
}

impl<T: Real> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape().nodes[self.id].requires_grad
    }

    pub fn data(&self) -> Vec<T> {
        self.graph.tape().nodes[self.id].data.clone()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn value(&self) -> T {
        let tape = self.graph.tape();
        debug_assert_eq!(tape.nodes[self.id].data.len(), 1);
        tape.nodes[self.id].data[0]
    }

    /// Accumulated gradient, present only on grad leaves after `backward`.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.tape().nodes[self.id].grad.clone()
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub(crate) fn same_graph(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.graph.inner, &other.graph.inner)
    }
}

/// Per-instance, per-channel spatial statistics of a `[B,C,H,W]` tensor:
/// mean and `sqrt(population variance + eps)`.
pub fn channel_stats<T: Real>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((x.channel_mean()?, x.channel_std(eps)?))
}

impl<T: Real> Tape<T> {
    fn backward(&mut self, loss: usize) -> Result<()> {
        if loss >= self.nodes.len() {
            return Err(Error::Contract("loss tensor is not in this graph".into()));
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        if !self.nodes[loss].requires_grad {
            return Ok(()); // nothing reachable wants gradients
        }

        // Transient per-call gradient buffers, indexed like the arena.
        let mut tgrad: Vec<Option<Vec<T>>> = Vec::with_capacity(loss + 1);
        tgrad.resize_with(loss + 1, || None);
        tgrad[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            let Some(g) = tgrad[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let len = self.nodes[id].data.len();
                let slot = self.nodes[id].grad.get_or_insert_with(|| vec![T::zero(); len]);
                for (s, gi) in slot.iter_mut().zip(&g) {
                    *s = *s + *gi;
                }
                continue;
            }
            self.vjp(id, &g, &mut tgrad);
        }
        Ok(())
    }

    /// Gradient buffer of `id` inside the transient arena, created on demand.
    pub(crate) fn acc<'a>(
        &self,
        tgrad: &'a mut [Option<Vec<T>>],
        id: usize,
    ) -> Option<&'a mut [T]> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].data.len();
        Some(tgrad[id].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, -2.0, 3.0, 0.5], vec![2, 2], true, None).unwrap();
        let loss = x.sum_all();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn quadratic_backward_is_2x() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.5, -0.5, 2.0], vec![3], true, None).unwrap();
        let zero = g.constant(vec![0.0; 3], vec![3]).unwrap();
        let loss = x.l2_squared(&zero).unwrap();
        g.backward(&loss).unwrap();
        let grad = x.grad().unwrap();
        for (gi, xi) in grad.iter().zip([1.5, -0.5, 2.0]) {
            assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![2.0], vec![1], true, None).unwrap();
        let loss = x.sum_all();
        g.backward(&loss).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
        g.zero_grads();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true, None).unwrap();
        let err = g.backward(&x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn constant_leaves_get_no_grad() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let loss = x.sum_all();
        g.backward(&loss).unwrap();
        assert!(x.grad().is_none());
    }
}

/// Probe hooks for ad-hoc performance measurements in tests.
#[doc(hidden)]
pub mod kernels_probe {
    use super::kernels::{conv2d_forward, matmul_acc, ConvDims};

    pub fn conv_forward_probe(x: &[f32], k: &[f32], b: usize) -> Vec<f32> {
        let d = ConvDims::new(&[b, 32, 28, 28], &[32, 32, 3, 3], 1, 1);
        conv2d_forward(x, k, &d)
    }

    pub fn matmul_probe_f32() -> f32 {
        let a = vec![0.5f32; 784 * 288];
        let b = vec![0.25f32; 288 * 32];
        let mut c = vec![0.0f32; 784 * 32];
        let t = std::time::Instant::now();
        let reps = 100;
        for _ in 0..reps {
            c.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(&a, &b, &mut c, 784, 288, 32);
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        eprintln!(
            "  matmul_acc alone: {:.3} ms ({:.2} GFLOP/s)",
            dt * 1e3,
            (2.0 * (784 * 288 * 32) as f64) / 1e9 / dt
        );
        c[0]
    }
}
