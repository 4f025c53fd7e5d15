//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every operation on tensors that require gradients appends a node to a
//! recorded graph: the node keeps its parents and a closure mapping the
//! output gradient to parent gradients. [`Tensor::backward`] replays the
//! recording in reverse topological order and deposits gradients on leaf
//! tensors (the ones backing [`crate::param::Parameter`]s).
//!
//! Recording can be switched off for a scope with [`no_grad`]; inference
//! paths (sampling, benchmarks) run that way and never allocate closures.

mod ops;
mod shape;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use ops::{sigmoid, softplus};
pub(crate) use shape::numel;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Gradient of one op: maps the output gradient to one optional gradient
/// per parent (None when that parent does not need one).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

/// Reference-counted, immutable n-d array. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

/// Restores the previous recording mode on drop.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Disables graph recording on this thread until the guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl Tensor {
    fn new_node(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
            grad: Mutex::new(None),
        }))
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("from_vec", &[data.len()], shape));
        }
        Ok(Self::new_node(data, shape.to_vec(), false, None))
    }

    pub fn scalar(value: f64) -> Self {
        Self::new_node(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new_node(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.sample(StandardNormal)).collect();
        Self::new_node(data, shape.to_vec(), false, None)
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::new_node(data, shape.to_vec(), false, None)
    }

    /// A fresh leaf that accumulates gradient on backward.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape("leaf", &[data.len()], shape));
        }
        Ok(Self::new_node(data, shape.to_vec(), true, None))
    }

    /// Builds the output of a differentiable op. The backward closure is only
    /// retained when recording is on and some parent requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        check_finite(op, &parents, &data);
        if Self::should_record(&parents.iter().collect::<Vec<_>>()) {
            let grad_fn = GradFn {
                op,
                parents,
                backward,
            };
            Self::new_node(data, shape, true, Some(grad_fn))
        } else {
            Self::new_node(data, shape, false, None)
        }
    }

    /// Output of an op with no gradient path.
    pub(crate) fn constant_from(op: &'static str, input: &Tensor, data: Vec<f64>, shape: Vec<usize>) -> Self {
        check_finite(op, std::slice::from_ref(input), &data);
        Self::new_node(data, shape, false, None)
    }

    /// True when an op over `inputs` would be recorded. Ops use this to skip
    /// saving buffers that only backward needs.
    pub(crate) fn should_record(inputs: &[&Tensor]) -> bool {
        grad_enabled() && inputs.iter().any(|t| t.0.requires_grad)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on a tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::new_node(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Populates gradients on every reachable leaf. `self` must be a scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(grad_fn) => {
                    let parent_grads = (grad_fn.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), grad_fn.parents.len());
                    for (parent, pg) in grad_fn.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "{}", grad_fn.op);
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.lock().expect("grad lock poisoned");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through recorded ops, parents first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(grad_fn) = &node.0.grad_fn {
                for p in &grad_fn.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn check_finite(op: &'static str, parents: &[Tensor], data: &[f64]) {
    if cfg!(debug_assertions)
        && !data.iter().all(|v| v.is_finite())
        && parents.iter().all(|p| p.data().iter().all(|v| v.is_finite()))
    {
        panic!("{op} produced a non-finite value from finite inputs");
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  → dy/dx = 2x + 1
        let x = Tensor::leaf(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::leaf(vec![1.0], &[1]).unwrap();
        let y = {
            let _g = no_grad();
            x.exp()
        };
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn unreachable_leaf_gets_no_grad() {
        let x = Tensor::leaf(vec![1.0], &[1]).unwrap();
        let w = Tensor::leaf(vec![2.0], &[1]).unwrap();
        let y = x.square().sum_all();
        y.backward().unwrap();
        assert!(w.grad().is_none());
    }
}
