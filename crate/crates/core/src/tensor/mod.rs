//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle to an immutable, row-major buffer. When an
//! operation consumes at least one tensor that requires a gradient (and
//! recording is enabled on the current thread), the result keeps its inputs
//! and a backward rule. Node ids are issued from a global counter, so the
//! recorded graph is ordered: every input has a smaller id than the operation
//! that consumed it, and [`Tensor::backward`] replays rules in strictly
//! decreasing id order.

pub mod alloc;
mod conv;
mod gradcheck;
mod matmul;
mod ops;

use std::cell::Cell;
use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

pub use alloc::Storage;
pub use conv::{receptive_span, Padding};
pub use ops::softplus;
pub use gradcheck::{grad_check, grad_check_params};
pub(crate) use matmul::gemm;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Backward rule: maps the output gradient to one optional gradient per input.
pub type BackwardRule = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// What a backward rule sees when it runs.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this operation's output.
    pub grad: &'a [f64],
    /// The operation's forward output.
    pub output: &'a [f64],
    /// The operation's inputs, in the order they were recorded.
    pub inputs: &'a [Tensor],
}

impl BackwardCtx<'_> {
    /// Whether input `i` needs a gradient at all.
    pub fn wants(&self, i: usize) -> bool {
        self.inputs[i].requires_grad()
    }
}

struct GradFn {
    name: &'static str,
    inputs: Vec<Tensor>,
    rule: BackwardRule,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Storage>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        RECORDING.with(|r| r.set(self.prev));
    }
}

/// Stop recording operations on this thread until the returned guard is dropped.
pub fn no_grad() -> NoGradGuard {
    let prev = RECORDING.with(|r| r.replace(false));
    NoGradGuard { prev }
}

pub fn is_recording() -> bool {
    RECORDING.with(Cell::get)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::dim(format!("shape {shape:?} has a zero-sized dimension")));
    }
    if numel(shape) != len {
        return Err(Error::dim(format!(
            "shape {shape:?} holds {} values but {len} were given",
            numel(shape)
        )));
    }
    Ok(())
}

impl Tensor {
    fn from_node(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn>,
    ) -> Tensor {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(Storage::new(data)),
            grad: Mutex::new(None),
            requires_grad,
            grad_fn,
        }))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::from_node(data, shape.to_vec(), false, None))
    }

    /// A leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Self::from_node(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_node(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(alloc::zeroed(numel(shape)), shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor> {
        Tensor::new(vec![v; numel(shape)], shape)
    }

    /// Record the result of a custom operation.
    ///
    /// The node only keeps `inputs` and `rule` when recording is enabled and
    /// some input requires a gradient; otherwise the result is a plain constant
    /// and the inputs can be freed as soon as the caller drops them.
    pub fn from_op<F>(
        name: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        rule: F,
    ) -> Tensor
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    {
        debug_assert_eq!(numel(&shape), data.len(), "{name}: output size");
        let track = is_recording() && inputs.iter().any(Tensor::requires_grad);
        if track {
            let grad_fn = GradFn {
                name,
                inputs,
                rule: Box::new(rule),
            };
            Self::from_node(data, shape, true, Some(grad_fn))
        } else {
            Self::from_node(data, shape, false, None)
        }
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

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    /// Size of dimension `axis`; negative values count from the end.
    pub fn dim(&self, axis: isize) -> Result<usize> {
        let a = self.axis(axis)?;
        Ok(self.0.shape[a])
    }

    pub(crate) fn axis(&self, axis: isize) -> Result<usize> {
        let r = self.rank() as isize;
        let a = if axis < 0 { r + axis } else { axis };
        if a < 0 || a >= r {
            return Err(Error::dim(format!(
                "axis {axis} is invalid for shape {:?}",
                self.shape()
            )));
        }
        Ok(a as usize)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Storage> {
        self.0.data.read()
    }

    /// Mutable access to a leaf's values (optimizer updates, finite differences).
    pub fn data_mut(&self) -> Result<RwLockWriteGuard<'_, Storage>> {
        if self.0.grad_fn.is_some() {
            return Err(Error::Usage(
                "only leaf tensors may be modified in place".into(),
            ));
        }
        Ok(self.0.data.write())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "item() needs one element, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Overwrite the stored gradient.
    pub fn set_grad(&self, g: Vec<f64>) {
        assert_eq!(g.len(), self.numel(), "gradient length");
        *self.0.grad.lock() = Some(g);
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// A constant copy of this tensor cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_node(self.to_vec(), self.shape().to_vec(), false, None)
    }

    /// Fail with a numeric error if any value is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        let data = self.data();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(())
    }

    /// Back-propagate from a scalar loss into every reachable leaf.
    ///
    /// Leaf gradients are accumulated (`+=`); call [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "loss is not connected to any tensor that requires grad".into(),
            ));
        }
        if self.is_leaf() {
            self.accumulate_grad(&[1.0]);
            return Ok(());
        }

        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(gf) = &t.0.grad_fn {
                for input in &gf.inputs {
                    if input.requires_grad() && !input.is_leaf() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
                nodes.push(t);
            }
        }
        nodes.sort_unstable_by_key(|t| Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in nodes {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            let gf = node.0.grad_fn.as_ref().expect("interior node");
            let grads = {
                let out = node.data();
                (gf.rule)(&BackwardCtx {
                    grad: &g,
                    output: &out,
                    inputs: &gf.inputs,
                })
            };
            debug_assert_eq!(grads.len(), gf.inputs.len(), "{}", gf.name);
            for (input, gi) in gf.inputs.iter().zip(grads) {
                let Some(gi) = gi else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(gi.len(), input.numel(), "{} gradient size", gf.name);
                if input.is_leaf() {
                    input.accumulate_grad(&gi);
                } else {
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(input.id(), gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("head", &head)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
        assert_eq!(Tensor::new(vec![1.0; 6], &[2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn quadratic_gradient() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zero_grad() {
        let w = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = w.scale(2.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn detached_tensor_gets_no_gradient() {
        let w = Tensor::param(vec![1.0, -1.0], &[2]).unwrap();
        let d = w.detach();
        let loss = w.add(&d).unwrap().mul(&d).unwrap().sum();
        loss.backward().unwrap();
        assert!(!d.requires_grad());
        assert!(d.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![1.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = w.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn no_grad_records_nothing() {
        let w = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = {
            let _g = no_grad();
            w.scale(3.0)
        };
        assert!(!y.requires_grad());
        assert!(is_recording());
    }

    #[test]
    fn inputs_precede_outputs_on_the_tape() {
        let a = Tensor::param(vec![1.0; 4], &[2, 2]).unwrap();
        let b = a.sigmoid();
        let c = b.mul(&a).unwrap();
        assert!(a.id() < b.id() && b.id() < c.id());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let a = x.scale(3.0);
        let b = x.mul(&x).unwrap();
        let loss = a.add(&b).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0 + 4.0]);
    }
}
