//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation performed through it. Calling
//! [`Tape::backward`] on a scalar loss replays the recorded nodes in reverse,
//! accumulating gradients into every tensor that requires them. Gradients
//! accumulate across repeated backward calls; the caller zeroes parameter
//! gradients explicitly between optimization steps.
//!
//! Tensors are immutable once written by a forward op. Parameters are plain
//! leaf tensors created with [`Tensor::param`] and updated in place between
//! steps via [`Tensor::update_data`].

mod ops;

pub mod gradcheck;

pub use ops::BatchNormOut;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
}

/// Shared handle to an n-dimensional f64 array. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.inner.shape, self.inner.requires_grad
        )
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<usize> {
    let n: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
    }
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} implies {n} elements, data has {len}"
        )));
    }
    Ok(n)
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false))
    }

    /// Leaf tensor that accumulates gradients (a model parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(vec![1], vec![v], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the underlying data.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        debug_assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Mutate the stored values in place (optimizer steps, EMA updates).
    /// Must not be called while a tape referencing this tensor is still live.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Points two tensors at the same allocation?
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

struct Node {
    backward: Box<dyn Fn()>,
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Tracked op outputs; their gradients are scratch space owned by the tape.
    outputs: RefCell<Vec<Tensor>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape that records gradients.
    pub fn new() -> Tape {
        Tape { nodes: RefCell::new(Vec::new()), outputs: RefCell::new(Vec::new()), recording: true }
    }

    /// Tape that evaluates forward passes only; nothing is recorded.
    pub fn no_grad() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            outputs: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Whether the output of an op on these inputs must be tracked.
    fn track(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    fn record(&self, out: &Tensor, f: impl Fn() + 'static) {
        self.outputs.borrow_mut().push(out.clone());
        self.nodes.borrow_mut().push(Node { backward: Box::new(f) });
    }

    /// Run reverse-mode accumulation from a scalar loss.
    ///
    /// Each call contributes exactly one unit of seed gradient: intermediate
    /// (tape-owned) gradients are reset first, while leaf gradients add onto
    /// whatever is already stored, so repeated calls accumulate on parameters.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        for out in self.outputs.borrow().iter() {
            out.zero_grad();
        }
        loss.accumulate_grad(&[1.0]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            (node.backward)();
        }
        Ok(())
    }
}

/// Gradient of `out` if backward reached it, else `None` (nothing to do).
fn out_grad(out: &Tensor) -> Option<Vec<f64>> {
    out.inner.grad.borrow().clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn backward_non_scalar_is_usage_error() {
        let t = Tape::new();
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.relu(&x);
        match t.backward(&y) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn loss_sum_gives_ones() {
        let t = Tape::new();
        let x = Tensor::param(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let s = t.sum(&x);
        t.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn constant_graph_backward_is_noop() {
        let t = Tape::new();
        let x = Tensor::new(&[4], vec![1.0; 4]).unwrap();
        let s = t.sum(&x);
        t.backward(&s).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(t.node_count(), 0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let t = Tape::new();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let s = t.sum(&x);
        t.backward(&s).unwrap();
        t.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let t = Tape::no_grad();
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = t.mul(&x, &x).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 4.0]);
        assert_eq!(t.node_count(), 0);
    }
}
