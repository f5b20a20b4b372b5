//! Dense row-major f64 tensors with a minimal reverse-mode autodiff tape.
//!
//! Tensors are cheap handles (`Rc`) over shared storage. Operations go
//! through a [`Tape`]; when recording is enabled and any operand is
//! tracked, the op pushes a node holding the backward rule. A tape is
//! single-use: [`Tape::backward`] may run once, and gradients accumulate
//! into each tracked tensor's `grad` buffer until explicitly zeroed.

mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::error::{CoreError, Result};

pub use ops::AttnMask;

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        })
    }

    /// Leaf parameter: tracked by the tape and updated by optimizers.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![], vec![v]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value; panics if the tensor is not single-element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Row-major element access for 2-D tensors.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.inner.shape[self.inner.shape.len() - 1];
        self.inner.data.borrow()[row * cols + col]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.requires_grad.set(yes);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Deep copy with fresh storage; gradients are not copied.
    pub fn detach_copy(&self) -> Tensor {
        let t = Tensor::from_vec(self.inner.shape.clone(), self.to_vec()).expect("copy");
        t.inner.requires_grad.set(self.inner.requires_grad.get());
        t
    }

    /// In-place data update, used by optimizers. Not recorded on any tape.
    pub fn apply_update(&self, f: impl FnMut(&mut f64)) {
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    /// Overwrite the stored values (checkpoint loading, parameter copies).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Identity of the underlying storage, for frozen-parameter checks.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn grad_ref(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<Tensor>,
    output: Tensor,
    back: BackwardFn,
}

/// Recorded computation, replayed in reverse by [`Tape::backward`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl Tape {
    /// Recording tape for training.
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// Non-recording tape: ops compute values only. Used for inference
    /// and finite-difference probes.
    pub fn inference() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn record(&self, inputs: Vec<Tensor>, output: &Tensor, back: BackwardFn) {
        if self.recording && inputs.iter().any(|t| t.requires_grad()) {
            output.set_requires_grad(true);
            self.nodes.borrow_mut().push(Node {
                inputs,
                output: output.clone(),
                back,
            });
        }
    }

    /// Reverse sweep from a scalar loss. Every tracked tensor that
    /// contributed receives `d loss / d tensor` accumulated into its
    /// grad buffer. The tape is consumed; a second call is an error.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(CoreError::Config(
                "backward called twice on the same tape".into(),
            ));
        }
        if !loss.is_scalar() {
            return Err(CoreError::ShapeMismatch(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(CoreError::Config(
                "loss is not tracked by this tape (no recorded ops lead to it)".into(),
            ));
        }
        self.consumed.set(true);
        loss.accumulate_grad(&[1.0]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let out_grad = match node.output.grad_ref() {
                Some(g) => g,
                None => continue,
            };
            let needs: Vec<bool> = node.inputs.iter().map(|t| t.requires_grad()).collect();
            let grads = (node.back)(&out_grad, &needs);
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (input, grad) in node.inputs.iter().zip(grads) {
                if let (true, Some(g)) = (input.requires_grad(), grad) {
                    input.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Max relative error between analytic and central finite-difference
/// gradients of a scalar-valued tensor function at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let probe = Tensor::param(x.shape().to_vec(), x.to_vec())?;
    let tape = Tape::new();
    let loss = f(&tape, &probe)?;
    tape.backward(&loss)?;
    let analytic = probe
        .grad()
        .ok_or_else(|| CoreError::Config("grad_check: no gradient reached the input".into()))?;

    let base = x.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let eval = |v: f64| -> Result<f64> {
            let mut d = base.clone();
            d[i] = v;
            let t = Tensor::from_vec(x.shape().to_vec(), d)?;
            let tape = Tape::inference();
            Ok(f(&tape, &t)?.item())
        };
        let numeric = (eval(base[i] + h)? - eval(base[i] - h)?) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
