//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus an optional reference to
//! a node on a [`Tape`]. Constants carry no tape reference; only values whose
//! gradient is needed (leaves created through [`Tape::leaf`] and anything
//! computed from them) are recorded. [`backward`] walks the tape in reverse
//! and accumulates gradients; repeated calls without [`Tape::zero_grads`]
//! accumulate.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Backward rule: (upstream gradient, gradient store indexed by node id).
pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut [Option<Vec<f64>>])>;

struct Node {
    len: usize,
    back: Option<BackFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    // persisted gradients, accumulated across backward calls
    grads: Vec<Option<Vec<f64>>>,
}

/// Recording tape for one logical thread of execution.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn same(a: &Tape, b: &Tape) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    /// Registers a leaf whose gradient will be populated by `backward`.
    pub fn leaf(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, values)?;
        let id = self.record(t.len(), None);
        t.node = Some(NodeRef { tape: self.clone(), id });
        Ok(t)
    }

    /// Re-registers an existing tensor's values as a leaf on this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.record(t.len(), None);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(NodeRef { tape: self.clone(), id }),
        }
    }

    pub(crate) fn record(&self, len: usize, back: Option<BackFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { len, back });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn grad_of(&self, id: usize) -> Option<Vec<f64>> {
        self.inner.borrow().grads[id].clone()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// Dense row-major f64 tensor.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Validating constructor: shape must be all-positive and match the value
    /// count, and every value must be finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {n} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {v} at construction")));
        }
        Ok(Tensor { shape, data: Rc::new(values), node: None })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, data: Rc::new(values), node: None }
    }

    /// Zero-copy reinterpretation of an existing buffer under a new shape.
    pub(crate) fn view(shape: Vec<usize>, data: Rc<Vec<f64>>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_raw(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.data.clone()
    }

    /// Extracts the single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Gradient accumulated by the most recent backward pass(es).
    pub fn grad(&self) -> Option<Tensor> {
        let node = self.node.as_ref()?;
        let g = node.tape.grad_of(node.id)?;
        Some(Tensor::from_raw(self.shape.clone(), g))
    }

    /// Detached copy: same values, no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }
}

/// The tape (if any) shared by a set of op inputs.
pub(crate) fn merged_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match found {
                None => found = Some(&n.tape),
                Some(f) => {
                    if !Tape::same(f, &n.tape) {
                        return Err(Error::Contract(
                            "op inputs recorded on different tapes".into(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found.cloned())
}

/// Get-or-init the gradient accumulation buffer for a node.
pub(crate) fn acc_grad(store: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    store[id].get_or_insert_with(|| vec![0.0; len])
}

/// Reverse pass from a scalar loss. Populates gradients for every node that
/// contributed to it, including leaves.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.len() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let node = loss.node.as_ref().ok_or_else(|| {
        Error::Contract("backward on a tensor that is not on any tape".into())
    })?;
    let tape = node.tape.clone();
    let loss_id = node.id;
    let inner = tape.inner.borrow();
    let n = inner.nodes.len();
    let mut local: Vec<Option<Vec<f64>>> = vec![None; n];
    local[loss_id] = Some(vec![1.0]);
    for id in (0..=loss_id).rev() {
        let Some(g) = local[id].take() else { continue };
        debug_assert_eq!(g.len(), inner.nodes[id].len, "gradient length mismatch at node {id}");
        if let Some(back) = &inner.nodes[id].back {
            back(&g, &mut local);
        }
        local[id] = Some(g);
    }
    drop(inner);
    let mut inner = tape.inner.borrow_mut();
    for (id, g) in local.into_iter().enumerate() {
        if let Some(g) = g {
            match &mut inner.grads[id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }
    Ok(())
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("on_tape", &self.node.is_some())
            .finish()
    }
}
