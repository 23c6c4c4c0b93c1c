//! Dense float64 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major value. Arithmetic lives in
//! [`ops`]; when any operand is tracked on a [`Tape`], the result is
//! tracked too and the primitive's pullback is recorded. Calling
//! [`backward`] on a tracked scalar sweeps the tape once in reverse
//! topological order and consumes it.
//!
//! Tensors without tape nodes are plain values: cheap to clone (shared
//! storage) and safe to read from any thread.

pub mod gradcheck;
pub mod ops;

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub(crate) type TapeHandle = Arc<Mutex<TapeInner>>;

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) consumed: bool,
}

/// One recorded primitive application.
pub(crate) struct Node {
    /// Tape ids of the tracked inputs, in operand order.
    pub(crate) inputs: Vec<usize>,
    /// Pullback: maps the output cotangent to one cotangent per tracked input.
    pub(crate) vjp: Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send>,
    /// Element count of this node's output.
    pub(crate) size: usize,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: TapeHandle,
    pub(crate) id: usize,
}

/// Dense row-major float64 tensor.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl Tensor {
    /// A tensor from explicit shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Input(format!("tensor shape must be non-empty and positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![0.0; n]), node: None }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: Arc::new(vec![v; n]), node: None }
    }

    /// Rank-1 scalar wrapper (shape `[1]`).
    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![v]), node: None }
    }

    /// 2-D tensor from nested rows (test convenience).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Input("from_rows: no rows".into()));
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Input("from_rows: ragged rows".into()));
        }
        Self::new(vec![r, c], rows.iter().flatten().copied().collect())
    }

    /// Fills a tensor with `std`-scaled normal draws from `rng`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut crate::rng::StreamRng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.next_normal() * std).collect();
        Self { shape, data: Arc::new(data), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Drops tape tracking, keeping the value (shared storage).
    pub fn detach(&self) -> Self {
        Self { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    /// Bitwise equality of shape and every element.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Returns a copy with one element replaced (untracked; test helper).
    pub fn with_element(&self, idx: usize, v: f64) -> Self {
        let mut data = self.data.as_ref().clone();
        data[idx] = v;
        Self { shape: self.shape.clone(), data: Arc::new(data), node: None }
    }

    pub(crate) fn node_ref(&self) -> Option<&NodeRef> {
        self.node.as_ref()
    }

    pub(crate) fn tracked_on(shape: Vec<usize>, data: Vec<f64>, node: NodeRef) -> Self {
        Self { shape, data: Arc::new(data), node: Some(node) }
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }
}

/// A recording context for one forward/backward pass.
pub struct Tape {
    inner: TapeHandle,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { inner: Arc::new(Mutex::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    /// Registers `t` as a leaf and returns the tracked handle.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = {
            let mut inner = self.inner.lock().unwrap();
            let id = inner.nodes.len();
            inner.nodes.push(Node { inputs: Vec::new(), vjp: Box::new(|_| Vec::new()), size: t.numel() });
            id
        };
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some(NodeRef { tape: self.inner.clone(), id }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    tape: TapeHandle,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tracked tensor. Nodes the sweep never
    /// reached get zeros (the output does not depend on them).
    pub fn wrt(&self, t: &Tensor) -> Result<Tensor> {
        let node = t.node_ref().ok_or_else(|| {
            Error::State("gradient requested for a tensor with no tape node".into())
        })?;
        if !Arc::ptr_eq(&node.tape, &self.tape) {
            return Err(Error::Contract("tensor belongs to a different tape".into()));
        }
        match self.grads.get(node.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(t.shape().to_vec(), g.clone()),
            None => Ok(Tensor::zeros(t.shape().to_vec())),
        }
    }
}

/// Reverse sweep from a tracked scalar. Visits every node at most once,
/// accumulating cotangents in fixed order, then marks the tape consumed.
pub fn backward(output: &Tensor) -> Result<Gradients> {
    let node = output
        .node_ref()
        .ok_or_else(|| Error::State("backward called on a tensor with no tape node".into()))?;
    if !output.is_scalar() {
        return Err(Error::Contract(format!(
            "backward requires a scalar output, got shape {:?}",
            output.shape()
        )));
    }
    let tape = node.tape.clone();
    let out_id = node.id;

    let nodes = {
        let mut inner = tape.lock().unwrap();
        if inner.consumed {
            return Err(Error::State("backward called on an already-consumed tape".into()));
        }
        inner.consumed = true;
        std::mem::take(&mut inner.nodes)
    };

    let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
    grads[out_id] = Some(vec![1.0]);

    for id in (0..=out_id).rev() {
        let Some(g) = grads[id].as_ref() else { continue };
        let node = &nodes[id];
        if node.inputs.is_empty() {
            continue;
        }
        debug_assert_eq!(g.len(), node.size);
        let contributions = (node.vjp)(g);
        debug_assert_eq!(contributions.len(), node.inputs.len());
        for (input_id, contrib) in node.inputs.iter().zip(contributions) {
            match &mut grads[*input_id] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        }
    }

    Ok(Gradients { tape, grads })
}
