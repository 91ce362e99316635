//! Minimal reverse-mode differentiable tensor kernel.
//!
//! Only the layers the trading networks need are provided: affine maps,
//! 1-D convolution, batch normalization, leaky ReLU, dropout, max pooling,
//! a fused LSTM cell and a handful of elementwise/reduction ops used to
//! assemble losses. Values are `f64` throughout.
//!
//! A [`Graph`] owns every value it computes. Parameters are copied into a
//! graph as leaves (see [`ParamStore::bind`]); after [`Graph::backward`] the
//! leaf gradients are read back and handed to [`adam_step`].

mod gradcheck;
mod graph;
mod init;
mod optim;
mod snapshot;

pub use gradcheck::{grad_check, CoordSelection, GradCheckReport, Probe};
pub use graph::{Gradients, Graph, NodeId};
pub use init::kaiming_normal;
pub use optim::{adam_step, clip_joint_norm, OptimizerConfig, StepStats};
pub use snapshot::{decode_tensors, encode_tensors};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

/// Errors raised by the tensor kernel.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("train-mode batch norm needs at least 2 samples per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
    #[error("malformed tensor snapshot: {0}")]
    Snapshot(String),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::Shape(msg.into())
}

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(alloc::format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// One-dimensional tensor owning `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; handy for scalar outputs.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(alloc::format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.len();
        Self { name: name.into(), tensor, adam_m: vec![0.0; n], adam_v: vec![0.0; n], step_count: 0 }
    }
}

/// Ordered collection of parameters belonging to one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Copies every parameter into `graph`. Trainable bindings create
    /// gradient-tracking leaves; frozen bindings create constants through
    /// which gradients still flow to other inputs.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let nodes = self
            .params
            .iter()
            .map(|p| if trainable { graph.leaf(p.tensor.clone()) } else { graph.input(p.tensor.clone()) })
            .collect();
        Bound { nodes }
    }
}

/// Graph nodes holding one [`ParamStore`]'s values, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Gradient of every bound parameter; zeros where nothing flowed.
    pub fn collect(&self, graph: &Graph, grads: &Gradients) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .map(|&n| match grads.get(n) {
                Some(g) => g.to_vec(),
                None => vec![0.0; graph.value(n).len()],
            })
            .collect()
    }
}

/// Training or inference behaviour for dropout and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[cfg(test)]
mod tests;
