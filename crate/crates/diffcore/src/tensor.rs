use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::precision::quantize_in_place;

/// Identifier of a differentiable value on the tape.
pub type NodeId = u64;

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_node() -> NodeId {
    NEXT_NODE.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major tensor. Cloning is cheap: the buffer is shared.
///
/// A tensor requires a gradient exactly when it carries a node id; constants
/// never get a gradient slot.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (no gradient). Values are rounded to the thread precision.
    pub fn new(mut data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at index {i}")));
        }
        quantize_in_place(&mut data);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Leaf tensor that receives a gradient.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(data, shape)?;
        t.node = Some(fresh_node());
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel_of(shape)]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let mut data = vec![value; numel_of(shape)];
        quantize_in_place(&mut data);
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[], value)
    }

    /// Internal constructor for op outputs that already passed validation.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeId>) -> Tensor {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Fresh leaf sharing this tensor's values.
    pub fn as_param(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(fresh_node()),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(contract(format!(
                "max_abs_diff shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }
}
