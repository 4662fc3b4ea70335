//! Thread-local operation tape.
//!
//! Records are appended in execution order, so recording order is a valid
//! topological order; [`backward`] drains the tape and replays it in reverse,
//! accumulating gradients additively.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::precision::{is_grad_enabled, quantize_in_place};
use crate::tensor::{fresh_node, numel_of, NodeId, Tensor};

/// Vector-Jacobian product of one recorded op: receives one upstream gradient
/// per output and returns one optional gradient per input.
pub type BackwardFn = Box<dyn FnOnce(&[&[f64]]) -> Vec<Option<Vec<f64>>>>;

struct Record {
    name: &'static str,
    inputs: Vec<(Option<NodeId>, usize)>,
    outputs: Vec<(NodeId, usize)>,
    backward: BackwardFn,
}

thread_local! {
    static TAPE: RefCell<Vec<Record>> = const { RefCell::new(Vec::new()) };
}

/// Number of records currently on this thread's tape.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

/// Drops every record on this thread's tape.
pub fn clear() {
    TAPE.with(|t| t.borrow_mut().clear());
}

/// Registers an op with externally computed outputs and backward.
///
/// Used by every built-in op and by custom kernels in downstream crates (the
/// rasterizer registers itself this way). Outputs are validated for shape and
/// finiteness and rounded to the thread precision. Nothing is recorded when no
/// input requires a gradient or recording is disabled.
pub fn record<F>(
    name: &'static str,
    inputs: &[&Tensor],
    outputs: Vec<(Vec<f64>, Vec<usize>)>,
    backward: F,
) -> Result<Vec<Tensor>>
where
    F: FnOnce(&[&[f64]]) -> Vec<Option<Vec<f64>>> + 'static,
{
    let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let mut out = Vec::with_capacity(outputs.len());
    let mut out_ids = Vec::new();
    for (mut data, shape) in outputs {
        if numel_of(&shape) != data.len() {
            return Err(contract(format!(
                "{name}: output shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name}: non-finite output at index {i}")));
        }
        quantize_in_place(&mut data);
        let node = track.then(fresh_node);
        if let Some(id) = node {
            out_ids.push((id, data.len()));
        }
        out.push(Tensor::from_parts(shape, Arc::new(data), node));
    }
    if track {
        let rec = Record {
            name,
            inputs: inputs.iter().map(|t| (t.node_id(), t.numel())).collect(),
            outputs: out_ids,
            backward: Box::new(backward),
        };
        TAPE.with(|t| t.borrow_mut().push(rec));
    }
    Ok(out)
}

/// Single-output convenience around [`record`].
pub fn record1<F>(
    name: &'static str,
    inputs: &[&Tensor],
    data: Vec<f64>,
    shape: Vec<usize>,
    backward: F,
) -> Result<Tensor>
where
    F: FnOnce(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
{
    let mut v = record(name, inputs, vec![(data, shape)], move |g| backward(g[0]))?;
    Ok(v.pop().expect("one output"))
}

/// Gradients produced by [`backward`], keyed by node id.
#[derive(Default, Debug)]
pub struct Gradients {
    map: HashMap<NodeId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node_id().and_then(|id| self.map.get(&id)).map(|v| v.as_slice())
    }

    /// Gradient as a constant tensor shaped like `t`.
    pub fn tensor(&self, t: &Tensor) -> Option<Tensor> {
        self.get(t)
            .map(|g| Tensor::new(g.to_vec(), t.shape()).expect("gradient matches tensor shape"))
    }

    /// Gradient of `t`, or zeros when no gradient reached it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn accumulate(map: &mut HashMap<NodeId, Vec<f64>>, id: NodeId, mut g: Vec<f64>) {
    quantize_in_place(&mut g);
    match map.get_mut(&id) {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g.iter()) {
                *a += *b;
            }
            quantize_in_place(acc);
        }
        None => {
            map.insert(id, g);
        }
    }
}

/// Reverse-mode sweep from a scalar loss. Consumes this thread's tape.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let records = TAPE.with(|t| std::mem::take(&mut *t.borrow_mut()));
    let Some(root) = loss.node_id() else {
        log::warn!("backward called on a loss that is not connected to any parameter");
        return Ok(Gradients::default());
    };
    let mut map: HashMap<NodeId, Vec<f64>> = HashMap::new();
    map.insert(root, vec![1.0]);
    for rec in records.into_iter().rev() {
        if !rec.outputs.iter().any(|(id, _)| map.contains_key(id)) {
            continue;
        }
        let upstream: Vec<Vec<f64>> = rec
            .outputs
            .iter()
            .map(|(id, n)| map.remove(id).unwrap_or_else(|| vec![0.0; *n]))
            .collect();
        let refs: Vec<&[f64]> = upstream.iter().map(|v| v.as_slice()).collect();
        let grads = (rec.backward)(&refs);
        debug_assert_eq!(grads.len(), rec.inputs.len(), "{}: gradient arity", rec.name);
        for ((id, n), g) in rec.inputs.iter().zip(grads) {
            if let (Some(id), Some(g)) = (id, g) {
                debug_assert_eq!(g.len(), *n, "{}: gradient length", rec.name);
                accumulate(&mut map, *id, g);
            }
        }
    }
    Ok(Gradients { map })
}
