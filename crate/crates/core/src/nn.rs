//! Named parameter storage and the few layer types the models are built from.

use std::collections::{BTreeMap, BTreeSet};

use diffcore::{Padding, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flat map from dotted names to parameter tensors.
///
/// Trainable entries are tape leaves; frozen entries are plain constants and
/// never receive gradients. Iteration order is lexicographic, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Clone, Default, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        self.params
            .insert(name.to_string(), Tensor::param(data, shape)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replaces the values of `name`, keeping its trainable/frozen status.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let old = self.get(name)?;
        let t = if self.frozen.contains(name) {
            Tensor::new(data, old.shape())?
        } else {
            Tensor::param(data, old.shape())?
        };
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Swaps in an existing tensor (e.g. a perturbed copy) for `name`.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != t.shape() {
            return Err(Error::Contract(format!(
                "parameter {name} has shape {:?}, replacement has {:?}",
                old.shape(),
                t.shape()
            )));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (name, t) in self
            .params
            .iter_mut()
            .filter(|(n, _)| n.starts_with(prefix))
        {
            if frozen {
                *t = t.detach();
                self.frozen.insert(name.clone());
            } else if self.frozen.remove(name) {
                *t = t.as_param();
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Moves every entry of `other` into this store.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, t) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::Contract(format!(
                    "parameter {name} registered twice"
                )));
            }
            if other.frozen.contains(&name) {
                self.frozen.insert(name.clone());
            }
            self.params.insert(name, t);
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, as an independent store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.params.insert(n.clone(), t.clone());
            if self.frozen.contains(n) {
                out.frozen.insert(n.clone());
            }
        }
        out
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Dense layer over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: Option<String>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        ps.insert(
            &format!("{name}.w"),
            uniform(rng, din * dout, bound),
            &[din, dout],
        )?;
        ps.insert(&format!("{name}.b"), vec![0.0; dout], &[dout])?;
        Ok(Linear {
            w: format!("{name}.w"),
            b: Some(format!("{name}.b")),
        })
    }

    pub fn without_bias(
        ps: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        ps.insert(&format!("{name}.w"), uniform(rng, din * dout, bound), &[din, dout])?;
        Ok(Linear {
            w: format!("{name}.w"),
            b: None,
        })
    }

    /// Name of the bias parameter; errors for a bias-free layer.
    pub fn bias(&self) -> Result<&str> {
        self.b
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("{} has no bias", self.w)))
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let b = match &self.b {
            Some(b) => Some(ps.get(b)?),
            None => None,
        };
        Ok(x.linear(ps.get(&self.w)?, b)?)
    }
}

/// Edge-replicating pad of `p` pixels on every side of `[N,C,H,W]`.
pub fn replicate_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::Contract(format!(
            "replicate_pad expects [N,C,H,W], got {:?}",
            x.shape()
        )));
    }
    if p == 0 {
        return Ok(x.clone());
    }
    let clamp = |n: usize| -> Vec<usize> {
        (0..n + 2 * p)
            .map(|i| (i as isize - p as isize).clamp(0, n as isize - 1) as usize)
            .collect()
    };
    let rows = clamp(x.dim(2));
    let cols = clamp(x.dim(3));
    Ok(x.index_select(2, &rows)?.index_select(3, &cols)?)
}

/// 2-D convolution over `[N,C,H,W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub padding: Padding,
    /// Pad by replicating edges instead of zeros.
    pub replicate: bool,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Self::with_weights(
            ps,
            name,
            uniform(rng, cout * cin * k * k, bound),
            cin,
            cout,
            k,
            stride,
        )
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_weights(
            ps,
            name,
            vec![0.0; cout * cin * k * k],
            cin,
            cout,
            k,
            stride,
        )
    }

    pub fn with_weights(
        ps: &mut ParamStore,
        name: &str,
        w: Vec<f64>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        ps.insert(&format!("{name}.w"), w, &[cout, cin, k, k])?;
        ps.insert(&format!("{name}.b"), vec![0.0; cout], &[cout])?;
        Ok(Conv2d {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            stride,
            padding: Padding::Same,
            replicate: false,
            kernel: k,
        })
    }

    pub fn replicate_padded(mut self) -> Self {
        self.replicate = true;
        self
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (ps.get(&self.w)?, Some(ps.get(&self.b)?));
        if self.replicate && self.kernel > 1 {
            let padded = replicate_pad(x, self.kernel / 2)?;
            return Ok(padded.conv2d(w, b, self.stride, Padding::Valid)?);
        }
        Ok(x.conv2d(w, b, self.stride, self.padding)?)
    }
}

/// Stride-2, kernel-2 transposed convolution doubling the spatial size.
#[derive(Clone, Debug)]
pub struct Upconv {
    pub w: String,
    pub b: String,
}

impl Upconv {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (cin * 4) as f64).sqrt();
        ps.insert(
            &format!("{name}.w"),
            uniform(rng, cin * cout * 4, bound),
            &[cin, cout, 2, 2],
        )?;
        ps.insert(&format!("{name}.b"), vec![0.0; cout], &[cout])?;
        Ok(Upconv {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(ps.get(&self.w)?, Some(ps.get(&self.b)?), 2, 0)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        ps.insert(&format!("{name}.gamma"), vec![1.0; d], &[d])?;
        ps.insert(&format!("{name}.beta"), vec![0.0; d], &[d])?;
        Ok(LayerNorm {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(x.layernorm(ps.get(&self.gamma)?, ps.get(&self.beta)?, 1e-5)?)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources, `[B, Nq, d]` against `[B, Nk, d]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, rng)?,
            // a key bias shifts all scores of a query equally; softmax removes it
            k: Linear::without_bias(ps, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(ps, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let &[b, n, d] = x.shape() else {
            return Err(Error::Contract(format!(
                "attention expects [B,N,d], got {:?}",
                x.shape()
            )));
        };
        let dh = d / self.heads;
        Ok(x.reshape(&[b, n, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, n, dh])?)
    }

    /// `keep` (optional) masks keys per `[Nq, Nk]` pair, tiled over batch and heads.
    pub fn forward(
        &self,
        ps: &ParamStore,
        xq: &Tensor,
        xkv: &Tensor,
        keep: Option<&[bool]>,
    ) -> Result<Tensor> {
        let &[b, nq, d] = xq.shape() else {
            return Err(Error::Contract(format!(
                "attention expects [B,N,d], got {:?}",
                xq.shape()
            )));
        };
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(ps, xq)?)?;
        let k = self.split_heads(&self.k.forward(ps, xkv)?)?;
        let v = self.split_heads(&self.v.forward(ps, xkv)?)?;
        let scores = q.bmm_nt(&k)?.scale(1.0 / (dh as f64).sqrt())?;
        let probs = match keep {
            Some(m) => scores.softmax_masked(m)?,
            None => scores.softmax()?,
        };
        let ctx = probs
            .bmm(&v)?
            .reshape(&[b, self.heads, nq, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, nq, d])?;
        self.o.forward(ps, &ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn frozen_parameters_are_constants() {
        let mut ps = ParamStore::new();
        ps.insert("a.w", vec![1.0, 2.0], &[2]).unwrap();
        ps.insert("b.w", vec![3.0], &[1]).unwrap();
        ps.set_frozen("a.", true);
        assert!(!ps.get("a.w").unwrap().requires_grad());
        assert!(ps.get("b.w").unwrap().requires_grad());
        ps.set("a.w", vec![5.0, 6.0]).unwrap();
        assert!(!ps.get("a.w").unwrap().requires_grad());
        ps.set_frozen("a.", false);
        assert!(ps.get("a.w").unwrap().requires_grad());
        assert!(ps.insert("b.w", vec![0.0], &[1]).is_err());
    }

    #[test]
    fn replicate_pad_copies_edges() {
        let x = Tensor::new((0..6).map(|v| v as f64).collect(), &[1, 1, 2, 3]).unwrap();
        let p = replicate_pad(&x, 1).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 5]);
        assert_eq!(
            p.to_vec(),
            vec![
                0.0, 0.0, 1.0, 2.0, 2.0, 0.0, 0.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 5.0, 5.0, 3.0,
                3.0, 4.0, 5.0, 5.0
            ]
        );
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Attention::new(&mut ps, "att", 10, 4, &mut rng).is_err());
    }
}
