//! Adam with global gradient-norm clipping over named parameters.

use std::collections::BTreeMap;

use diffcore::Gradients;
use featsplat::nn::ParamStore;

use crate::config::OptimConfig;
use crate::error::{Error, Result};

pub struct Adam {
    pub lr: f64,
    cfg: OptimConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// What one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl Adam {
    pub fn new(lr: f64, cfg: &OptimConfig) -> Self {
        Adam {
            lr,
            cfg: cfg.clone(),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates `names` in place from `grads`. A non-finite gradient aborts
    /// the step before anything is written.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &Gradients, names: &[String]) -> Result<StepInfo> {
        let mut gs = Vec::with_capacity(names.len());
        let mut sq = 0.0;
        for n in names {
            let g = grads.get_or_zeros(ps.get(n)?);
            sq += g.iter().map(|v| v * v).sum::<f64>();
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            let bad: Vec<&str> = names
                .iter()
                .zip(&gs)
                .filter(|(_, g)| g.iter().any(|v| !v.is_finite()))
                .map(|(n, _)| n.as_str())
                .collect();
            return Err(Error::Numeric(format!("non-finite gradient in {bad:?}")));
        }
        let scale = if norm > self.cfg.clip { self.cfg.clip / norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (n, g) in names.iter().zip(gs) {
            let p = ps.get(n)?;
            let (m, v) = self
                .moments
                .entry(n.clone())
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            let mut next = p.to_vec();
            for i in 0..next.len() {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                next[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.cfg.eps);
            }
            ps.set(n, next)?;
        }
        Ok(StepInfo {
            grad_norm: norm,
            clipped: scale < 1.0,
        })
    }
}
