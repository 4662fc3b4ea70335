//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::precision::no_grad;
use crate::tape::{backward, clear};
use crate::tensor::Tensor;

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest relative error over all compared coordinates.
    pub max_rel_err: f64,
    /// `(parameter index, element index)` of the largest error.
    pub worst_coordinate: Option<(usize, usize)>,
    /// Relative error per compared coordinate, in parameter order.
    pub rel_errors: Vec<f64>,
    /// `(parameter index, element index)` of each entry of `rel_errors`.
    pub coordinates: Vec<(usize, usize)>,
    /// Tape gradient of each entry of `rel_errors`.
    pub analytic: Vec<f64>,
    /// Coordinates where both gradients were below `1e-10`.
    pub skipped_degenerate: usize,
    /// Coordinates belonging to parameters that do not require a gradient.
    pub skipped_frozen: usize,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.rel_errors.len()
    }

    /// Fraction of compared coordinates with relative error `<= tol`
    /// (1.0 when nothing was compared).
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.rel_errors.is_empty() {
            return 1.0;
        }
        self.rel_errors.iter().filter(|&&e| e <= tol).count() as f64 / self.rel_errors.len() as f64
    }
}

/// Compares tape gradients of the scalar `f(params)` with central differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε`.
///
/// Parameters that do not require a gradient are not perturbed and are
/// counted in `skipped_frozen`. The relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. Perturbed values are rounded to the
/// thread precision and the actual step is used as the divisor.
pub fn finite_difference_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    clear();
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|p| if p.requires_grad() { p.as_param() } else { p.detach() })
        .collect();
    let loss = f(&leaves)?;
    let grads = backward(&loss)?;
    let mut report = GradCheckReport::default();
    for (pi, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            report.skipped_frozen += leaf.numel();
            continue;
        }
        let analytic = grads.get_or_zeros(leaf);
        for j in 0..leaf.numel() {
            let mut eval = |delta: f64| -> Result<(f64, f64)> {
                let mut data = leaf.to_vec();
                data[j] += delta;
                let moved = Tensor::new(data, leaf.shape())?;
                let x = moved.data()[j];
                let inputs: Vec<Tensor> = leaves
                    .iter()
                    .enumerate()
                    .map(|(k, t)| if k == pi { moved.clone() } else { t.detach() })
                    .collect();
                Ok((x, no_grad(|| f(&inputs))?.item()?))
            };
            let (xp, fp) = eval(eps)?;
            let (xm, fm) = eval(-eps)?;
            let numeric = (fp - fm) / (xp - xm);
            let a = analytic[j];
            if a.abs() < 1e-10 && numeric.abs() < 1e-10 {
                report.skipped_degenerate += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if report.worst_coordinate.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coordinate = Some((pi, j));
            }
            report.rel_errors.push(rel);
            report.coordinates.push((pi, j));
            report.analytic.push(a);
        }
    }
    Ok(report)
}
