use super::elementwise::broadcast_offsets;
use crate::error::{contract, Result};
use crate::tape::record1;
use crate::tensor::Tensor;

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut keep = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(contract(format!("reduce axis {a} out of range for {shape:?}")));
        }
        keep[a] = 1;
    }
    Ok(keep)
}

impl Tensor {
    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        record1("sum", &[self], vec![s], vec![], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sums over `axes`. Reduced axes are kept with size 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let keep = reduced_shape(self.shape(), axes)?;
        let offs = broadcast_offsets(self.shape(), &keep);
        let n_out: usize = keep.iter().product();
        let mut out = vec![0.0; n_out];
        for (i, v) in self.data().iter().enumerate() {
            out[offs.as_ref().map_or(i, |o| o[i])] += v;
        }
        let shape: Vec<usize> = if keepdim {
            keep
        } else {
            self.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, d)| *d)
                .collect()
        };
        let n = self.numel();
        record1("sum_axes", &[self], out, shape, move |g| {
            vec![Some(
                (0..n).map(|i| g[offs.as_ref().map_or(i, |o| o[i])]).collect(),
            )]
        })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes, keepdim)?.scale(1.0 / count.max(1) as f64)
    }
}
