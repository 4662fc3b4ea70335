use crate::error::{contract, Result};
use crate::tape::{record, record1};
use crate::tensor::{numel_of, Tensor};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    /// `out[i] = self[offsets[i]]`; the gradient scatters back.
    pub(crate) fn gather_offsets(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        offsets: Vec<usize>,
    ) -> Result<Tensor> {
        let src = self.data();
        let out: Vec<f64> = offsets.iter().map(|&o| src[o]).collect();
        let n = self.numel();
        record1(name, &[self], out, shape, move |g| {
            let mut gx = vec![0.0; n];
            for (gi, &o) in g.iter().zip(offsets.iter()) {
                gx[o] += gi;
            }
            vec![Some(gx)]
        })
    }

    /// `out[offsets[i]] += self[i]` into zeros of `shape`; the gradient gathers.
    pub(crate) fn scatter_offsets(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        offsets: Vec<usize>,
    ) -> Result<Tensor> {
        let mut out = vec![0.0; numel_of(&shape)];
        for (v, &o) in self.data().iter().zip(offsets.iter()) {
            out[o] += v;
        }
        record1(name, &[self], out, shape, move |g| {
            vec![Some(offsets.iter().map(|&o| g[o]).collect())]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(contract(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        let data = self.data().to_vec();
        record1("reshape", &[self], data, shape.to_vec(), |g| vec![Some(g.to_vec())])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(contract(format!("invalid permutation {axes:?} for rank {rank}")));
        }
        let in_strides = strides_of(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut offsets = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            offsets.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        self.gather_offsets("permute", out_shape, offsets)
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(contract(format!("transpose({a},{b}) on rank {}", self.rank())));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(contract(format!("index_select axis {axis} on rank {}", self.rank())));
        }
        let dim = self.shape()[axis];
        if let Some(bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(contract(format!("index {bad} out of range for axis of size {dim}")));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut offsets = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * dim + i) * inner;
                offsets.extend(base..base + inner);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        self.gather_offsets("index_select", shape, offsets)
    }

    /// Adjoint of [`Tensor::index_select`]: places slice `j` at position
    /// `indices[j]` of a zero tensor with `size` entries along `axis`.
    pub fn index_scatter(&self, axis: usize, indices: &[usize], size: usize) -> Result<Tensor> {
        if axis >= self.rank() || self.shape()[axis] != indices.len() {
            return Err(contract(format!(
                "index_scatter: axis {axis} of {:?} must have {} entries",
                self.shape(),
                indices.len()
            )));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= size) {
            return Err(contract(format!("scatter index {bad} out of range {size}")));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut offsets = Vec::with_capacity(self.numel());
        for o in 0..outer {
            for &i in indices {
                let base = (o * size + i) * inner;
                offsets.extend(base..base + inner);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = size;
        self.scatter_offsets("index_scatter", shape, offsets)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape()
            )));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| contract("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(contract(format!("concat axis {axis} on rank {rank}")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(contract(format!(
                    "concat shape mismatch: {:?} vs {:?} along axis {axis}",
                    first.shape(),
                    p.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut v = record("concat", parts, vec![(out, shape)], move |g| {
            let g = g[0];
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &s) in grads.iter_mut().zip(&sizes) {
                    gp.extend_from_slice(&g[off..off + s * inner]);
                    off += s * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })?;
        Ok(v.pop().expect("one output"))
    }

    /// Inserts a size-1 axis.
    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor> {
        let mut s = self.shape().to_vec();
        if axis > s.len() {
            return Err(contract(format!("unsqueeze axis {axis} on rank {}", s.len())));
        }
        s.insert(axis, 1);
        self.reshape(&s)
    }
}
