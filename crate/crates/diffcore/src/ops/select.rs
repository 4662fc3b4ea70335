use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Ranked selection over the flattened values of a tensor.
///
/// Selection itself carries no gradient; differentiate through the selected
/// values with [`Tensor::index_select`] using [`TopK::indices`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopK {
    /// Positions of the `k` largest values, best first. Ties go to the lower index.
    pub indices: Vec<usize>,
    /// Number of candidates the selection was made from.
    pub len: usize,
}

impl TopK {
    /// 0/1 mask over all candidates.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

impl Tensor {
    pub fn topk(&self, k: usize) -> Result<TopK> {
        let n = self.numel();
        if k == 0 || k > n {
            return Err(contract(format!("top-k with k={k} over {n} values")));
        }
        let v = self.data();
        let mut idx: Vec<usize> = (0..n).collect();
        // total order: descending value, ascending index
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(TopK { indices: idx, len: n })
    }
}
