use crate::error::{contract, Result};
use crate::gemm::{gemm, Mat};
use crate::tape::record1;
use crate::tensor::Tensor;

/// `[B,M,K] x [B,K,N]`, or `[B,M,K] x [B,N,K]^T` when `trans_b`.
fn batched(name: &'static str, a: &Tensor, b: &Tensor, batch: usize, m: usize, k: usize, n: usize, trans_b: bool, shape: Vec<usize>) -> Result<Tensor> {
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let sa = &ad[i * m * k..(i + 1) * m * k];
        let sb = &bd[i * k * n..(i + 1) * k * n];
        let bm = if trans_b { Mat::t(sb) } else { Mat::n(sb) };
        gemm(m, k, n, Mat::n(sa), bm, &mut out[i * m * n..(i + 1) * m * n], false);
    }
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    record1(name, &[a, b], out, shape, move |g| {
        let mut ga = need_a.then(|| vec![0.0; batch * m * k]);
        let mut gb = need_b.then(|| vec![0.0; batch * k * n]);
        for i in 0..batch {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let sa = &ad[i * m * k..(i + 1) * m * k];
            let sb = &bd[i * k * n..(i + 1) * k * n];
            if let Some(ga) = ga.as_mut() {
                // dA = dC · B^T   (B^T is k×n stored as n×k when trans_b)
                let bt = if trans_b { Mat::n(sb) } else { Mat::t(sb) };
                gemm(m, n, k, Mat::n(gi), bt, &mut ga[i * m * k..(i + 1) * m * k], false);
            }
            if let Some(gb) = gb.as_mut() {
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // dB (n×k) = dC^T · A
                    gemm(n, m, k, Mat::t(gi), Mat::n(sa), dst, false);
                } else {
                    // dB (k×n) = A^T · dC
                    gemm(k, m, n, Mat::t(sa), Mat::n(gi), dst, false);
                }
            }
        }
        vec![ga, gb]
    })
}

impl Tensor {
    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        match (self.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => batched("matmul", self, b, 1, m, k, n, false, vec![m, n]),
            (sa, sb) => Err(contract(format!("matmul shape mismatch {sa:?} x {sb:?}"))),
        }
    }

    /// `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&self, b: &Tensor) -> Result<Tensor> {
        match (self.shape(), b.shape()) {
            (&[bs, m, k], &[bs2, k2, n]) if bs == bs2 && k == k2 => {
                batched("bmm", self, b, bs, m, k, n, false, vec![bs, m, n])
            }
            (sa, sb) => Err(contract(format!("bmm shape mismatch {sa:?} x {sb:?}"))),
        }
    }

    /// `[B,M,K] x [B,N,K]^T -> [B,M,N]`.
    pub fn bmm_nt(&self, b: &Tensor) -> Result<Tensor> {
        match (self.shape(), b.shape()) {
            (&[bs, m, k], &[bs2, n, k2]) if bs == bs2 && k == k2 => {
                batched("bmm_nt", self, b, bs, m, k, n, true, vec![bs, m, n])
            }
            (sa, sb) => Err(contract(format!("bmm_nt shape mismatch {sa:?} x {sb:?}"))),
        }
    }

    /// Affine map over the last axis: `x [..., K] · w [K, N] (+ b [N])`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let k = *self.shape().last().ok_or_else(|| contract("linear on a scalar"))?;
        if w.rank() != 2 || w.shape()[0] != k {
            return Err(contract(format!(
                "linear: input {:?} incompatible with weight {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let rows = self.numel() / k.max(1);
        let n = w.shape()[1];
        let mut y = self.reshape(&[rows, k])?.matmul(w)?;
        if let Some(b) = b {
            y = y.add(b)?;
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        y.reshape(&shape)
    }
}
