use crate::error::{contract, Result};
use crate::tape::record1;
use crate::tensor::Tensor;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(contract(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// For each element of `out_shape`, the linear offset into a tensor of
/// `in_shape` broadcast against it. `None` when no broadcasting happens.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == in_shape {
        return None;
    }
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut offs = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(offs)
}

fn binary<F, G>(name: &'static str, a: &Tensor, b: &Tensor, fwd: F, grad: G) -> Result<Tensor>
where
    F: Fn(f64, f64) -> f64,
    G: Fn(f64, f64, f64) -> (f64, f64) + 'static,
{
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let oa = broadcast_offsets(&shape, a.shape());
    let ob = broadcast_offsets(&shape, b.shape());
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let n: usize = shape.iter().product();
    let ia = |i: usize| oa.as_ref().map_or(i, |o| o[i]);
    let ib = |i: usize| ob.as_ref().map_or(i, |o| o[i]);
    let out: Vec<f64> = (0..n).map(|i| fwd(ad[ia(i)], bd[ib(i)])).collect();
    let (na, nb) = (a.numel(), b.numel());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    record1(name, &[a, b], out, shape, move |g| {
        let mut ga = need_a.then(|| vec![0.0; na]);
        let mut gb = need_b.then(|| vec![0.0; nb]);
        for (i, &gi) in g.iter().enumerate() {
            let (xa, xb) = (
                oa.as_ref().map_or(i, |o| o[i]),
                ob.as_ref().map_or(i, |o| o[i]),
            );
            let (da, db) = grad(ad[xa], bd[xb], gi);
            if let Some(ga) = ga.as_mut() {
                ga[xa] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[xb] += db;
            }
        }
        vec![ga, gb]
    })
}

fn unary<F, G>(name: &'static str, x: &Tensor, fwd: F, deriv: G) -> Result<Tensor>
where
    F: Fn(f64) -> f64,
    G: Fn(f64, f64) -> f64 + 'static,
{
    let xd = x.data_arc();
    let out: Vec<f64> = xd.iter().map(|&v| fwd(v)).collect();
    let saved = out.clone();
    record1(name, &[x], out, x.shape().to_vec(), move |g| {
        vec![Some(
            g.iter()
                .zip(xd.iter().zip(saved.iter()))
                .map(|(gi, (xi, yi))| gi * deriv(*xi, *yi))
                .collect(),
        )]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise arithmetic with numpy-style broadcasting, plus pointwise
/// nonlinearities.
impl Tensor {
    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        binary("add", self, o, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        binary("sub", self, o, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        binary("mul", self, o, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        binary("div", self, o, |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    pub fn neg(&self) -> Result<Tensor> {
        unary("neg", self, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        unary("scale", self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary("add_scalar", self, move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        unary("sqrt", self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary("exp", self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor> {
        unary("ln", self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary("relu", self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        unary("gelu", self, gelu, |x, _| gelu_deriv(x))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary("sigmoid", self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary("tanh", self, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        unary(
            "clamp",
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }
}
