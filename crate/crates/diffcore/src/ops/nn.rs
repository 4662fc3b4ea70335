use crate::error::{contract, Result};
use crate::gemm::{gemm, Mat};
use crate::tape::{record, record1};
use crate::tensor::Tensor;

/// Spatial padding rule for convolutions (odd kernels only for `Same`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` on every side: output is `ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// `cols[(c,ki,kj), (oy,ox)] = img[c, oy*s - p + ki, ox*s - p + kj]`.
fn im2col(img: &[f64], g: Geom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * npix];
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * npix;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            *d = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns back into `img`.
fn col2im(cols: &[f64], g: Geom, img: &mut [f64]) {
    let npix = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * npix;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + y as usize * g.w;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            img[base + x as usize] += cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(b: Option<&Tensor>, n: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [n] => Err(contract(format!(
            "bias shape {:?} does not match {n} output channels",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn inputs<'a>(x: &'a Tensor, w: &'a Tensor, b: Option<&'a Tensor>) -> Vec<&'a Tensor> {
    let mut v = vec![x, w];
    if let Some(b) = b {
        v.push(b);
    }
    v
}

impl Tensor {
    /// 2-D convolution, `x [N,C,H,W]`, `w [O,C,kh,kw]`, optional bias `[O]`.
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: Padding) -> Result<Tensor> {
        let (&[n, c, h, wd], &[o, c2, kh, kw]) = (self.shape(), w.shape()) else {
            return Err(contract(format!(
                "conv2d expects x [N,C,H,W] and w [O,C,kh,kw], got {:?} and {:?}",
                self.shape(),
                w.shape()
            )));
        };
        if c != c2 || stride == 0 {
            return Err(contract(format!(
                "conv2d channel mismatch: input {:?}, weight {:?}, stride {stride}",
                self.shape(),
                w.shape()
            )));
        }
        check_bias(b, o)?;
        let pad = padding.amount(kh);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(contract(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let geom = Geom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let npix = geom.oh * geom.ow;
        let ck = c * kh * kw;
        let (xd, wdat) = (self.data_arc(), w.data_arc());
        let bias = b.map(|b| b.data_arc());
        let mut out = vec![0.0; n * o * npix];
        for i in 0..n {
            let cols = im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], geom);
            let dst = &mut out[i * o * npix..(i + 1) * o * npix];
            if let Some(bias) = &bias {
                for (oc, chunk) in dst.chunks_mut(npix).enumerate() {
                    chunk.fill(bias[oc]);
                }
            }
            gemm(o, ck, npix, Mat::n(&wdat), Mat::n(&cols), dst, bias.is_some());
        }
        let has_bias = b.is_some();
        let (need_x, need_w) = (self.requires_grad(), w.requires_grad());
        record1("conv2d", &inputs(self, w, b), out, vec![n, o, geom.oh, geom.ow], move |g| {
            let mut gx = need_x.then(|| vec![0.0; n * c * h * wd]);
            let mut gw = need_w.then(|| vec![0.0; o * ck]);
            let mut gb = has_bias.then(|| vec![0.0; o]);
            for i in 0..n {
                let gi = &g[i * o * npix..(i + 1) * o * npix];
                if let Some(gb) = gb.as_mut() {
                    for (oc, chunk) in gi.chunks(npix).enumerate() {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    let cols = im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], geom);
                    gemm(o, npix, ck, Mat::n(gi), Mat::t(&cols), gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let mut gcols = vec![0.0; ck * npix];
                    gemm(ck, o, npix, Mat::t(&wdat), Mat::n(gi), &mut gcols, false);
                    col2im(&gcols, geom, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                }
            }
            let mut v = vec![gx, gw];
            if has_bias {
                v.push(gb);
            }
            v
        })
    }

    /// Transposed convolution, `x [N,Cin,H,W]`, `w [Cin,Cout,kh,kw]`; output
    /// spatial size is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (&[n, cin, h, wd], &[cin2, cout, kh, kw]) = (self.shape(), w.shape()) else {
            return Err(contract(format!(
                "conv_transpose2d expects x [N,C,H,W] and w [Cin,Cout,kh,kw], got {:?} and {:?}",
                self.shape(),
                w.shape()
            )));
        };
        if cin != cin2 || stride == 0 || (h - 1) * stride + kh < 2 * pad + 1 {
            return Err(contract(format!(
                "conv_transpose2d mismatch: input {:?}, weight {:?}",
                self.shape(),
                w.shape()
            )));
        }
        check_bias(b, cout)?;
        let (oh, ow) = ((h - 1) * stride + kh - 2 * pad, (wd - 1) * stride + kw - 2 * pad);
        // geometry of the adjoint convolution: image = output, column grid = input
        let geom = Geom {
            c: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let npix = h * wd;
        let ck = cout * kh * kw;
        let (xd, wdat) = (self.data_arc(), w.data_arc());
        let bias = b.map(|b| b.data_arc());
        let mut out = vec![0.0; n * cout * oh * ow];
        for i in 0..n {
            let mut cols = vec![0.0; ck * npix];
            gemm(ck, cin, npix, Mat::t(&wdat), Mat::n(&xd[i * cin * npix..(i + 1) * cin * npix]), &mut cols, false);
            let dst = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            col2im(&cols, geom, dst);
            if let Some(bias) = &bias {
                for (oc, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[oc]);
                }
            }
        }
        let has_bias = b.is_some();
        let (need_x, need_w) = (self.requires_grad(), w.requires_grad());
        record1("conv_transpose2d", &inputs(self, w, b), out, vec![n, cout, oh, ow], move |g| {
            let mut gx = need_x.then(|| vec![0.0; n * cin * npix]);
            let mut gw = need_w.then(|| vec![0.0; cin * ck]);
            let mut gb = has_bias.then(|| vec![0.0; cout]);
            for i in 0..n {
                let gi = &g[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                if let Some(gb) = gb.as_mut() {
                    for (oc, chunk) in gi.chunks(oh * ow).enumerate() {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                }
                let gcols = im2col(gi, geom);
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, ck, npix, Mat::n(&wdat), Mat::n(&gcols), &mut gx[i * cin * npix..(i + 1) * cin * npix], false);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, npix, ck, Mat::n(&xd[i * cin * npix..(i + 1) * cin * npix]), Mat::t(&gcols), gw, true);
                }
            }
            let mut v = vec![gx, gw];
            if has_bias {
                v.push(gb);
            }
            v
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis where `keep[j] == false` entries get
    /// probability exactly 0. `keep` is tiled over the tensor and its length
    /// must be a multiple of the last dimension dividing the element count.
    pub fn softmax_masked(&self, keep: &[bool]) -> Result<Tensor> {
        self.softmax_impl(Some(keep.to_vec()))
    }

    fn softmax_impl(&self, keep: Option<Vec<bool>>) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| contract("softmax on a scalar"))?;
        if let Some(k) = &keep {
            if k.is_empty() || k.len() % d != 0 || self.numel() % k.len() != 0 {
                return Err(contract(format!(
                    "softmax mask of length {} incompatible with shape {:?}",
                    k.len(),
                    self.shape()
                )));
            }
        }
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (r, (src, dst)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
            let mask = keep.as_ref().map(|k| {
                let start = (r * d) % k.len();
                &k[start..start + d]
            });
            let on = |j: usize| mask.is_none_or(|m| m[j]);
            let mx = (0..d).filter(|&j| on(j)).map(|j| src[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(contract(format!("softmax row {r} is fully masked")));
            }
            let mut z = 0.0;
            for j in 0..d {
                if on(j) {
                    dst[j] = (src[j] - mx).exp();
                    z += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= z);
        }
        let y = out.clone();
        record1("softmax", &[self], out, self.shape().to_vec(), move |g| {
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), dst) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` `[D]`.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| contract("layernorm on a scalar"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(contract(format!(
                "layernorm affine shapes {:?}/{:?} for last dim {d}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = self.numel() / d;
        let (gd, bd) = (gamma.data_arc(), beta.data_arc());
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; self.numel()];
        for (r, src) in self.data().chunks(d).enumerate() {
            let mu = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (src[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        let (need_x, need_g, need_b) = (self.requires_grad(), gamma.requires_grad(), beta.requires_grad());
        let n = self.numel();
        record1("layernorm", &[self, gamma, beta], out, self.shape().to_vec(), move |g| {
            let mut gx = need_x.then(|| vec![0.0; n]);
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    gg[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let dxh: Vec<f64> = (0..d).map(|j| gr[j] * gd[j]).collect();
                    let s1: f64 = dxh.iter().sum();
                    let s2: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] / d as f64 * (d as f64 * dxh[j] - s1 - xr[j] * s2);
                    }
                }
            }
            vec![gx, need_g.then_some(gg), need_b.then_some(gbeta)]
        })
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let &[n, c, h, w] = self.shape() else {
            return Err(contract(format!("upsample_nearest expects [N,C,H,W], got {:?}", self.shape())));
        };
        if factor == 0 {
            return Err(contract("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut offs = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    offs.push(p * h * w + (y / factor) * w + x / factor);
                }
            }
        }
        self.gather_offsets("upsample_nearest", vec![n, c, oh, ow], offs)
    }

    /// Bilinear resize of `[N,C,H,W]` to `(oh, ow)` with half-pixel centers.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let &[n, c, h, w] = self.shape() else {
            return Err(contract(format!("resize_bilinear expects [N,C,H,W], got {:?}", self.shape())));
        };
        if oh == 0 || ow == 0 {
            return Err(contract("resize target must be non-empty"));
        }
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ty = taps(oh, h);
        let tx = taps(ow, w);
        let xd = self.data_arc();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out[(p * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        record1("resize_bilinear", &[self], out, vec![n, c, oh, ow], move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let plane = &mut gx[p * h * w..(p + 1) * h * w];
                for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g[(p * oh + y) * ow + x];
                        plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                        plane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Non-overlapping `k×k` average pooling of `[N,C,H,W]`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let &[n, c, h, w] = self.shape() else {
            return Err(contract(format!("avg_pool2d expects [N,C,H,W], got {:?}", self.shape())));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(contract(format!("avg_pool2d window {k} does not tile {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let xd = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    out[(p * oh + y / k) * ow + x / k] += xd[(p * h + y) * w + x] * inv;
                }
            }
        }
        let mut v = record("avg_pool2d", &[self], vec![(out, vec![n, c, oh, ow])], move |g| {
            let g = g[0];
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        gx[(p * h + y) * w + x] = g[(p * oh + y / k) * ow + x / k] * inv;
                    }
                }
            }
            vec![Some(gx)]
        })?;
        Ok(v.pop().expect("one output"))
    }
}
