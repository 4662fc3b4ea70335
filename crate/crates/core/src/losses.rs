//! Reconstruction, refinement and adversarial losses, plus PSNR/SSIM.
//!
//! Perceptual distances come from a frozen, randomly initialized conv stack
//! ([`PerceptualProxy`]). The discriminator looks at the same frozen
//! features through a small trainable head.

use diffcore::{no_grad, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};

/// Probabilities are clamped to this distance from 0 and 1 before any log.
pub const PROB_CLAMP: f64 = 1e-6;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// MSE weight in the reconstruction loss.
    pub l1: f64,
    /// Perceptual weight in the reconstruction loss.
    pub l2: f64,
    /// MSE weight in the refinement loss.
    pub l3: f64,
    /// Perceptual weight in the refinement loss.
    pub l4: f64,
    /// Weight inside both adversarial expectations.
    pub l5: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            l2: 0.05,
            l3: 1.0,
            l4: 0.05,
            l5: 1.0,
            lambda_r: 1.0,
            lambda_d: 1.0,
            lambda_g: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("l4", self.l4),
            ("l5", self.l5),
            ("lambda_r", self.lambda_r),
            ("lambda_d", self.lambda_d),
            ("lambda_g", self.lambda_g),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> LossWeights {
        LossWeights {
            l1: self.l1 * c,
            l2: self.l2 * c,
            l3: self.l3 * c,
            l4: self.l4 * c,
            l5: self.l5 * c,
            lambda_r: self.lambda_r * c,
            lambda_d: self.lambda_d * c,
            lambda_g: self.lambda_g * c,
        }
    }
}

/// Accepts `[3,H,W]` or `[B,3,H,W]` and returns the batched form.
fn batched(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        3 => Ok(x.unsqueeze(0)?),
        4 => Ok(x.clone()),
        _ => Err(Error::Contract(format!(
            "expected an image [C,H,W] or batch [B,C,H,W], got {:?}",
            x.shape()
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok(a.sub(b)?.square()?.mean()?)
}

/// Frozen random conv features used as a perceptual distance.
///
/// Four 3×3 conv + ReLU layers (3→16→32→32→32, the last three stride 2).
/// Each layer's activations are normalized to unit length across channels
/// at every pixel; the distance is the squared difference of normalized
/// features, averaged over pixels and summed over layers.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    ps: ParamStore,
    layers: Vec<Conv2d>,
    pub seed: u64,
}

pub const PROXY_WIDTHS: [usize; 4] = [16, 32, 32, 32];

impl PerceptualProxy {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &cout) in PROXY_WIDTHS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            layers.push(Conv2d::new(&mut ps, &format!("proxy.{i}"), cin, cout, 3, stride, &mut rng)?);
            cin = cout;
        }
        ps.set_frozen("proxy", true);
        Ok(PerceptualProxy { ps, layers, seed })
    }

    pub fn params(&self) -> &ParamStore {
        &self.ps
    }

    /// Raw ReLU activations of every layer for images in [0,1].
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = batched(x)?.scale(2.0)?.add_scalar(-1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(&self.ps, &h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn normalized(f: &Tensor) -> Result<Tensor> {
        let norm = f.square()?.sum_axes(&[1], true)?.add_scalar(1e-10)?.sqrt()?;
        Ok(f.div(&norm)?)
    }

    /// Differentiable distance between two images or batches.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b)?;
        let (fa, fb) = (self.features(a)?, self.features(b)?);
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = Self::normalized(x)?
                .sub(&Self::normalized(y)?)?
                .square()?
                .sum_axes(&[1], false)?
                .mean()?;
            total = Some(match total {
                Some(t) => t.add(&d)?,
                None => d,
            });
        }
        total.ok_or_else(|| Error::Config("perceptual proxy has no layers".into()))
    }

    /// Distance as a number, without recording on the tape.
    pub fn distance_value(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        no_grad(|| -> Result<f64> { Ok(self.distance(&a.detach(), &b.detach())?.item()?) })
    }
}

/// λ1·MSE + λ2·perceptual between a render and its ground truth.
pub fn loss_r(render: &Tensor, gt: &Tensor, proxy: &PerceptualProxy, w: &LossWeights) -> Result<Tensor> {
    weighted(render, gt, proxy, w.l1, w.l2)
}

/// λ3·MSE + λ4·perceptual between a refined image and its ground truth.
pub fn loss_d(refined: &Tensor, gt: &Tensor, proxy: &PerceptualProxy, w: &LossWeights) -> Result<Tensor> {
    weighted(refined, gt, proxy, w.l3, w.l4)
}

fn weighted(a: &Tensor, b: &Tensor, proxy: &PerceptualProxy, wm: f64, wp: f64) -> Result<Tensor> {
    let m = mse(a, b)?.scale(wm)?;
    if wp == 0.0 {
        return Ok(m);
    }
    Ok(m.add(&proxy.distance(a, b)?.scale(wp)?)?)
}

/// Trainable head over the last layer of frozen proxy features.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub conv: Conv2d,
    pub head: Linear,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cin = PROXY_WIDTHS[PROXY_WIDTHS.len() - 1];
        Ok(Discriminator {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, hidden, 3, 1, rng)?,
            head: Linear::new(ps, &format!("{name}.head"), hidden, 1, rng)?,
        })
    }

    /// Per-image logit, shape `[B]`.
    pub fn logits(&self, ps: &ParamStore, proxy: &PerceptualProxy, images: &Tensor) -> Result<Tensor> {
        let f = proxy
            .features(images)?
            .pop()
            .ok_or_else(|| Error::Config("perceptual proxy has no layers".into()))?;
        let h = self.conv.forward(ps, &f)?.relu()?.mean_axes(&[2, 3], false)?;
        let b = h.dim(0);
        Ok(self.head.forward(ps, &h)?.reshape(&[b])?)
    }

    /// Probability that each image is real, clamped to `[1e-6, 1 - 1e-6]`.
    pub fn probability(&self, ps: &ParamStore, proxy: &PerceptualProxy, images: &Tensor) -> Result<Tensor> {
        clamp_prob(&self.logits(ps, proxy, images)?.sigmoid()?)
    }
}

fn clamp_prob(p: &Tensor) -> Result<Tensor> {
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?)
}

/// Both sides of the adversarial objective.
#[derive(Clone, Debug)]
pub struct GanTerms {
    /// Non-saturating generator loss, −λ5·E[log D(G(I))]. Minimized by the generator.
    pub generator: Tensor,
    /// λ5·E[log D(real)] + λ5·E[log(1 − D(G(I)))]. The discriminator ascends it.
    pub discriminator: Tensor,
}

impl GanTerms {
    /// Quantity the discriminator minimizes: the negated objective.
    pub fn discriminator_loss(&self) -> Result<Tensor> {
        Ok(self.discriminator.neg()?)
    }
}

/// Adversarial terms from discriminator probabilities on real and generated batches.
pub fn gan_terms(p_real: &Tensor, p_fake: &Tensor, l5: f64) -> Result<GanTerms> {
    let (p_real, p_fake) = (clamp_prob(p_real)?, clamp_prob(p_fake)?);
    let generator = p_fake.ln()?.mean()?.scale(-l5)?;
    let real = p_real.ln()?.mean()?;
    let fake = p_fake.neg()?.add_scalar(1.0)?.ln()?.mean()?;
    Ok(GanTerms {
        generator,
        discriminator: real.add(&fake)?.scale(l5)?,
    })
}

pub fn gan_loss(
    real: &Tensor,
    generated: &Tensor,
    disc: &Discriminator,
    ps: &ParamStore,
    proxy: &PerceptualProxy,
    w: &LossWeights,
) -> Result<GanTerms> {
    let p_real = disc.probability(ps, proxy, &batched(real)?)?;
    let p_fake = disc.probability(ps, proxy, &batched(generated)?)?;
    gan_terms(&p_real, &p_fake, w.l5)
}

/// λ_r·L_r + λ_d·L_d + λ_g·L_g.
pub fn total_loss(l_r: &Tensor, l_d: &Tensor, l_g: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(l_r
        .scale(w.lambda_r)?
        .add(&l_d.scale(w.lambda_d)?)?
        .add(&l_g.scale(w.lambda_g)?)?)
}

/// Peak signal-to-noise ratio for images in [0,1], capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(i, t)| t * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(i, t)| t * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 windows and channels, for images in [0,1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (a, b) = (batched(a)?, batched(b)?);
    let (n, c, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(s, t)| s * t).collect::<Vec<f64>>();
        let mx = filter_valid(x, h, w, &taps);
        let my = filter_valid(y, h, w, &taps);
        let sxx = filter_valid(&prod(x, x), h, w, &taps);
        let syy = filter_valid(&prod(y, y), h, w, &taps);
        let sxy = filter_valid(&prod(x, y), h, w, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}
