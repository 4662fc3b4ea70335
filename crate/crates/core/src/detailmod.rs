//! Dual-domain detail module: a frequency branch that keeps the top-scored
//! spectral bins with learned complex gains, and a small strided CNN, fused
//! by a 1×1 convolution into a grid 8× coarser than the input.

use diffcore::{fft2, ifft2, ComplexGrid, Tensor, TopK};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DetailConfig {
    /// Output channels.
    pub channels: usize,
    /// Fraction of spectral bins kept.
    pub k_fraction: f64,
    /// Input resolution the per-rank weights are sized for.
    pub height: usize,
    pub width: usize,
    pub score_hidden: usize,
    /// `false` drops the frequency branch (spatial-only ablation).
    pub frequency: bool,
    pub fft_mode: FftMode,
}

/// Whether the spectrum is taken per colour channel or of the channel mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FftMode {
    #[default]
    PerChannel,
    /// One transform of the channel mean; the filtered result is copied to
    /// all three channels.
    PerImage,
}

impl DetailConfig {
    pub fn kept_bins(&self) -> Result<usize> {
        kept_bins(self.k_fraction, self.height, self.width)
    }
}

/// `⌈k_fraction·H·W⌉`, rejecting fractions outside `(0, 1]`.
pub fn kept_bins(k_fraction: f64, h: usize, w: usize) -> Result<usize> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "k_fraction must lie in (0, 1], got {k_fraction}"
        )));
    }
    let k = (k_fraction * (h * w) as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "k_fraction {k_fraction} keeps no bins of a {h}x{w} spectrum"
        )));
    }
    Ok(k.min(h * w))
}

/// Signed frequency of bin `i` out of `n`, normalized to `[-0.5, 0.5)`.
fn freq(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64 / n as f64
    } else {
        i as f64 / n as f64 - 1.0
    }
}

/// Flat index of the bin at `-ξ` for every bin `ξ`.
pub fn mirror_indices(h: usize, w: usize) -> Vec<usize> {
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            ((h - r) % h) * w + (w - c) % w
        })
        .collect()
}

/// Importance-scored top-k spectral selection with per-rank complex gains.
#[derive(Clone, Debug)]
pub struct FrequencySelector {
    pub hidden: Linear,
    pub out: Linear,
    /// Real and imaginary parts of the per-rank gains, `[k]` each.
    pub weight_re: String,
    pub weight_im: String,
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub mode: FftMode,
    coords: Tensor,
    mirror: Vec<usize>,
}

impl FrequencySelector {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        height: usize,
        width: usize,
        k_fraction: f64,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        for (axis, n) in [("height", height), ("width", width)] {
            if !diffcore::fft::is_power_of_two(n) {
                return Err(Error::Config(format!(
                    "detail {axis} {n} is not a power of two"
                )));
            }
        }
        let k = kept_bins(k_fraction, height, width)?;
        let coords: Vec<f64> = (0..height * width)
            .flat_map(|i| [freq(i / width, height), freq(i % width, width)])
            .collect();
        ps.insert(&format!("{name}.weight_re"), vec![1.0; k], &[k])?;
        ps.insert(&format!("{name}.weight_im"), vec![0.0; k], &[k])?;
        Ok(FrequencySelector {
            hidden: Linear::new(ps, &format!("{name}.score1"), 2, hidden, rng)?,
            out: Linear::new(ps, &format!("{name}.score2"), hidden, 1, rng)?,
            weight_re: format!("{name}.weight_re"),
            weight_im: format!("{name}.weight_im"),
            k,
            height,
            width,
            mode: FftMode::PerChannel,
            coords: Tensor::new(coords, &[height * width, 2])?,
            mirror: mirror_indices(height, width),
        })
    }

    /// Importance score of every bin, `[H·W]`, row-major over the spectrum.
    pub fn scores(&self, ps: &ParamStore) -> Result<Tensor> {
        let h = self.hidden.forward(ps, &self.coords)?.gelu()?;
        Ok(self
            .out
            .forward(ps, &h)?
            .reshape(&[self.height * self.width])?)
    }

    pub fn selection(&self, ps: &ParamStore) -> Result<TopK> {
        Ok(self.scores(ps)?.topk(self.k)?)
    }

    /// Zero score layer and unit gains: every retained bin passes unchanged.
    pub fn set_identity(&self, ps: &mut ParamStore) -> Result<()> {
        let hidden = ps.get(&self.out.w)?.numel();
        ps.set(&self.out.w, vec![0.0; hidden])?;
        ps.set(self.out.bias()?, vec![0.0])?;
        ps.set(&self.weight_re, vec![1.0; self.k])?;
        ps.set(&self.weight_im, vec![0.0; self.k])
    }

    /// Score MLP whose maximum (exactly 0) sits at the DC bin and is strictly
    /// negative elsewhere; gains set to one.
    pub fn set_dc_preferring(&self, ps: &mut ParamStore) -> Result<()> {
        let hidden = ps.get(&self.out.w)?.numel();
        if hidden < 4 {
            return Err(Error::Config(
                "DC-preferring scores need at least 4 hidden units".into(),
            ));
        }
        let mut w1 = vec![0.0; 2 * hidden];
        // rows of the [2, hidden] weight: unit i reads ±u or ±v
        for (unit, (axis, sign)) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)]
            .into_iter()
            .enumerate()
        {
            w1[axis * hidden + unit] = sign;
        }
        ps.set(&self.hidden.w, w1)?;
        ps.set(self.hidden.bias()?, vec![0.0; hidden])?;
        let mut w2 = vec![0.0; hidden];
        w2[..4].iter_mut().for_each(|v| *v = -1.0);
        ps.set(&self.out.w, w2)?;
        ps.set(self.out.bias()?, vec![0.0])?;
        ps.set(&self.weight_re, vec![1.0; self.k])?;
        ps.set(&self.weight_im, vec![0.0; self.k])
    }

    /// Modulated, Hermitian-symmetrized spectrum of `x` (`[B, C, H, W]`).
    pub fn modulated_spectrum(&self, ps: &ParamStore, x: &Tensor) -> Result<ComplexGrid> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::Contract(format!(
                "frequency branch expects [B,C,H,W], got {:?}",
                x.shape()
            )));
        };
        if (h, w) != (self.height, self.width) {
            return Err(Error::Contract(format!(
                "frequency branch built for {}x{}, got {h}x{w}",
                self.height, self.width
            )));
        }
        let hw = h * w;
        let z = fft2(x)?;
        let scores = self.scores(ps)?;
        let sel = scores.topk(self.k)?;
        let idx = &sel.indices;
        // gain 2σ(s) is exactly 1 at s = 0 and carries the score gradient
        let gate = scores.index_select(0, idx)?.sigmoid()?.scale(2.0)?;
        let wr = ps.get(&self.weight_re)?.mul(&gate)?;
        let wi = ps.get(&self.weight_im)?.mul(&gate)?;
        let re = z.re.reshape(&[b, c, hw])?.index_select(2, idx)?;
        let im = z.im.reshape(&[b, c, hw])?.index_select(2, idx)?;
        let mr = re.mul(&wr)?.sub(&im.mul(&wi)?)?;
        let mi = re.mul(&wi)?.add(&im.mul(&wr)?)?;
        let zr = mr.index_scatter(2, idx, hw)?;
        let zi = mi.index_scatter(2, idx, hw)?;
        let sr = zr.add(&zr.index_select(2, &self.mirror)?)?.scale(0.5)?;
        let si = zi.sub(&zi.index_select(2, &self.mirror)?)?.scale(0.5)?;
        ComplexGrid::new(sr.reshape(&[b, c, h, w])?, si.reshape(&[b, c, h, w])?)
            .map_err(Error::from)
    }

    /// Full-resolution frequency-filtered image `F′`, same shape as `x`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            FftMode::PerChannel => Ok(ifft2(&self.modulated_spectrum(ps, x)?)?),
            FftMode::PerImage => {
                if x.rank() != 4 {
                    return Err(Error::Contract(format!(
                        "frequency branch expects [B,C,H,W], got {:?}",
                        x.shape()
                    )));
                }
                let gray = x.mean_axes(&[1], true)?;
                let f = ifft2(&self.modulated_spectrum(ps, &gray)?)?;
                Ok(f.index_select(1, &vec![0; x.dim(1)])?)
            }
        }
    }
}

/// `F′` for an image batch.
pub fn frequency_branch(sel: &FrequencySelector, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
    sel.forward(ps, x)
}

/// Three stride-2 3×3 convolutions with GELU, 3→16→32→C. Edges are
/// replicated so a constant image gives a spatially constant response.
#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub convs: [Conv2d; 3],
}

impl SpatialBranch {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(SpatialBranch {
            convs: [
                Conv2d::new(ps, &format!("{name}.conv1"), 3, 16, 3, 2, rng)?.replicate_padded(),
                Conv2d::new(ps, &format!("{name}.conv2"), 16, 32, 3, 2, rng)?.replicate_padded(),
                Conv2d::new(ps, &format!("{name}.conv3"), 32, channels, 3, 2, rng)?
                    .replicate_padded(),
            ],
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(ps, &h)?.gelu()?;
        }
        Ok(h)
    }
}

/// Spatial-domain detail grid for an image batch.
pub fn spatial_branch(branch: &SpatialBranch, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
    branch.forward(ps, x)
}

/// Channel concatenation followed by a 1×1 projection.
pub fn ddpm_fuse(ps: &ParamStore, proj: &Conv2d, freq: &Tensor, spat: &Tensor) -> Result<Tensor> {
    let (fs, ss) = (freq.shape(), spat.shape());
    if fs.len() != 4 || ss.len() != 4 || fs[0] != ss[0] || fs[2..] != ss[2..] {
        return Err(Error::Contract(format!(
            "detail grids do not align: frequency {fs:?} vs spatial {ss:?}"
        )));
    }
    proj.forward(ps, &Tensor::concat(&[freq, spat], 1)?)
}

#[derive(Clone, Debug)]
pub struct DetailModule {
    pub cfg: DetailConfig,
    pub selector: Option<FrequencySelector>,
    pub spatial: SpatialBranch,
    pub fuse: Conv2d,
}

impl DetailModule {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: DetailConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.height % 8 != 0 || cfg.width % 8 != 0 {
            return Err(Error::Config(format!(
                "detail resolution {}x{} is not divisible by 8",
                cfg.height, cfg.width
            )));
        }
        let selector = if cfg.frequency {
            Some(FrequencySelector {
                mode: cfg.fft_mode,
                ..FrequencySelector::new(
                    ps,
                    &format!("{name}.freq"),
                    cfg.height,
                    cfg.width,
                    cfg.k_fraction,
                    cfg.score_hidden,
                    rng,
                )?
            })
        } else {
            None
        };
        Ok(DetailModule {
            spatial: SpatialBranch::new(ps, &format!("{name}.spatial"), cfg.channels, rng)?,
            fuse: Conv2d::new(
                ps,
                &format!("{name}.fuse"),
                3 + cfg.channels,
                cfg.channels,
                1,
                1,
                rng,
            )?,
            selector,
            cfg,
        })
    }

    /// Fused detail features `[B, C, H/8, W/8]` for images `[B, 3, H, W]`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let spat = self.spatial.forward(ps, x)?;
        let freq = match &self.selector {
            Some(sel) => sel.forward(ps, x)?.avg_pool2d(8)?,
            None => {
                let s = x.shape();
                Tensor::zeros(&[s[0], 3, s[2] / 8, s[3] / 8])
            }
        };
        ddpm_fuse(ps, &self.fuse, &freq, &spat)
    }
}
