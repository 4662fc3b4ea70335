//! One-step feature-guided restoration: a deterministic latent encoder, a
//! small U-Net whose bottleneck attends jointly over all views, and a decoder
//! that adds a residual to the rendered image.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use diffcore::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, LayerNorm, ParamStore, Upconv};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub latent_channels: usize,
    /// Channels of the rendered Gaussian feature map.
    pub feature_dim: usize,
    pub base_width: usize,
    /// Number of down (and up) blocks around the attention bottleneck.
    pub levels: usize,
    pub heads: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            latent_channels: 8,
            feature_dim: 8,
            base_width: 32,
            levels: 2,
            heads: 4,
        }
    }
}

/// How the bottleneck attention mixes views.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    /// Every token attends to the tokens of all views.
    Joint,
    /// Tokens only see their own view.
    PerView,
}

/// Self-attention over the flattened `V·h·w` token axis of `z [V, C, h, w]`,
/// returned in the same layout.
pub fn mixed_attention(ps: &ParamStore, attn: &Attention, z: &Tensor, mode: MixMode) -> Result<Tensor> {
    let &[v, c, h, w] = z.shape() else {
        return Err(Error::Contract(format!("mixed attention expects [V,C,h,w], got {:?}", z.shape())));
    };
    let n = h * w;
    let tokens = z.reshape(&[v, c, n])?.permute(&[0, 2, 1])?.reshape(&[1, v * n, c])?;
    let mask: Option<Vec<bool>> = match mode {
        MixMode::Joint => None,
        MixMode::PerView => Some(
            (0..v * n)
                .flat_map(|q| (0..v * n).map(move |k| q / n == k / n))
                .collect(),
        ),
    };
    let out = attn.forward(ps, &tokens, &tokens, mask.as_deref())?;
    Ok(out.reshape(&[v, n, c])?.permute(&[0, 2, 1])?.reshape(&[v, c, h, w])?)
}

/// Channel concatenation of the image latent and the rendered feature map.
pub fn feature_concat(latent: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (l, f) = (latent.shape(), features.shape());
    if l.len() != 4 || f.len() != 4 || l[0] != f[0] || l[2..] != f[2..] {
        return Err(Error::Contract(format!("latent {l:?} and feature map {f:?} do not align")));
    }
    Ok(Tensor::concat(&[latent, features], 1)?)
}

#[derive(Clone, Debug)]
struct UpBlock {
    up: Upconv,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Unet {
    /// First convolution; input channels beyond the latent start at zero.
    pub conv_in: Conv2d,
    down: Vec<Conv2d>,
    norm: LayerNorm,
    pub attn: Attention,
    mid: Conv2d,
    up: Vec<UpBlock>,
    pub conv_out: Conv2d,
    latent_channels: usize,
}

impl Unet {
    fn new(ps: &mut ParamStore, name: &str, cfg: &RefinerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cin = cfg.latent_channels + cfg.feature_dim;
        let c = cfg.base_width;
        let conv_in = Conv2d::new(ps, &format!("{name}.conv_in"), cin, c, 3, 1, rng)?;
        // zero the guidance channels: weight layout [cout, cin, 3, 3]
        let mut w = ps.get(&conv_in.w)?.to_vec();
        for (i, v) in w.iter_mut().enumerate() {
            if (i / 9) % cin >= cfg.latent_channels {
                *v = 0.0;
            }
        }
        ps.set(&conv_in.w, w)?;
        let widths: Vec<usize> = (0..=cfg.levels).map(|i| c << i).collect();
        let down = (0..cfg.levels)
            .map(|i| Conv2d::new(ps, &format!("{name}.down{i}"), widths[i], widths[i + 1], 3, 2, rng))
            .collect::<Result<_>>()?;
        let top = widths[cfg.levels];
        let up = (0..cfg.levels)
            .map(|i| {
                Ok(UpBlock {
                    up: Upconv::new(ps, &format!("{name}.up{i}.up"), widths[i + 1], widths[i], rng)?,
                    conv: Conv2d::new(ps, &format!("{name}.up{i}.conv"), 2 * widths[i], widths[i], 3, 1, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Unet {
            conv_in,
            down,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), top)?,
            attn: Attention::new(ps, &format!("{name}.attn"), top, cfg.heads, rng)?,
            mid: Conv2d::new(ps, &format!("{name}.mid"), top, top, 3, 1, rng)?,
            up,
            conv_out: Conv2d::zeros(ps, &format!("{name}.conv_out"), c, cfg.latent_channels, 3, 1)?,
            latent_channels: cfg.latent_channels,
        })
    }

    fn body(&self, ps: &ParamStore, x: Tensor, mode: MixMode) -> Result<Tensor> {
        let step = 1 << self.down.len();
        if x.dim(2) % step != 0 || x.dim(3) % step != 0 {
            return Err(Error::Contract(format!(
                "latent {}x{} is not divisible by {step}",
                x.dim(2),
                x.dim(3)
            )));
        }
        let mut x = x.gelu()?;
        let mut skips = Vec::with_capacity(self.down.len());
        for d in &self.down {
            skips.push(x.clone());
            x = d.forward(ps, &x)?.gelu()?;
        }
        // pre-LN attention over channels at every bottleneck position
        let normed = self.norm.forward(ps, &x.permute(&[0, 2, 3, 1])?)?.permute(&[0, 3, 1, 2])?;
        x = x.add(&mixed_attention(ps, &self.attn, &normed, mode)?)?;
        x = self.mid.forward(ps, &x)?.gelu()?;
        for (u, skip) in self.up.iter().zip(skips.iter()).rev() {
            let y = u.up.forward(ps, &x)?.gelu()?;
            x = u.conv.forward(ps, &Tensor::concat(&[&y, skip], 1)?)?.gelu()?;
        }
        self.conv_out.forward(ps, &x)
    }

    /// Latent residual `[V, C_lat, h, w]` for the fused input `[V, C_lat + D, h, w]`.
    pub fn forward(&self, ps: &ParamStore, fused: &Tensor, mode: MixMode) -> Result<Tensor> {
        let x = self.conv_in.forward(ps, fused)?;
        self.body(ps, x, mode)
    }

    /// The same network without guidance inputs: only the latent slice of
    /// the first convolution is used.
    pub fn forward_unguided(&self, ps: &ParamStore, latent: &Tensor, mode: MixMode) -> Result<Tensor> {
        let w = ps.get(&self.conv_in.w)?.narrow(1, 0, self.latent_channels)?;
        let x = latent.conv2d(&w, Some(ps.get(&self.conv_in.b)?), 1, diffcore::Padding::Same)?;
        self.body(ps, x, mode)
    }
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    encoder: [Conv2d; 3],
    pub unet: Unet,
    dec_up: [Upconv; 3],
    dec_conv: Conv2d,
    pub dec_out: Conv2d,
    unet_calls: Arc<AtomicUsize>,
}

impl Refiner {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: RefinerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.latent_channels == 0 || cfg.base_width == 0 {
            return Err(Error::Config("refiner widths must be positive".into()));
        }
        let top = cfg.base_width << cfg.levels;
        if cfg.heads == 0 || top % cfg.heads != 0 {
            return Err(Error::Config(format!("bottleneck width {top} not divisible by {} heads", cfg.heads)));
        }
        let cl = cfg.latent_channels;
        Ok(Refiner {
            encoder: [
                Conv2d::new(ps, &format!("{name}.enc1"), 3, 32, 3, 2, rng)?,
                Conv2d::new(ps, &format!("{name}.enc2"), 32, 64, 3, 2, rng)?,
                Conv2d::new(ps, &format!("{name}.enc3"), 64, cl, 3, 2, rng)?,
            ],
            unet: Unet::new(ps, &format!("{name}.unet"), &cfg, rng)?,
            dec_up: [
                Upconv::new(ps, &format!("{name}.dec1"), cl, 64, rng)?,
                Upconv::new(ps, &format!("{name}.dec2"), 64, 32, rng)?,
                Upconv::new(ps, &format!("{name}.dec3"), 32, 16, rng)?,
            ],
            dec_conv: Conv2d::new(ps, &format!("{name}.dec_conv"), 16 + 3, 16, 3, 1, rng)?,
            dec_out: Conv2d::zeros(ps, &format!("{name}.dec_out"), 16, 3, 1, 1)?,
            unet_calls: Arc::new(AtomicUsize::new(0)),
            cfg,
        })
    }

    /// Number of U-Net evaluations so far.
    pub fn unet_calls(&self) -> usize {
        self.unet_calls.load(Ordering::Relaxed)
    }

    /// Latents `[V, C_lat, H/8, W/8]` of images `[V, 3, H, W]`.
    pub fn latent_encode(&self, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let &[_, 3, h, w] = images.shape() else {
            return Err(Error::Contract(format!("expected images [V,3,H,W], got {:?}", images.shape())));
        };
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Contract(format!("image {h}x{w} is not divisible by 8")));
        }
        let x = self.encoder[0].forward(ps, images)?.gelu()?;
        let x = self.encoder[1].forward(ps, &x)?.gelu()?;
        self.encoder[2].forward(ps, &x)
    }

    /// Image from a latent `[1, C_lat, h, w]`, as a residual on `base [1, 3, 8h, 8w]`.
    pub fn decode(&self, ps: &ParamStore, latent: &Tensor, base: &Tensor) -> Result<Tensor> {
        let mut x = latent.clone();
        for u in &self.dec_up {
            x = u.forward(ps, &x)?.gelu()?;
        }
        if x.shape()[2..] != base.shape()[2..] {
            return Err(Error::Contract(format!(
                "decoded size {:?} does not match image {:?}",
                x.shape(),
                base.shape()
            )));
        }
        let x = self.dec_conv.forward(ps, &Tensor::concat(&[&x, base], 1)?)?.gelu()?;
        Ok(base.add(&self.dec_out.forward(ps, &x)?)?)
    }

    /// Single-pass refinement of `target [3, H, W]` given reference views
    /// `refs [R, 3, H, W]` (R may be 0) and rendered feature maps for the
    /// target `[D, H/8, W/8]` and references `[R, D, H/8, W/8]`.
    pub fn denoise_onestep(
        &self,
        ps: &ParamStore,
        target: &Tensor,
        refs: Option<&Tensor>,
        target_features: &Tensor,
        ref_features: Option<&Tensor>,
        mode: MixMode,
    ) -> Result<Tensor> {
        let target = target.unsqueeze(0)?;
        let tf = target_features.unsqueeze(0)?;
        let (images, features) = match (refs, ref_features) {
            (Some(r), Some(f)) => (Tensor::concat(&[&target, r], 0)?, Tensor::concat(&[&tf, f], 0)?),
            (None, None) => (target.clone(), tf),
            _ => {
                return Err(Error::Contract(
                    "reference images and reference features must be given together".into(),
                ))
            }
        };
        let latent = self.latent_encode(ps, &images)?;
        let fused = feature_concat(&latent, &features)?;
        self.unet_calls.fetch_add(1, Ordering::Relaxed);
        let eps = self.unet.forward(ps, &fused, mode)?;
        let z = latent.narrow(0, 0, 1)?.add(&eps.narrow(0, 0, 1)?)?;
        let out = self.decode(ps, &z, &target)?;
        Ok(out.reshape(&target.shape()[1..])?)
    }
}

/// Two-layer convolutional post-process on the rendered image and its
/// nearest-upsampled feature map, the simple alternative to the refiner.
#[derive(Clone, Debug)]
pub struct FeatureCnn {
    conv1: Conv2d,
    pub conv2: Conv2d,
    upsample: usize,
}

impl FeatureCnn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        upsample: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(FeatureCnn {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), 3 + feature_dim, hidden, 3, 1, rng)?,
            conv2: Conv2d::zeros(ps, &format!("{name}.conv2"), hidden, 3, 3, 1)?,
            upsample,
        })
    }

    /// `image [3, H, W]`, `features [D, H/s, W/s]` → refined `[3, H, W]`.
    pub fn forward(&self, ps: &ParamStore, image: &Tensor, features: &Tensor) -> Result<Tensor> {
        let x = image.unsqueeze(0)?;
        let f = features.unsqueeze(0)?.upsample_nearest(self.upsample)?;
        if f.shape()[2..] != x.shape()[2..] {
            return Err(Error::Contract(format!(
                "feature map {:?} does not cover image {:?}",
                features.shape(),
                image.shape()
            )));
        }
        let h = self.conv1.forward(ps, &Tensor::concat(&[&x, &f], 1)?)?.gelu()?;
        Ok(x.add(&self.conv2.forward(ps, &h)?)?.reshape(image.shape())?)
    }
}
