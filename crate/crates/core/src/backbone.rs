//! Small multi-view transformer: patch tokens with an injected intrinsics
//! token, a shared-weight encoder, a cross-view decoder and two DPT-style
//! heads that predict one Gaussian per input pixel.

use diffcore::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gscene::{unproject_depth_tensor, Camera};
use crate::nn::{uniform, Attention, Conv2d, LayerNorm, Linear, ParamStore, Upconv};
use crate::rasterizer::SplatTensors;

/// Raw parameter-head channels before the feature block: log-scale (3),
/// rotation (4), opacity logit (1), colour (3).
pub const GEOMETRY_CHANNELS: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mlp_ratio: usize,
    /// Width of the DPT ladder; the last two stages use half of it.
    pub head_channels: usize,
    pub feature_dim: usize,
    /// Channels of the detail grid consumed at the quarter-resolution stage.
    pub detail_channels: usize,
    /// Depth the head predicts before training.
    pub depth_init: f64,
    /// Initial Gaussian scale in pixels of the owning view.
    pub pixel_sigma: f64,
    pub opacity_init: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 256,
            patch: 16,
            d_model: 128,
            heads: 4,
            enc_blocks: 4,
            dec_blocks: 4,
            mlp_ratio: 4,
            head_channels: 32,
            feature_dim: 8,
            detail_channels: 16,
            depth_init: 3.0,
            pixel_sigma: 0.6,
            opacity_init: 2.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if self.patch == 0 || s % self.patch != 0 {
            return Err(Error::Config(format!("image size {s} is not divisible by patch {}", self.patch)));
        }
        if self.patch != 16 {
            return Err(Error::Config(format!(
                "the head upsamples by 16 in four stages; patch {} is unsupported",
                self.patch
            )));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.head_channels < 2 || self.head_channels % 2 != 0 {
            return Err(Error::Config(format!("head_channels {} must be even", self.head_channels)));
        }
        if !(self.depth_init > 0.0 && self.pixel_sigma > 0.0) {
            return Err(Error::Config("depth_init and pixel_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn param_channels(&self) -> usize {
        GEOMETRY_CHANNELS + self.feature_dim
    }
}

/// Pre-LN transformer block: self-attention then MLP.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

fn mlp(ps: &ParamStore, fc1: &Linear, fc2: &Linear, x: &Tensor) -> Result<Tensor> {
    fc2.forward(ps, &fc1.forward(ps, x)?.gelu()?)
}

impl EncoderBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.d_model * cfg.mlp_ratio);
        Ok(EncoderBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            attn: Attention::new(ps, &format!("{name}.attn"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, h, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), h, d, rng)?,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let n = self.ln1.forward(ps, x)?;
        let x = x.add(&self.attn.forward(ps, &n, &n, None)?)?;
        Ok(x.add(&mlp(ps, &self.fc1, &self.fc2, &self.ln2.forward(ps, &x)?)?)?)
    }
}

/// Per-view self-attention, attention over all views' tokens, MLP.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl DecoderBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.d_model * cfg.mlp_ratio);
        Ok(DecoderBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d)?,
            self_attn: Attention::new(ps, &format!("{name}.self"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d)?,
            cross_attn: Attention::new(ps, &format!("{name}.cross"), d, cfg.heads, rng)?,
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), d)?,
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, h, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), h, d, rng)?,
        })
    }

    /// `x` is `[V, N, d]`. With `cross_view` off the second attention only
    /// sees the view's own tokens.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor, cross_view: bool) -> Result<Tensor> {
        let (v, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        let h = self.ln1.forward(ps, x)?;
        let x = x.add(&self.self_attn.forward(ps, &h, &h, None)?)?;
        let h = self.ln2.forward(ps, &x)?;
        let kv = if cross_view {
            h.reshape(&[1, v * n, d])?.index_select(0, &vec![0; v])?
        } else {
            h.clone()
        };
        let x = x.add(&self.cross_attn.forward(ps, &h, &kv, None)?)?;
        Ok(x.add(&mlp(ps, &self.fc1, &self.fc2, &self.ln3.forward(ps, &x)?)?)?)
    }
}

/// Progressive ×2 upsampling from the token grid to pixels. Optional extra
/// inputs join at quarter resolution (`mid`) and at full resolution (`skip`).
#[derive(Clone, Debug)]
pub struct DptHead {
    proj: Conv2d,
    up8: Upconv,
    conv8: Conv2d,
    up4: Upconv,
    conv4: Conv2d,
    up2: Upconv,
    conv2: Conv2d,
    up1: Upconv,
    conv1: Conv2d,
    pub out: Conv2d,
    mid_channels: usize,
    skip_channels: usize,
}

impl DptHead {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        c: usize,
        mid_channels: usize,
        skip_channels: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = c / 2;
        Ok(DptHead {
            proj: Conv2d::new(ps, &format!("{name}.proj"), cin, c, 1, 1, rng)?,
            up8: Upconv::new(ps, &format!("{name}.up8"), c, c, rng)?,
            conv8: Conv2d::new(ps, &format!("{name}.conv8"), c, c, 3, 1, rng)?,
            up4: Upconv::new(ps, &format!("{name}.up4"), c, c, rng)?,
            conv4: Conv2d::new(ps, &format!("{name}.conv4"), c + mid_channels, c, 3, 1, rng)?,
            up2: Upconv::new(ps, &format!("{name}.up2"), c, h, rng)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), h, h, 3, 1, rng)?,
            up1: Upconv::new(ps, &format!("{name}.up1"), h, h, rng)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), h + skip_channels, h, 3, 1, rng)?,
            out: Conv2d::zeros(ps, &format!("{name}.out"), h, cout, 1, 1)?,
            mid_channels,
            skip_channels,
        })
    }

    fn join(x: Tensor, extra: Option<&Tensor>, channels: usize, what: &str) -> Result<Tensor> {
        if channels == 0 {
            return Ok(x);
        }
        let want = [x.dim(0), channels, x.dim(2), x.dim(3)];
        match extra {
            Some(e) if e.shape() == want => Ok(Tensor::concat(&[&x, e], 1)?),
            Some(e) => Err(Error::Contract(format!("{what} grid {:?} does not match {want:?}", e.shape()))),
            None => Ok(Tensor::concat(&[&x, &Tensor::zeros(&want)], 1)?),
        }
    }

    /// `grid` is `[V, cin, h, w]` on the token grid; returns `[V, cout, 16h, 16w]`.
    pub fn forward(&self, ps: &ParamStore, grid: &Tensor, mid: Option<&Tensor>, skip: Option<&Tensor>) -> Result<Tensor> {
        let x = self.proj.forward(ps, grid)?.gelu()?;
        let x = self.up8.forward(ps, &x)?.gelu()?;
        let x = self.conv8.forward(ps, &x)?.gelu()?;
        let x = self.up4.forward(ps, &x)?.gelu()?;
        let x = Self::join(x, mid, self.mid_channels, "detail")?;
        let x = self.conv4.forward(ps, &x)?.gelu()?;
        let x = self.up2.forward(ps, &x)?.gelu()?;
        let x = self.conv2.forward(ps, &x)?.gelu()?;
        let x = self.up1.forward(ps, &x)?.gelu()?;
        let x = Self::join(x, skip, self.skip_channels, "image skip")?;
        let x = self.conv1.forward(ps, &x)?.gelu()?;
        self.out.forward(ps, &x)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub pos: String,
    pub intrinsics: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub depth_head: DptHead,
    pub param_head: DptHead,
}

/// Everything one forward pass produces, per input view.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `[V, N, d]`.
    pub encoded: Tensor,
    /// `[V, N, d]`.
    pub decoded: Tensor,
    /// `[V, 1, H, W]`, strictly positive.
    pub depth: Tensor,
    /// `[V, 11 + D, H, W]` pre-activation Gaussian parameters.
    pub params: Tensor,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let n = cfg.grid() * cfg.grid();
        let pos = format!("{name}.pos");
        ps.insert(&pos, uniform(rng, n * d, 0.02), &[n, d])?;
        let encoder = (0..cfg.enc_blocks)
            .map(|i| EncoderBlock::new(ps, &format!("{name}.enc{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.dec_blocks)
            .map(|i| DecoderBlock::new(ps, &format!("{name}.dec{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        let c = cfg.head_channels;
        let depth_head = DptHead::new(ps, &format!("{name}.depth"), 2 * d, c, 0, 0, 1, rng)?;
        let param_head = DptHead::new(
            ps,
            &format!("{name}.param"),
            2 * d,
            c,
            cfg.detail_channels,
            3,
            cfg.param_channels(),
            rng,
        )?;
        ps.set(&depth_head.out.b, vec![cfg.depth_init.ln()])?;
        let mut bias = vec![0.0; cfg.param_channels()];
        bias[3] = 1.0;
        bias[7] = cfg.opacity_init;
        ps.set(&param_head.out.b, bias)?;
        let patch_embed = Linear::new(ps, &format!("{name}.patch"), 3 * cfg.patch * cfg.patch, d, rng)?;
        let intrinsics = Linear::new(ps, &format!("{name}.intr"), 4, d, rng)?;
        // Geometry rows stay zero so training starts from the bias values.
        // Feature rows get a random init: the refiner's guidance weights
        // start at zero, and with both sides zero neither gets a gradient.
        let h = c / 2;
        let mut w = ps.get(&param_head.out.w)?.to_vec();
        let feat = uniform(rng, cfg.feature_dim * h, (6.0 / h as f64).sqrt());
        w[GEOMETRY_CHANNELS * h..].copy_from_slice(&feat);
        ps.set(&param_head.out.w, w)?;
        Ok(Backbone {
            patch_embed,
            pos,
            intrinsics,
            encoder,
            decoder,
            depth_head,
            param_head,
            cfg,
        })
    }

    /// Patch embeddings without the positional term, `[V, N, d]`.
    pub fn embed_patches(&self, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let &[v, 3, h, w] = images.shape() else {
            return Err(Error::Contract(format!("expected images [V,3,H,W], got {:?}", images.shape())));
        };
        let p = self.cfg.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Contract(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
        }
        let (hp, wp) = (h / p, w / p);
        let flat = images
            .reshape(&[v, 3, hp, p, wp, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[v, hp * wp, 3 * p * p])?;
        self.patch_embed.forward(ps, &flat)
    }

    /// Patch embeddings plus learned positions.
    pub fn patchify(&self, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let t = self.embed_patches(ps, images)?;
        let pos = ps.get(&self.pos)?;
        if t.dim(1) != pos.dim(0) {
            return Err(Error::Contract(format!(
                "{} patches but positional table has {}",
                t.dim(1),
                pos.dim(0)
            )));
        }
        Ok(t.add(pos)?)
    }

    /// `[V, 1, d]` token from normalized `[fx/W, fy/H, cx/W, cy/H]`.
    pub fn intrinsics_token(&self, ps: &ParamStore, cams: &[Camera]) -> Result<Tensor> {
        let k: Vec<f64> = cams
            .iter()
            .flat_map(|c| {
                let (w, h) = (c.width as f64, c.height as f64);
                [c.fx / w, c.fy / h, c.cx / w, c.cy / h]
            })
            .collect();
        let t = Tensor::new(k, &[cams.len(), 1, 4])?;
        self.intrinsics.forward(ps, &t)
    }

    /// Broadcast-adds the intrinsics token, then runs the shared encoder.
    pub fn encode(&self, ps: &ParamStore, tokens: &Tensor, intr: &Tensor) -> Result<Tensor> {
        let mut x = tokens.add(intr)?;
        for b in &self.encoder {
            x = b.forward(ps, &x)?;
        }
        Ok(x)
    }

    pub fn decode_crossview(&self, ps: &ParamStore, tokens: &Tensor, cross_view: bool) -> Result<Tensor> {
        let mut x = tokens.clone();
        for b in &self.decoder {
            x = b.forward(ps, &x, cross_view)?;
        }
        Ok(x)
    }

    /// Encoder and decoder tokens stacked channel-wise on the token grid.
    fn head_input(&self, encoded: &Tensor, decoded: &Tensor) -> Result<Tensor> {
        let (v, n, d) = (decoded.dim(0), decoded.dim(1), decoded.dim(2));
        let g = self.cfg.grid();
        if n != g * g {
            return Err(Error::Contract(format!("{n} tokens do not form a {g}x{g} grid")));
        }
        let both = Tensor::concat(&[encoded, decoded], 2)?;
        Ok(both.permute(&[0, 2, 1])?.reshape(&[v, 2 * d, g, g])?)
    }

    /// Positive depth `[V, 1, H, W]`.
    pub fn depth(&self, ps: &ParamStore, encoded: &Tensor, decoded: &Tensor) -> Result<Tensor> {
        let x = self.head_input(encoded, decoded)?;
        Ok(self.depth_head.forward(ps, &x, None, None)?.exp()?)
    }

    /// Pre-activation Gaussian parameters `[V, 11 + D, H, W]`. `detail` is
    /// `[V, C_detail, H/4, W/4]`; `None` feeds zeros.
    pub fn gaussian_params(
        &self,
        ps: &ParamStore,
        encoded: &Tensor,
        decoded: &Tensor,
        detail: Option<&Tensor>,
        images: &Tensor,
    ) -> Result<Tensor> {
        let x = self.head_input(encoded, decoded)?;
        self.param_head.forward(ps, &x, detail, Some(images))
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        images: &Tensor,
        cams: &[Camera],
        detail: Option<&Tensor>,
    ) -> Result<BackboneOutput> {
        if images.rank() != 4 || images.dim(0) != cams.len() {
            return Err(Error::Contract(format!(
                "{} cameras for images {:?}",
                cams.len(),
                images.shape()
            )));
        }
        if cams.is_empty() {
            return Err(Error::Contract("backbone needs at least one view".into()));
        }
        let tokens = self.patchify(ps, images)?;
        let encoded = self.encode(ps, &tokens, &self.intrinsics_token(ps, cams)?)?;
        let decoded = self.decode_crossview(ps, &encoded, true)?;
        let depth = self.depth(ps, &encoded, &decoded)?;
        let params = self.gaussian_params(ps, &encoded, &decoded, detail, images)?;
        Ok(BackboneOutput {
            encoded,
            decoded,
            depth,
            params,
        })
    }
}

/// Turns per-pixel predictions into one Gaussian per pixel of every view,
/// all expressed in the frame `cams` are relative to.
///
/// Centres are unprojected along each pixel's ray. Scales are offset so that
/// a zero prediction gives a Gaussian `pixel_sigma` pixels wide, rotations
/// default to identity, colours are a residual on the input pixel.
pub fn splats_from_views(
    out: &BackboneOutput,
    images: &Tensor,
    cams: &[Camera],
    cfg: &BackboneConfig,
) -> Result<SplatTensors> {
    let &[v, p, h, w] = out.params.shape() else {
        return Err(Error::Contract(format!("parameter map {:?} is not [V,P,H,W]", out.params.shape())));
    };
    if p != cfg.param_channels() || cams.len() != v || images.shape() != [v, 3, h, w] {
        return Err(Error::Contract(format!(
            "parameter map {:?}, images {:?} and {} cameras disagree",
            out.params.shape(),
            images.shape(),
            cams.len()
        )));
    }
    let hw = h * w;
    let mut means = Vec::with_capacity(v);
    let mut scale_offset = Vec::with_capacity(v * hw);
    for (i, cam) in cams.iter().enumerate() {
        if (cam.width, cam.height) != (w, h) {
            return Err(Error::Contract(format!(
                "camera {i} is {}x{}, predictions are {w}x{h}",
                cam.width, cam.height
            )));
        }
        let depth = out.depth.narrow(0, i, 1)?;
        means.push(unproject_depth_tensor(&depth, cam)?);
        scale_offset.extend(std::iter::repeat((cfg.pixel_sigma / cam.fx).ln()).take(hw));
    }
    let means = Tensor::concat(&means.iter().collect::<Vec<_>>(), 0)?;
    let rows = |t: &Tensor| -> Result<Tensor> {
        let c = t.dim(1);
        Ok(t.permute(&[0, 2, 3, 1])?.reshape(&[v * hw, c])?)
    };
    let raw = rows(&out.params)?;
    let log_depth = out.depth.reshape(&[v * hw, 1])?.ln()?;
    let offset = log_depth.add(&Tensor::new(scale_offset, &[v * hw, 1])?)?;
    let d = cfg.feature_dim;
    Ok(SplatTensors {
        means,
        log_scales: raw.narrow(1, 0, 3)?.add(&offset)?,
        quats: raw.narrow(1, 3, 4)?,
        opacity_logits: raw.narrow(1, 7, 1)?.reshape(&[v * hw])?,
        colors: raw.narrow(1, 8, 3)?.add(&rows(images)?)?,
        features: if d == 0 {
            Tensor::zeros(&[v * hw, 0])
        } else {
            raw.narrow(1, GEOMETRY_CHANNELS, d)?
        },
    })
}
