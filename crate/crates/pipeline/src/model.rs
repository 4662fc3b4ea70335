//! The full model: backbone (+ detail module) producing Gaussians, the
//! rasterizer, and an optional post-process (refiner or feature CNN).

use diffcore::Tensor;
use featsplat::backbone::{splats_from_views, Backbone};
use featsplat::detailmod::DetailModule;
use featsplat::gscene::Camera;
use featsplat::losses::{Discriminator, PerceptualProxy};
use featsplat::nn::ParamStore;
use featsplat::rasterizer::{render, RenderTensors, SplatTensors};
use featsplat::refiner::{FeatureCnn, Refiner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::synth::View;

/// Parameter-name prefixes of each module.
pub const BACKBONE: &str = "bb.";
pub const DETAIL: &str = "dd.";
pub const REFINER: &str = "rf.";
pub const FEATURE_CNN: &str = "fc.";
pub const DISCRIMINATOR: &str = "disc.";

pub struct Model {
    pub cfg: PipelineConfig,
    pub ps: ParamStore,
    pub backbone: Backbone,
    pub detail: Option<DetailModule>,
    pub refiner: Option<Refiner>,
    pub feature_cnn: Option<FeatureCnn>,
    pub disc: Option<Discriminator>,
    pub proxy: PerceptualProxy,
}

/// Gaussians predicted from a set of input views, in the first view's frame.
pub struct Reconstruction {
    pub splats: SplatTensors,
    /// Camera of the first input view; targets are expressed relative to it.
    pub reference: Camera,
}

/// Render of one target plus the post-processed image, if any.
pub struct TargetOutput {
    pub render: RenderTensors,
    pub refined: Option<Tensor>,
}

impl Model {
    /// Fresh initialization; every module gets its own RNG stream.
    pub fn new(cfg: &PipelineConfig) -> Result<Model> {
        cfg.validate()?;
        let rng = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream);
            r
        };
        let mut ps = ParamStore::new();
        let backbone = Backbone::new(&mut ps, "bb", cfg.backbone_config(), &mut rng(1))?;
        let detail = if cfg.detail.enabled {
            Some(DetailModule::new(&mut ps, "dd", cfg.detail_config(), &mut rng(2))?)
        } else {
            None
        };
        let (refiner, disc) = if cfg.refiner.enabled {
            (
                Some(Refiner::new(&mut ps, "rf", cfg.refiner_config(), &mut rng(3))?),
                Some(Discriminator::new(&mut ps, "disc", cfg.refiner.disc_hidden, &mut rng(4))?),
            )
        } else {
            (None, None)
        };
        let feature_cnn = if cfg.feature_cnn.enabled {
            Some(FeatureCnn::new(&mut ps, "fc", cfg.feature_dim, cfg.feature_cnn.hidden, 8, &mut rng(5))?)
        } else {
            None
        };
        Ok(Model {
            cfg: cfg.clone(),
            ps,
            backbone,
            detail,
            refiner,
            feature_cnn,
            disc,
            proxy: PerceptualProxy::new(cfg.proxy_seed)?,
        })
    }

    /// Gaussians from `inputs`, expressed in the frame of `inputs[0]`.
    pub fn reconstruct(&self, inputs: &[&View]) -> Result<Reconstruction> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("reconstruction needs at least one input view".into()))?;
        let reference = first.cam.clone();
        let images = stack(inputs.iter().map(|v| &v.image))?;
        let cams: Vec<Camera> = inputs.iter().map(|v| v.cam.relative_to(&reference)).collect();
        let detail = match &self.detail {
            Some(d) => Some(d.forward(&self.ps, &stack(inputs.iter().map(|v| &v.image_hi))?)?),
            None => None,
        };
        let out = self.backbone.forward(&self.ps, &images, &cams, detail.as_ref())?;
        let splats = splats_from_views(&out, &images, &cams, &self.backbone.cfg)?;
        Ok(Reconstruction { splats, reference })
    }

    pub fn render(&self, rec: &Reconstruction, cam: &Camera) -> Result<RenderTensors> {
        Ok(render(
            &rec.splats,
            &cam.relative_to(&rec.reference),
            self.cfg.background,
            &self.cfg.raster_config(),
        )?)
    }

    /// Renders `target` and applies the configured post-process. The
    /// refiner sees the input views as references; with guidance on it also
    /// gets the Gaussian features rendered from every camera involved.
    pub fn predict(&self, rec: &Reconstruction, inputs: &[&View], target: &Camera) -> Result<TargetOutput> {
        let r = self.render(rec, target)?;
        let refined = if let Some(rf) = &self.refiner {
            let refs = stack(inputs.iter().map(|v| &v.image))?;
            let (tf, rfeat) = if self.cfg.refiner.guided {
                let feats = inputs
                    .iter()
                    .map(|v| Ok(self.render(rec, &v.cam)?.feature))
                    .collect::<Result<Vec<_>>>()?;
                (r.feature.clone(), stack(feats.iter())?)
            } else {
                let f = r.feature.shape().to_vec();
                let mut rf_shape = vec![inputs.len()];
                rf_shape.extend_from_slice(&f);
                (Tensor::zeros(&f), Tensor::zeros(&rf_shape))
            };
            Some(rf.denoise_onestep(&self.ps, &r.color, Some(&refs), &tf, Some(&rfeat), self.cfg.mix_mode())?)
        } else if let Some(fc) = &self.feature_cnn {
            Some(fc.forward(&self.ps, &r.color, &r.feature)?)
        } else {
            None
        };
        Ok(TargetOutput { render: r, refined })
    }

    /// Names of the trainable parameters starting with any of `prefixes`.
    pub fn names_with(&self, prefixes: &[&str]) -> Vec<String> {
        self.ps
            .names()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)) && !self.ps.is_frozen(n))
            .cloned()
            .collect()
    }
}

/// Stacks `[C,H,W]` tensors into `[N,C,H,W]`.
pub fn stack<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let parts: Vec<Tensor> = items.map(|t| t.unsqueeze(0)).collect::<std::result::Result<_, _>>()?;
    if parts.is_empty() {
        return Err(Error::Contract("nothing to stack".into()));
    }
    Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?)
}
