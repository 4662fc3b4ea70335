//! Pipeline configuration, JSON loading and `key=value` overrides.

use std::path::Path;

use featsplat::backbone::BackboneConfig;
use featsplat::detailmod::{DetailConfig, FftMode};
use featsplat::losses::LossWeights;
use featsplat::rasterizer::RasterConfig;
use featsplat::refiner::{MixMode, RefinerConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Gaussian feature dimension D.
    pub feature_dim: usize,
    /// Refiner latent channels.
    pub latent_channels: usize,
    /// Fraction of spectral bins the detail module keeps.
    pub k_fraction: f64,
    pub resolution: Resolution,
    pub tile_size: usize,
    /// Background colour of synthetic scenes and of every render.
    pub background: [f64; 3],
    /// Input views per training sample; one more view is the target.
    pub input_views: usize,
    pub synth: SynthConfig,
    pub backbone: BackboneSettings,
    pub detail: DetailSettings,
    pub refiner: RefinerSettings,
    pub feature_cnn: FeatureCnnSettings,
    pub schedule: Schedule,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub proxy_seed: u64,
    pub degradation: Degradation,
    /// Parameter-name prefixes kept frozen during joint training.
    pub stage3_freeze: Vec<String>,
    /// The last `test_scenes` scenes of a dataset are held out.
    pub test_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Resolution {
    pub backbone: usize,
    pub detail: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub gaussians_per_scene: usize,
    pub views_per_scene: usize,
    /// Gaussians of the ground plane, taken out of `gaussians_per_scene`.
    pub ground_fraction: f64,
    pub clusters: usize,
    /// Angular extent of the camera arc.
    pub arc_degrees: f64,
    /// Uniform jitter added to each camera's azimuth and elevation.
    pub jitter_degrees: f64,
    pub radius: f64,
    pub fov_degrees: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSettings {
    pub d_model: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub mlp_ratio: usize,
    pub head_channels: usize,
    pub detail_channels: usize,
    pub depth_init: f64,
    pub pixel_sigma: f64,
    pub opacity_init: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetailSettings {
    pub enabled: bool,
    /// `false` keeps only the spatial CNN branch.
    pub frequency: bool,
    pub score_hidden: usize,
    pub fft_mode: FftMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mix {
    Joint,
    PerView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSettings {
    pub enabled: bool,
    /// Feed rendered Gaussian features to the U-Net.
    pub guided: bool,
    pub base_width: usize,
    pub levels: usize,
    pub heads: usize,
    pub mix: Mix,
    pub disc_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureCnnSettings {
    pub enabled: bool,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_refiner: f64,
    pub lr_discriminator: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Degradation {
    /// Standard deviation of the additive noise on stage-2 input renders.
    pub noise_std: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            feature_dim: 8,
            latent_channels: 8,
            k_fraction: 0.25,
            resolution: Resolution::default(),
            tile_size: 16,
            background: [0.55, 0.65, 0.8],
            input_views: 2,
            synth: SynthConfig::default(),
            backbone: BackboneSettings::default(),
            detail: DetailSettings::default(),
            refiner: RefinerSettings::default(),
            feature_cnn: FeatureCnnSettings::default(),
            schedule: Schedule::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            proxy_seed: 0x5eed,
            degradation: Degradation::default(),
            stage3_freeze: Vec::new(),
            test_scenes: 1,
        }
    }
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution {
            backbone: 256,
            detail: 512,
        }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 4,
            gaussians_per_scene: 1500,
            views_per_scene: 3,
            ground_fraction: 0.4,
            clusters: 4,
            arc_degrees: 30.0,
            jitter_degrees: 3.0,
            radius: 4.0,
            fov_degrees: 50.0,
        }
    }
}

impl Default for BackboneSettings {
    fn default() -> Self {
        let b = BackboneConfig::default();
        BackboneSettings {
            d_model: b.d_model,
            heads: b.heads,
            enc_blocks: b.enc_blocks,
            dec_blocks: b.dec_blocks,
            mlp_ratio: b.mlp_ratio,
            head_channels: b.head_channels,
            detail_channels: b.detail_channels,
            depth_init: 4.0,
            pixel_sigma: b.pixel_sigma,
            opacity_init: b.opacity_init,
        }
    }
}

impl Default for DetailSettings {
    fn default() -> Self {
        DetailSettings {
            enabled: true,
            frequency: true,
            score_hidden: 16,
            fft_mode: FftMode::PerChannel,
        }
    }
}

impl Default for RefinerSettings {
    fn default() -> Self {
        let r = RefinerConfig::default();
        RefinerSettings {
            enabled: true,
            guided: true,
            base_width: r.base_width,
            levels: r.levels,
            heads: r.heads,
            mix: Mix::Joint,
            disc_hidden: 16,
        }
    }
}

impl Default for FeatureCnnSettings {
    fn default() -> Self {
        FeatureCnnSettings {
            enabled: false,
            hidden: 16,
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            stage1_steps: 2000,
            stage2_steps: 1000,
            stage3_steps: 500,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_backbone: 3e-4,
            lr_refiner: 1e-4,
            lr_discriminator: 1e-4,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation { noise_std: 0.05 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON and
    /// fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
                let slot = obj
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
                if i + 1 == parts.len() {
                    *slot = value.clone();
                    break;
                }
                node = slot;
            }
        }
        let cfg: PipelineConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.resolution;
        if !r.backbone.is_power_of_two() || !r.detail.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolutions must be powers of two, got {} and {}",
                r.backbone, r.detail
            )));
        }
        if r.detail != 2 * r.backbone {
            return Err(Error::Config(format!(
                "detail resolution {} must be twice the backbone resolution {}",
                r.detail, r.backbone
            )));
        }
        if r.backbone < 32 {
            return Err(Error::Config(format!("backbone resolution {} is below 32", r.backbone)));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::Config(format!("k_fraction {} outside (0, 1]", self.k_fraction)));
        }
        if self.input_views == 0 || self.synth.views_per_scene <= self.input_views {
            return Err(Error::Config(format!(
                "{} views per scene cannot supply {} inputs plus a target",
                self.synth.views_per_scene, self.input_views
            )));
        }
        if self.tile_size == 0 || self.latent_channels == 0 {
            return Err(Error::Config("tile_size and latent_channels must be positive".into()));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background must lie in [0, 1]".into()));
        }
        if self.feature_cnn.enabled && self.refiner.enabled {
            return Err(Error::Config("feature_cnn and refiner are alternative post-processes".into()));
        }
        if self.optim.clip <= 0.0 {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        self.loss.validate()?;
        self.backbone_config().validate()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        BackboneConfig {
            image_size: self.resolution.backbone,
            patch: 16,
            d_model: b.d_model,
            heads: b.heads,
            enc_blocks: b.enc_blocks,
            dec_blocks: b.dec_blocks,
            mlp_ratio: b.mlp_ratio,
            head_channels: b.head_channels,
            feature_dim: self.feature_dim,
            detail_channels: b.detail_channels,
            depth_init: b.depth_init,
            pixel_sigma: b.pixel_sigma,
            opacity_init: b.opacity_init,
        }
    }

    pub fn detail_config(&self) -> DetailConfig {
        DetailConfig {
            channels: self.backbone.detail_channels,
            k_fraction: self.k_fraction,
            height: self.resolution.detail,
            width: self.resolution.detail,
            score_hidden: self.detail.score_hidden,
            frequency: self.detail.frequency,
            fft_mode: self.detail.fft_mode,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            latent_channels: self.latent_channels,
            feature_dim: self.feature_dim,
            base_width: self.refiner.base_width,
            levels: self.refiner.levels,
            heads: self.refiner.heads,
        }
    }

    pub fn mix_mode(&self) -> MixMode {
        match self.refiner.mix {
            Mix::Joint => MixMode::Joint,
            Mix::PerView => MixMode::PerView,
        }
    }

    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig {
            tile_size: self.tile_size,
            ..RasterConfig::default()
        }
    }
}

/// Named model configurations, one per ablation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Backbone only.
    Base,
    /// Backbone with the spatial-only detail module.
    CnnDpm,
    /// Backbone with the dual-domain detail module.
    DdDpm,
    /// DD-DPM plus a two-layer CNN over the rendered image and features.
    GsFeatureCnn,
    /// DD-DPM plus the one-step refiner without Gaussian features.
    Sd,
    /// DD-DPM plus the feature-guided refiner.
    FeatureGuidedSd,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Base,
        Preset::CnnDpm,
        Preset::DdDpm,
        Preset::GsFeatureCnn,
        Preset::Sd,
        Preset::FeatureGuidedSd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Base => "base",
            Preset::CnnDpm => "cnn_dpm",
            Preset::DdDpm => "dd_dpm",
            Preset::GsFeatureCnn => "gs_feature_cnn",
            Preset::Sd => "sd",
            Preset::FeatureGuidedSd => "feature_guided_sd",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s}")))
    }

    /// `cfg` with this preset's modules switched on and the rest off.
    pub fn apply(self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut c = cfg.clone();
        let (detail, frequency, cnn, refiner, guided) = match self {
            Preset::Base => (false, false, false, false, false),
            Preset::CnnDpm => (true, false, false, false, false),
            Preset::DdDpm => (true, true, false, false, false),
            Preset::GsFeatureCnn => (true, true, true, false, false),
            Preset::Sd => (true, true, false, true, false),
            Preset::FeatureGuidedSd => (true, true, false, true, true),
        };
        c.detail.enabled = detail;
        c.detail.frequency = frequency;
        c.feature_cnn.enabled = cnn;
        c.refiner.enabled = refiner;
        c.refiner.guided = guided;
        c
    }
}
