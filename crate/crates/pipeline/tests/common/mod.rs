#![allow(dead_code)]

use std::path::Path;

use featsplat_pipeline::synth::{synth_dataset, Dataset, SceneData, Split};
use featsplat_pipeline::PipelineConfig;

/// Small enough for a training step to take a few milliseconds.
pub fn tiny_cfg() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.resolution.backbone = 32;
    c.resolution.detail = 64;
    c.backbone.d_model = 32;
    c.backbone.heads = 2;
    c.backbone.enc_blocks = 1;
    c.backbone.dec_blocks = 1;
    c.backbone.mlp_ratio = 2;
    c.backbone.head_channels = 8;
    c.backbone.detail_channels = 4;
    c.detail.score_hidden = 4;
    c.refiner.base_width = 8;
    c.refiner.levels = 1;
    c.refiner.heads = 2;
    c.refiner.disc_hidden = 8;
    c.synth.num_scenes = 2;
    c.synth.gaussians_per_scene = 200;
    c.synth.clusters = 2;
    c.test_scenes = 1;
    c.schedule.stage1_steps = 3;
    c.schedule.stage2_steps = 3;
    c.schedule.stage3_steps = 3;
    c
}

pub fn make_data(dir: &Path, cfg: &PipelineConfig) -> Vec<SceneData> {
    synth_dataset(dir, cfg, cfg.seed).unwrap();
    Dataset::open(dir).unwrap().load(Split::Train, cfg).unwrap()
}
