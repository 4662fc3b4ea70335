//! Whole-stage workflows over directories: what the CLI subcommands do.

use std::path::Path;

use diffcore::{finite_difference_check, no_grad, with_precision, Precision, Tensor};
use featsplat::losses::mse;
use featsplat::rasterizer::{render, SplatParams, SplatTensors};
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::model::{Model, BACKBONE, DETAIL, DISCRIMINATOR, FEATURE_CNN, REFINER};
use crate::synth::{Dataset, Split};
use crate::train::{make_pairs, train_stage1, train_stage2, train_stage3, write_loss_csv, LossRow};

pub const LOSS_CSV: &str = "loss.csv";

/// Stage 1 on the training split; writes the checkpoint and loss curve to `out`.
pub fn stage1(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<Vec<LossRow>> {
    let scenes = Dataset::open(data)?.load(Split::Train, cfg)?;
    let mut model = Model::new(cfg)?;
    let rows = train_stage1(&mut model, &scenes, cfg.schedule.stage1_steps, |r| log_row("stage1", r))?;
    checkpoint::save(out, &model, "stage1")?;
    write_loss_csv(&out.join(LOSS_CSV), &rows)?;
    Ok(rows)
}

/// Stage 2: builds pairs from the stage-1 model's renders and trains the
/// refiner on them. The reconstruction weights come from `stage1_ckpt`.
pub fn stage2(cfg: &PipelineConfig, data: &Path, stage1_ckpt: &Path, out: &Path) -> Result<Vec<LossRow>> {
    if !cfg.refiner.enabled {
        return Err(Error::Config("refiner training needs refiner.enabled".into()));
    }
    let scenes = Dataset::open(data)?.load(Split::Train, cfg)?;
    let mut model = Model::new(cfg)?;
    Checkpoint::read(stage1_ckpt)?.apply(&mut model.ps, &[BACKBONE, DETAIL])?;
    let pairs = make_pairs(&model, &scenes, cfg.degradation.noise_std, cfg.seed)?;
    let rows = train_stage2(&mut model, &pairs, cfg.schedule.stage2_steps, |r| log_row("stage2", r))?;
    checkpoint::save(out, &model, "stage2")?;
    write_loss_csv(&out.join(LOSS_CSV), &rows)?;
    Ok(rows)
}

/// Stage 3: joint training starting from every module in `ckpt`.
pub fn stage3(cfg: &PipelineConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<Vec<LossRow>> {
    let scenes = Dataset::open(data)?.load(Split::Train, cfg)?;
    let mut model = Model::new(cfg)?;
    Checkpoint::read(ckpt)?.apply(&mut model.ps, &[BACKBONE, DETAIL, REFINER, FEATURE_CNN, DISCRIMINATOR])?;
    let rows = train_stage3(&mut model, &scenes, cfg.schedule.stage3_steps, |r| log_row("stage3", r))?;
    checkpoint::save(out, &model, "stage3")?;
    write_loss_csv(&out.join(LOSS_CSV), &rows)?;
    Ok(rows)
}

/// Metrics of `model` on one split of `data`.
pub fn eval(model: &Model, data: &Path, split: Split) -> Result<MetricsReport> {
    let scenes = Dataset::open(data)?.load(split, &model.cfg)?;
    evaluate(model, &scenes, split.name())
}

fn log_row(stage: &str, r: &LossRow) {
    if r.step % 50 == 0 {
        log::info!("{stage} step {} loss {:.6} grad norm {:.4}", r.step, r.loss, r.grad_norm);
    }
}

/// Outcome of [`gradcheck`].
#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSummary {
    pub gaussians: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub fraction_within: f64,
    pub tolerance: f64,
}

/// Finite-difference check, in 64-bit mode, of the pixel MSE of one target
/// view with respect to the `count` most opaque Gaussians that a freshly
/// initialized model predicts for the first scene of `data`. The perceptual
/// term is left out: its ReLU kinks make central differences unreliable.
pub fn gradcheck(cfg: &PipelineConfig, data: &Path, count: usize, tolerance: f64) -> Result<GradcheckSummary> {
    with_precision(Precision::F64, || {
        let scenes = Dataset::open(data)?.load(Split::All, cfg)?;
        let scene = scenes
            .first()
            .ok_or_else(|| Error::Contract("dataset has no scenes".into()))?;
        if scene.views.len() <= cfg.input_views {
            return Err(Error::Contract("gradcheck needs one view more than input_views".into()));
        }
        let model = Model::new(cfg)?;
        let inputs: Vec<_> = scene.views[1..=cfg.input_views].iter().collect();
        let target = &scene.views[0];
        let all = no_grad(|| model.reconstruct(&inputs))?;
        let subset = most_opaque(&all.splats.to_params()?, count);
        let params = SplatTensors::from_params(&subset, true)?;
        let cam = target.cam.relative_to(&all.reference);
        let list = [
            params.means.clone(),
            params.log_scales.clone(),
            params.quats.clone(),
            params.opacity_logits.clone(),
            params.colors.clone(),
        ];
        let features = params.features.clone();
        let f = |p: &[Tensor]| -> diffcore::Result<Tensor> {
            let s = SplatTensors {
                means: p[0].clone(),
                log_scales: p[1].clone(),
                quats: p[2].clone(),
                opacity_logits: p[3].clone(),
                colors: p[4].clone(),
                features: features.clone(),
            };
            let out = render(&s, &cam, cfg.background, &cfg.raster_config())
                .map_err(|e| diffcore::Error::Contract(e.to_string()))?;
            mse(&out.color, &target.image).map_err(|e| diffcore::Error::Contract(e.to_string()))
        };
        let report = finite_difference_check(f, &list, f64::EPSILON.cbrt())?;
        let summary = GradcheckSummary {
            gaussians: subset.opacity_logits.len(),
            checked: report.checked(),
            max_rel_err: report.max_rel_err,
            fraction_within: report.fraction_within(tolerance),
            tolerance,
        };
        if summary.checked == 0 || summary.fraction_within < 1.0 {
            return Err(Error::Numeric(format!(
                "gradient check failed: {:.4} of {} coordinates within {tolerance}, worst {:.3e}",
                summary.fraction_within, summary.checked, summary.max_rel_err
            )));
        }
        Ok(summary)
    })
}

fn most_opaque(p: &SplatParams, count: usize) -> SplatParams {
    let mut order: Vec<usize> = (0..p.opacity_logits.len()).collect();
    order.sort_by(|&a, &b| p.opacity_logits[b].total_cmp(&p.opacity_logits[a]));
    order.truncate(count);
    let d = p.feature_dim;
    let mut out = SplatParams {
        feature_dim: d,
        ..Default::default()
    };
    for i in order {
        out.means.extend_from_slice(&p.means[3 * i..3 * i + 3]);
        out.log_scales.extend_from_slice(&p.log_scales[3 * i..3 * i + 3]);
        out.quats.extend_from_slice(&p.quats[4 * i..4 * i + 4]);
        out.opacity_logits.push(p.opacity_logits[i]);
        out.colors.extend_from_slice(&p.colors[3 * i..3 * i + 3]);
        out.features.extend_from_slice(&p.features[d * i..d * i + d]);
    }
    out
}
