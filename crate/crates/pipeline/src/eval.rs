//! Held-out evaluation: PSNR, SSIM and perceptual distance of raw renders
//! and post-processed images against ground truth.

use diffcore::{no_grad, Tensor};
use featsplat::losses::{psnr, ssim, PerceptualProxy};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::synth::{SceneData, View};
use crate::train::held_out_inputs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scene: String,
    pub view: usize,
    /// `raw` for the rasterized image, `refined` for the post-processed one.
    pub kind: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: String,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub rows: Vec<MetricRow>,
    pub aggregate: Vec<Aggregate>,
}

impl MetricsReport {
    pub fn aggregate_of(&self, kind: &str) -> Option<&Aggregate> {
        self.aggregate.iter().find(|a| a.kind == kind)
    }
}

pub fn metric_row(
    scene: &str,
    view: usize,
    kind: &str,
    pred: &Tensor,
    gt: &Tensor,
    proxy: &PerceptualProxy,
) -> Result<MetricRow> {
    Ok(MetricRow {
        scene: scene.to_string(),
        view,
        kind: kind.to_string(),
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        perceptual: proxy.distance_value(pred, gt)?,
    })
}

/// Per-kind means of the rows, in first-seen kind order.
pub fn aggregate(rows: &[MetricRow]) -> Vec<Aggregate> {
    let mut kinds: Vec<&str> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.kind.as_str()) {
            kinds.push(&r.kind);
        }
    }
    kinds
        .into_iter()
        .map(|k| {
            let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.kind == k).collect();
            let n = sel.len() as f64;
            Aggregate {
                kind: k.to_string(),
                count: sel.len(),
                psnr: sel.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                perceptual: sel.iter().map(|r| r.perceptual).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Renders every view of every scene from the other views and scores the
/// raw and (if the model has a post-process) refined images.
pub fn evaluate(model: &Model, scenes: &[SceneData], split: &str) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    no_grad(|| -> Result<()> {
        for scene in scenes {
            let n = scene.views.len();
            for t in 0..n {
                let inputs: Vec<&View> = held_out_inputs(n, t, model.cfg.input_views)
                    .into_iter()
                    .map(|i| &scene.views[i])
                    .collect();
                let gt = &scene.views[t].image;
                let rec = model.reconstruct(&inputs)?;
                let out = model.predict(&rec, &inputs, &scene.views[t].cam)?;
                rows.push(metric_row(&scene.name, t, "raw", &out.render.color, gt, &model.proxy)?);
                if let Some(refined) = &out.refined {
                    rows.push(metric_row(&scene.name, t, "refined", refined, gt, &model.proxy)?);
                }
            }
        }
        Ok(())
    })?;
    Ok(MetricsReport {
        split: split.to_string(),
        aggregate: aggregate(&rows),
        rows,
    })
}
