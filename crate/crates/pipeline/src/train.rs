//! The three training stages: reconstruction, refiner, joint.

use std::path::Path;

use diffcore::{backward, no_grad, Tensor};
use featsplat::losses::{gan_loss, loss_d, loss_r, total_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{stack, Model, Reconstruction, BACKBONE, DETAIL, DISCRIMINATOR, FEATURE_CNN, REFINER};
use crate::optim::Adam;
use crate::synth::{SceneData, View};

/// One row of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    /// Discriminator loss of the same step, where there is one.
    pub disc_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Input views and target of one training sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub inputs: Vec<usize>,
    pub target: usize,
}

/// Draws (scene, target) uniformly; the inputs are the first `input_views`
/// other views in index order.
pub struct Sampler {
    rng: ChaCha8Rng,
    input_views: usize,
}

impl Sampler {
    pub fn new(seed: u64, input_views: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100);
        Sampler { rng, input_views }
    }

    pub fn draw(&mut self, scenes: &[SceneData]) -> Result<Sample> {
        if scenes.is_empty() {
            return Err(Error::Contract("no scenes to train on".into()));
        }
        let scene = self.rng.gen_range(0..scenes.len());
        let v = scenes[scene].views.len();
        if v <= self.input_views {
            return Err(Error::Contract(format!(
                "scene {} has {v} views, need {} inputs plus a target",
                scenes[scene].name, self.input_views
            )));
        }
        let target = self.rng.gen_range(0..v);
        Ok(Sample {
            scene,
            inputs: held_out_inputs(v, target, self.input_views),
            target,
        })
    }
}

/// The first `n` view indices other than `target`.
pub fn held_out_inputs(views: usize, target: usize, n: usize) -> Vec<usize> {
    (0..views).filter(|&i| i != target).take(n).collect()
}

fn views<'a>(scene: &'a SceneData, idx: &[usize]) -> Vec<&'a View> {
    idx.iter().map(|&i| &scene.views[i]).collect()
}

fn finite(loss: &Tensor, step: usize, model: &Model) -> Result<f64> {
    let v = loss.item()?;
    if v.is_finite() {
        return Ok(v);
    }
    let worst = model
        .ps
        .iter()
        .map(|(n, t)| (n.clone(), t.max_abs()))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    Err(Error::Numeric(format!(
        "loss became {v} at step {step}; largest parameter magnitude {} in {}",
        worst.1, worst.0
    )))
}

/// Reconstruction loss of one sample; used by training and by replay checks.
pub fn stage1_loss(model: &Model, scenes: &[SceneData], s: &Sample) -> Result<Tensor> {
    let scene = &scenes[s.scene];
    let rec = model.reconstruct(&views(scene, &s.inputs))?;
    let r = model.render(&rec, &scene.views[s.target].cam)?;
    Ok(loss_r(&r.color, &scene.views[s.target].image, &model.proxy, &model.cfg.loss)?)
}

/// Optimizes the reconstruction loss over the backbone and detail module.
pub fn train_stage1(
    model: &mut Model,
    scenes: &[SceneData],
    steps: usize,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    let names = model.names_with(&[BACKBONE, DETAIL]);
    let mut opt = Adam::new(model.cfg.optim.lr_backbone, &model.cfg.optim);
    let mut sampler = Sampler::new(model.cfg.seed, model.cfg.input_views);
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let s = sampler.draw(scenes)?;
        let loss = stage1_loss(model, scenes, &s).map_err(|e| step_error(e, step))?;
        let value = finite(&loss, step, model)?;
        let grads = backward(&loss)?;
        let info = opt.step(&mut model.ps, &grads, &names).map_err(|e| step_error(e, step))?;
        let row = LossRow {
            step,
            loss: value,
            disc_loss: None,
            grad_norm: info.grad_norm,
        };
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn step_error(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// A degraded render, its clean ground truth and the reference views.
#[derive(Clone, Debug)]
pub struct Pair {
    pub scene: usize,
    pub target: usize,
    /// `[3, H, W]`.
    pub degraded: Tensor,
    pub clean: Tensor,
    /// `[R, 3, H, W]`.
    pub refs: Tensor,
}

/// Pairs from every (scene, target view) combination: the model's render
/// of the target plus Gaussian noise of `noise_std`, against the real image.
pub fn make_pairs(model: &Model, scenes: &[SceneData], noise_std: f64, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(200);
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::Config(format!("noise_std {noise_std}: {e}")))?;
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for t in 0..scene.views.len() {
            let inputs = views(scene, &held_out_inputs(scene.views.len(), t, model.cfg.input_views));
            let color = no_grad(|| -> Result<Tensor> {
                let rec = model.reconstruct(&inputs)?;
                Ok(model.render(&rec, &scene.views[t].cam)?.color)
            })?;
            let noisy: Vec<f64> = color.data().iter().map(|v| v + noise.sample(&mut rng)).collect();
            out.push(Pair {
                scene: si,
                target: t,
                degraded: Tensor::new(noisy, color.shape())?,
                clean: scene.views[t].image.clone(),
                refs: stack(inputs.iter().map(|v| &v.image))?,
            });
        }
    }
    Ok(out)
}

/// Refined image for a pair with the Gaussian features withheld (zero).
pub fn refine_pair(model: &Model, pair: &Pair) -> Result<Tensor> {
    let rf = model
        .refiner
        .as_ref()
        .ok_or_else(|| Error::Config("model has no refiner".into()))?;
    let (h, w) = (pair.degraded.dim(1), pair.degraded.dim(2));
    let d = model.cfg.feature_dim;
    let r = pair.refs.dim(0);
    Ok(rf.denoise_onestep(
        &model.ps,
        &pair.degraded,
        Some(&pair.refs),
        &Tensor::zeros(&[d, h / 8, w / 8]),
        Some(&Tensor::zeros(&[r, d, h / 8, w / 8])),
        model.cfg.mix_mode(),
    )?)
}

/// One discriminator update on `real` against a detached `fake`.
fn disc_step(model: &mut Model, opt: &mut Adam, real: &Tensor, fake: &Tensor, names: &[String], step: usize) -> Result<f64> {
    let disc = model.disc.as_ref().ok_or_else(|| Error::Config("model has no discriminator".into()))?;
    let terms = gan_loss(real, &fake.detach(), disc, &model.ps, &model.proxy, &model.cfg.loss)?;
    let loss = terms.discriminator_loss()?;
    let value = finite(&loss, step, model)?;
    let grads = backward(&loss)?;
    opt.step(&mut model.ps, &grads, names).map_err(|e| step_error(e, step))?;
    Ok(value)
}

/// Fraction of real images scored above 0.5 and fakes scored below it.
pub fn disc_accuracy(model: &Model, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let disc = model.disc.as_ref().ok_or_else(|| Error::Config("model has no discriminator".into()))?;
    no_grad(|| {
        let pr = disc.probability(&model.ps, &model.proxy, real)?;
        let pf = disc.probability(&model.ps, &model.proxy, fake)?;
        let hits = pr.data().iter().filter(|p| **p > 0.5).count() + pf.data().iter().filter(|p| **p < 0.5).count();
        Ok(hits as f64 / (pr.numel() + pf.numel()) as f64)
    })
}

/// Trains the refiner on degraded/clean pairs, alternating generator and
/// discriminator updates. Nothing outside the refiner and discriminator changes.
pub fn train_stage2(
    model: &mut Model,
    pairs: &[Pair],
    steps: usize,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    if pairs.is_empty() {
        return Err(Error::Contract("no training pairs".into()));
    }
    let gen_names = model.names_with(&[REFINER]);
    let disc_names = model.names_with(&[DISCRIMINATOR]);
    let mut gen_opt = Adam::new(model.cfg.optim.lr_refiner, &model.cfg.optim);
    let mut disc_opt = Adam::new(model.cfg.optim.lr_discriminator, &model.cfg.optim);
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
    rng.set_stream(300);
    let zero = Tensor::scalar(0.0);
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let refined = refine_pair(model, pair).map_err(|e| step_error(e, step))?;
        let ld = loss_d(&refined, &pair.clean, &model.proxy, &model.cfg.loss)?;
        let disc = model.disc.as_ref().ok_or_else(|| Error::Config("model has no discriminator".into()))?;
        let lg = gan_loss(&pair.clean, &refined, disc, &model.ps, &model.proxy, &model.cfg.loss)?.generator;
        let loss = total_loss(&zero, &ld, &lg, &model.cfg.loss)?;
        let value = finite(&loss, step, model)?;
        let grads = backward(&loss)?;
        let info = gen_opt.step(&mut model.ps, &grads, &gen_names).map_err(|e| step_error(e, step))?;
        let dl = disc_step(model, &mut disc_opt, &pair.clean, &refined, &disc_names, step)?;
        let row = LossRow {
            step,
            loss: value,
            disc_loss: Some(dl),
            grad_norm: info.grad_norm,
        };
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Loss terms of the joint objective for one sample.
pub struct JointTerms {
    pub l_r: Tensor,
    pub l_d: Tensor,
    pub l_g: Tensor,
    pub total: Tensor,
    /// Refined (or post-processed) target image.
    pub refined: Tensor,
}

pub fn joint_terms(model: &Model, rec: &Reconstruction, inputs: &[&View], target: &View) -> Result<JointTerms> {
    let w = &model.cfg.loss;
    let out = model.predict(rec, inputs, &target.cam)?;
    let l_r = loss_r(&out.render.color, &target.image, &model.proxy, w)?;
    let refined = out
        .refined
        .ok_or_else(|| Error::Config("joint training needs a refiner".into()))?;
    let l_d = loss_d(&refined, &target.image, &model.proxy, w)?;
    let l_g = match &model.disc {
        Some(disc) => gan_loss(&target.image, &refined, disc, &model.ps, &model.proxy, w)?.generator,
        None => Tensor::scalar(0.0),
    };
    let total = total_loss(&l_r, &l_d, &l_g, w)?;
    Ok(JointTerms {
        l_r,
        l_d,
        l_g,
        total,
        refined,
    })
}

/// End-to-end training of everything except the discriminator (updated in
/// alternation) and the prefixes listed in `stage3_freeze`.
pub fn train_stage3(
    model: &mut Model,
    scenes: &[SceneData],
    steps: usize,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    let frozen = model.cfg.stage3_freeze.clone();
    let names: Vec<String> = model
        .names_with(&[BACKBONE, DETAIL, REFINER, FEATURE_CNN])
        .into_iter()
        .filter(|n| !frozen.iter().any(|p| n.starts_with(p.as_str())))
        .collect();
    let disc_names = model.names_with(&[DISCRIMINATOR]);
    let mut opt = Adam::new(model.cfg.optim.lr_backbone, &model.cfg.optim);
    let mut disc_opt = Adam::new(model.cfg.optim.lr_discriminator, &model.cfg.optim);
    let mut sampler = Sampler::new(model.cfg.seed, model.cfg.input_views);
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let s = sampler.draw(scenes)?;
        let scene = &scenes[s.scene];
        let inputs = views(scene, &s.inputs);
        let target = &scene.views[s.target];
        let terms = model
            .reconstruct(&inputs)
            .and_then(|rec| joint_terms(model, &rec, &inputs, target))
            .map_err(|e| step_error(e, step))?;
        let value = finite(&terms.total, step, model)?;
        let grads = backward(&terms.total)?;
        let info = opt.step(&mut model.ps, &grads, &names).map_err(|e| step_error(e, step))?;
        let disc_loss = if model.disc.is_some() && !disc_names.is_empty() {
            Some(disc_step(model, &mut disc_opt, &target.image, &terms.refined, &disc_names, step)?)
        } else {
            None
        };
        let row = LossRow {
            step,
            loss: value,
            disc_loss,
            grad_norm: info.grad_norm,
        };
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
