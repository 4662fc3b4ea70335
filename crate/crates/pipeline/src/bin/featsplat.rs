use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featsplat_pipeline::checkpoint::Checkpoint;
use featsplat_pipeline::model::Model;
use featsplat_pipeline::synth::{synth_dataset, write_png, Dataset, SceneData, Split};
use featsplat_pipeline::train::held_out_inputs;
use featsplat_pipeline::{run, Error, PipelineConfig, Preset, Result};

#[derive(Parser)]
#[command(name = "featsplat", version, about = "Feed-forward Gaussian splatting with a one-step refiner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults are used for anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set schedule.stage1_steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Named ablation preset, applied before the overrides.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: reconstruction backbone and detail module.
    TrainRecon {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: refiner on degraded/clean pairs from a stage-1 checkpoint.
    TrainRefiner {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3: joint end-to-end training.
    TrainJoint {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view of a scene from the other views.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Output PNG; the refined image, if any, goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics report for one split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the render loss gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        gaussians: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        self.finish(base)
    }

    /// Preset and overrides on top of `base`.
    fn finish(&self, base: PipelineConfig) -> Result<PipelineConfig> {
        let base = match &self.preset {
            Some(p) => Preset::parse(p)?.apply(&base),
            None => base,
        };
        base.with_overrides(&self.sets)
    }

    /// Config for an existing checkpoint: its own snapshot unless a file is given.
    fn for_checkpoint(&self, ck: &Checkpoint) -> Result<PipelineConfig> {
        match &self.config {
            Some(_) => self.resolve(),
            None => self.finish(ck.manifest.config.clone()),
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Model with every tensor restored from `ckpt`.
fn load_model(args: &ConfigArgs, ckpt: &Path) -> Result<Model> {
    let ck = Checkpoint::read(ckpt)?;
    let mut model = Model::new(&args.for_checkpoint(&ck)?)?;
    ck.apply(&mut model.ps, &[""])?;
    Ok(model)
}

fn render_view(args: &ConfigArgs, ckpt: &Path, data: &Path, scene: usize, view: usize, out: &Path) -> Result<()> {
    let model = load_model(args, ckpt)?;
    let cfg = &model.cfg;
    let ds = Dataset::open(data)?;
    if scene >= ds.info.num_scenes {
        return Err(Error::Contract(format!("scene {scene} of {}", ds.info.num_scenes)));
    }
    let sd = SceneData::load(&featsplat_pipeline::synth::scene_dir(data, scene), cfg.resolution.backbone)?;
    if view >= sd.views.len() {
        return Err(Error::Contract(format!("view {view} of {}", sd.views.len())));
    }
    let inputs: Vec<_> = held_out_inputs(sd.views.len(), view, cfg.input_views)
        .into_iter()
        .map(|i| &sd.views[i])
        .collect();
    let out_t = diffcore::no_grad(|| -> Result<_> {
        let rec = model.reconstruct(&inputs)?;
        model.predict(&rec, &inputs, &sd.views[view].cam)
    })?;
    let (h, w) = (out_t.render.color.dim(1), out_t.render.color.dim(2));
    write_png(out, &out_t.render.color.to_vec(), w, h)?;
    if let Some(r) = out_t.refined {
        write_png(&out.with_extension("refined.png"), &r.to_vec(), w, h)?;
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData { cfg, out } => {
            let cfg = cfg.resolve()?;
            let info = synth_dataset(&out, &cfg, cfg.seed)?;
            log::info!("wrote {} scenes to {}", info.num_scenes, out.display());
        }
        Command::TrainRecon { cfg, data, out } => {
            run::stage1(&cfg.resolve()?, &data, &out)?;
        }
        Command::TrainRefiner { cfg, data, stage1, out } => {
            let c = cfg.for_checkpoint(&Checkpoint::read(&stage1)?)?;
            run::stage2(&c, &data, &stage1, &out)?;
        }
        Command::TrainJoint { cfg, data, ckpt, out } => {
            let c = cfg.for_checkpoint(&Checkpoint::read(&ckpt)?)?;
            run::stage3(&c, &data, &ckpt, &out)?;
        }
        Command::Render {
            cfg,
            ckpt,
            data,
            scene,
            view,
            out,
        } => render_view(&cfg, &ckpt, &data, scene, view, &out)?,
        Command::Eval {
            cfg,
            ckpt,
            data,
            split,
            out,
        } => {
            let report = run::eval(&load_model(&cfg, &ckpt)?, &data, Split::parse(&split)?)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Gradcheck {
            cfg,
            data,
            gaussians,
            tolerance,
        } => {
            let s = run::gradcheck(&cfg.resolve()?, &data, gaussians, tolerance)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
