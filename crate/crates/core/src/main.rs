use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use splatfilter::ablation::{run_ablation, AblationAxis};
use splatfilter::config::PipelineConfig;
use splatfilter::dataset::Dataset;
use splatfilter::io::{load_checkpoint, write_png};
use splatfilter::pipeline::{run_pipeline, NoObserver};
use splatfilter::render::render;
use splatfilter::report::{evaluate_run, write_run};
use splatfilter::synthscene::{generate, mean_coverage, preset, Occlusion};

#[derive(Parser)]
#[command(
    name = "splatfilter",
    version,
    about = "Gaussian splatting with progressive distractor filtering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Generate {
        /// Occlusion level: low, med or high.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a run directory and print its per-phase report.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render one dataset camera from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset providing cameras and background.
        #[arg(long)]
        data: PathBuf,
        /// Training view index, or holdout index with --holdout.
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        holdout: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis of the method.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// phases, components, reinit, threshold or metric.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => {
            PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPLATFILTER_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("SPLATFILTER_THREADS={v:?}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate { preset: level, out } => {
            let spec = preset(Occlusion::parse(&level)?);
            let ds = generate(&spec)?;
            ds.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}: {} train, {} holdout views, {} SfM points, mean coverage {:.3}",
                ds.name,
                ds.train.len(),
                ds.holdout.len(),
                ds.sfm.len(),
                mean_coverage(&ds)
            );
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let start = Instant::now();
            let result = run_pipeline(&cfg, &ds, &mut NoObserver)?;
            let report = write_run(&out, &result, &ds, &cfg)?;
            print!("{}", report.summary_csv());
            println!(
                "trained {} steps in {:.1}s",
                result.total_steps,
                start.elapsed().as_secs_f64()
            );
        }
        Command::Eval { run, data } => {
            let ds = load_data(&data)?;
            let report =
                evaluate_run(&run, &ds).with_context(|| format!("evaluating {}", run.display()))?;
            print!("{}", report.summary_csv());
        }
        Command::Render {
            checkpoint,
            data,
            camera,
            holdout,
            out,
        } => {
            let ds = load_data(&data)?;
            let cam = if holdout {
                ds.holdout.get(camera).map(|v| &v.camera)
            } else {
                ds.train.get(camera).map(|v| &v.camera)
            };
            let Some(cam) = cam else {
                bail!("camera index {camera} out of range");
            };
            let ckpt = load_checkpoint(&checkpoint)?;
            let ctx = PipelineConfig::default().render_context(ds.background);
            write_png(&render(&ckpt.set, cam, &ctx).0, &out)?;
        }
        Command::Ablate {
            data,
            axis,
            config,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let outcomes = run_ablation(&cfg, &ds, axis, &out)?;
            print!("{}", std::fs::read_to_string(out.join("ablation.csv"))?);
            println!("{} runs written to {}", outcomes.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
