use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use vmad_core::databench::{generate_dataset, GeneratorConfig};
use vmad_core::pipeline::selfcheck::{default_suite, run_checks};
use vmad_core::pipeline::{
    evaluate_checkpoint, infer, load_model, train, EvalMode, Precision, RunConfig, TrainOptions, CHECKPOINT_FILE,
};
use vmad_core::Real;

#[derive(Parser)]
#[command(
    name = "vmad",
    version,
    about = "Zero-shot anomaly localisation with a tiny multimodal model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic defect dataset.
    Generate(GenerateArgs),
    /// Train on the training classes.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the files already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the held-out classes and write metrics.json and metrics.csv.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth masks as predictions (harness self-test).
        #[arg(long)]
        oracle: bool,
    },
    /// Answer a question about one image and write its mask and heatmap.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
    },
    /// Run the gradient and metric check suite.
    Selfcheck,
    /// Print a run configuration as JSON.
    Config {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 80)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 0.5)]
    abnormal_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key.path=value`, applied in order after the other flags.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(p), _) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            (None, Preset::Default) => RunConfig::default(),
            (None, Preset::Smoke) => RunConfig::smoke("data", "runs/smoke"),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn checkpoint_path(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE))
}

fn run_train<R: Real>(cfg: &RunConfig, resume: bool) -> Result<()> {
    let out = train::<R>(
        cfg,
        &TrainOptions {
            resume,
            stop_after: None,
        },
    )?;
    if let Some(last) = out.losses.last() {
        println!(
            "epoch {}: total {:.4} txt {:.4} seg {:.4} pbsd {:.4}",
            last.epoch, last.total, last.txt, last.seg, last.pbsd
        );
    }
    println!("checkpoint: {}", out.checkpoint.display());
    Ok(())
}

fn run_evaluate<R: Real>(cfg: &RunConfig, checkpoint: &Path, mode: EvalMode) -> Result<()> {
    let report = evaluate_checkpoint::<R>(cfg, checkpoint, mode)?;
    let csv = std::fs::read_to_string(cfg.out_dir.join("metrics.csv"))?;
    print!("{csv}");
    if report.no_seg > 0 {
        println!("answers without <seg>: {}", report.no_seg);
    }
    Ok(())
}

fn run_infer<R: Real>(cfg: &RunConfig, checkpoint: &Path, image: &Path, instruction: &str) -> Result<()> {
    let (model, store) = load_model::<R>(cfg, checkpoint)?;
    let out = infer(&model, &store, image, instruction, cfg.max_new_tokens, &cfg.out_dir)?;
    println!("answer: {}", out.answer);
    println!("mask: {}", out.mask_png.display());
    println!("heatmap: {}", out.heatmap_png.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::Generate(a) => {
            let cfg = GeneratorConfig {
                classes: a.classes,
                per_class: a.per_class,
                abnormal_fraction: a.abnormal_fraction,
                image_size: a.image_size,
                seed: a.seed,
            };
            let ann = generate_dataset(&cfg, &a.out, a.overwrite)?;
            println!(
                "wrote {} images of {} classes to {}",
                ann.records.len(),
                ann.classes.len(),
                a.out.display()
            );
        }
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, resume)?,
                Precision::F64 => run_train::<f64>(&cfg, resume)?,
            }
        }
        Command::Evaluate {
            run,
            checkpoint,
            oracle,
        } => {
            let cfg = run.resolve()?;
            let ck = checkpoint_path(&cfg, &checkpoint);
            let mode = if oracle { EvalMode::Oracle } else { EvalMode::Model };
            match cfg.precision {
                Precision::F32 => run_evaluate::<f32>(&cfg, &ck, mode)?,
                Precision::F64 => run_evaluate::<f64>(&cfg, &ck, mode)?,
            }
        }
        Command::Infer {
            run,
            checkpoint,
            image,
            instruction,
        } => {
            let cfg = run.resolve()?;
            let ck = checkpoint_path(&cfg, &checkpoint);
            match cfg.precision {
                Precision::F32 => run_infer::<f32>(&cfg, &ck, &image, &instruction)?,
                Precision::F64 => run_infer::<f64>(&cfg, &ck, &image, &instruction)?,
            }
        }
        Command::Selfcheck => {
            let outcomes = run_checks(&default_suite(), |o| println!("{o}"));
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            println!("{} checks, {} failed", outcomes.len(), failed.len());
            if !failed.is_empty() {
                println!("failed: {}", failed.join(", "));
                return Ok(false);
            }
        }
        Command::Config { run } => {
            let cfg = run.resolve()?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
