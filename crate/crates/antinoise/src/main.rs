//! Thin command-line front end; all logic lives in the library.

use antinoise::cli;
use antinoise::config::ExperimentConfig;
use antinoise::error::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "antinoise",
    about = "Noise-robust classification: progressive anti-noise training and distillation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this exact run directory instead of a timestamped one.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Combine all K+1 losses into a single update per batch.
    #[arg(long)]
    single_step: bool,
    /// Disable the sharpness-aware two-pass optimizer.
    #[arg(long)]
    no_sam: bool,
    /// Distill with the score loss only.
    #[arg(long)]
    baseline_kd: bool,
    /// Start from the published full-scale hyperparameters.
    #[arg(long)]
    paper_defaults: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = if self.paper_defaults {
            ExperimentConfig::paper_defaults()
        } else {
            ExperimentConfig::desk_defaults()
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg = ExperimentConfig::from_toml(&text)?;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset_dir = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
            cfg.tap_stages.clear();
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.input_size {
            cfg.input_size = v;
        }
        cfg.single_step |= self.single_step;
        cfg.no_sam |= self.no_sam;
        cfg.baseline_kd |= self.baseline_kd;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with progressive multi-task anti-noise learning.
    TrainPmal {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from a previous checkpoint_last.ckpt.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Distill a trained teacher checkpoint into a plain backbone.
    DistillPmd {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint produced by train-pmal.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Evaluate a checkpoint at one or more noise levels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated noise levels (default: clean only).
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Sweep the default noise grid and emit the accuracy curve.
    Robustness {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One or more checkpoints to overlay on the same curve.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
    },
    /// Export clean/noisy/denoised image groups with PSNR statistics.
    DenoiseDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of evaluation images to export.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Train and evaluate the training-strategy ablation grid.
    Ablation {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TOML grid file; defaults to the built-in strategy grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        repeats: usize,
    },
    /// Generate the synthetic fine-grained toy dataset.
    MakeToyData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::TrainPmal { cfg, resume } => {
            let run_dir = cfg.run_dir.clone();
            let cfg = cfg.resolve()?;
            let art = cli::cmd_train_pmal(&cfg, run_dir.as_deref(), resume.as_deref())?;
            println!("run dir: {}", art.run_dir.display());
        }
        Cmd::DistillPmd { cfg, teacher } => {
            let run_dir = cfg.run_dir.clone();
            let cfg = cfg.resolve()?;
            let art = cli::cmd_distill_pmd(&cfg, &teacher, run_dir.as_deref())?;
            println!("run dir: {}", art.run_dir.display());
        }
        Cmd::Eval { cfg, ckpt, sigmas } => {
            let run_dir = cfg.run_dir.clone();
            let cfg = cfg.resolve()?;
            let sigmas = sigmas.unwrap_or_else(|| vec![0.0]);
            cli::cmd_eval(&cfg, &ckpt, &sigmas, run_dir.as_deref())?;
        }
        Cmd::Robustness { cfg, ckpt } => {
            let run_dir = cfg.run_dir.clone();
            let cfg = cfg.resolve()?;
            cli::cmd_robustness(&cfg, &ckpt, run_dir.as_deref())?;
        }
        Cmd::DenoiseDump { cfg, ckpt, count } => {
            let run_dir = cfg.run_dir.clone();
            let cfg = cfg.resolve()?;
            let dir = cli::cmd_denoise_dump(&cfg, &ckpt, count, run_dir.as_deref())?;
            println!("wrote denoised groups to {}", dir.display());
        }
        Cmd::Ablation { cfg, grid, repeats } => {
            let run_dir = cfg.run_dir.clone();
            let cfg = cfg.resolve()?;
            let dir = cli::cmd_ablation(&cfg, grid.as_deref(), repeats, run_dir.as_deref())?;
            println!("ablation table in {}", dir.display());
        }
        Cmd::MakeToyData { classes, per_class, size, seed, out } => {
            cli::cmd_make_toy_data(classes, per_class, size, seed, &out)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let run_dir = match &cli.cmd {
        Cmd::TrainPmal { cfg, .. }
        | Cmd::DistillPmd { cfg, .. }
        | Cmd::Eval { cfg, .. }
        | Cmd::Robustness { cfg, .. }
        | Cmd::DenoiseDump { cfg, .. }
        | Cmd::Ablation { cfg, .. } => cfg.run_dir.clone(),
        _ => None,
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("{}", cli::error_record(&e));
        if let Some(dir) = run_dir {
            if dir.is_dir() {
                let _ = std::fs::write(dir.join("error.json"), cli::error_record(&e));
            }
        }
        std::process::exit(e.exit_code());
    }
}
