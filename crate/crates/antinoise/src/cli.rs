//! Command implementations behind the `antinoise` binary. Each command
//! validates its configuration, runs, and leaves a self-describing run
//! directory: a config snapshot, metrics CSV, and checkpoints.

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{derive_seed, ExperimentConfig};
use crate::data::{load_folder_dataset, make_toy_dataset, write_folder_dataset, LabeledDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{
    default_ablation_grid, default_sigma_sweep, evaluate_accuracy, export_denoised,
    robustness_curve, run_ablation, write_robustness_artifacts, AblationCell, RobustnessCurve,
};
use crate::metrics::{write_csv, CsvLogger};
use crate::pmal::{make_optimizers, pmal_train, PmalModel};
use crate::pmd::{pmd_train, DistillPair};
use crate::sam::SamState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Environment variable overriding the output root directory.
pub const OUTPUT_ROOT_ENV: &str = "ANTINOISE_OUT";

#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub checkpoint_best: PathBuf,
    pub checkpoint_last: PathBuf,
    pub metrics: PathBuf,
    pub config_snapshot: PathBuf,
}

/// JSON error record written to stderr and, when possible, `error.json`.
pub fn error_record(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn prepare_run_dir(
    cfg: &ExperimentConfig,
    name: &str,
    explicit: Option<&Path>,
) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let root = output_root(cfg);
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_secs();
            let mut dir = root.join(format!("{name}-{stamp}"));
            let mut suffix = 0;
            while dir.exists() {
                suffix += 1;
                dir = root.join(format!("{name}-{stamp}-{suffix}"));
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let dir = cfg
        .dataset_dir
        .as_ref()
        .ok_or_else(|| Error::Config("dataset_dir is required".into()))?;
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.clone()));
    }
    load_folder_dataset(dir, cfg.input_size, SplitSpec::default())
}

/// Trains a model under the progressive anti-noise schedule and writes
/// checkpoint, metrics CSV, and config snapshot into the run directory.
pub fn cmd_train_pmal(
    cfg: &ExperimentConfig,
    run_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (train, val, _) = load_dataset(cfg)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let dir = prepare_run_dir(cfg, "pmal", run_dir)?;
    let metrics_path = dir.join("metrics.csv");
    let best_path = dir.join("checkpoint_best.ckpt");
    let last_path = dir.join("checkpoint_last.ckpt");

    let (mut model, mut opts, start_epoch) = match resume {
        Some(path) => {
            let (meta, model, momenta) = checkpoint::load_pmal(path)?;
            meta.check_structural(cfg)?;
            let mut opts = make_optimizers(&model, cfg.sam_config(), cfg.single_step);
            for (o, m) in opts.iter_mut().zip(momenta) {
                *o.momentum_buffer_mut() = m;
            }
            for (o, &c) in opts.iter_mut().zip(meta.optimizer_updates.iter()) {
                o.update_count = c;
            }
            (model, opts, meta.epoch + 1)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
            let model = PmalModel::<f32>::new(cfg, train.num_classes(), &mut rng)?;
            let opts = make_optimizers(&model, cfg.sam_config(), cfg.single_step);
            (model, opts, 0)
        }
    };

    let mut csv = CsvLogger::create(&metrics_path)?;
    pmal_train(&mut model, &mut opts, &train, &val, cfg, start_epoch, |st| {
        csv.write_row(st.row)?;
        if st.is_best_val {
            checkpoint::save_pmal(&best_path, st.model, cfg, st.epoch, None)?;
        }
        checkpoint::save_pmal(&last_path, st.model, cfg, st.epoch, Some(st.optimizers))?;
        Ok(())
    })?;
    if !best_path.exists() {
        checkpoint::save_pmal(&best_path, &model, cfg, cfg.epochs.saturating_sub(1), None)?;
    }
    Ok(RunArtifacts {
        run_dir: dir.clone(),
        checkpoint_best: best_path,
        checkpoint_last: last_path,
        metrics: metrics_path,
        config_snapshot: dir.join("config.toml"),
    })
}

/// Distills a trained teacher checkpoint into a plain backbone student and
/// records a teacher/student accuracy comparison.
pub fn cmd_distill_pmd(
    cfg: &ExperimentConfig,
    teacher_ckpt: &Path,
    run_dir: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (meta, teacher, _) = checkpoint::load_pmal(teacher_ckpt)?;
    meta.check_structural(cfg)?;
    let (train, val, _) = load_dataset(cfg)?;
    if train.num_classes() != teacher.num_classes() {
        return Err(Error::CheckpointMismatch {
            diff: format!(
                "  num_classes: teacher {} vs dataset {}\n",
                teacher.num_classes(),
                train.num_classes()
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "student-init"));
    let student = crate::backbone::RefBackbone::<f32>::new(
        cfg.input_size,
        cfg.input_size,
        teacher.num_classes(),
        &teacher.backbone.tap_stages,
        &mut rng,
    )?;
    // Shape validation happens here, before any training.
    let mut pair = DistillPair::new(teacher, student, cfg.alpha)?;

    let dir = prepare_run_dir(cfg, "pmd", run_dir)?;
    let metrics_path = dir.join("metrics.csv");
    let best_path = dir.join("checkpoint_best.ckpt");
    let last_path = dir.join("checkpoint_last.ckpt");
    let mut csv = CsvLogger::create(&metrics_path)?;
    pmd_train(&mut pair, &train, &val, cfg, 0, |st| {
        csv.write_row(st.row)?;
        if st.is_best_val {
            checkpoint::save_backbone(&best_path, st.student, cfg, st.epoch)?;
        }
        checkpoint::save_backbone(&last_path, st.student, cfg, st.epoch)?;
        Ok(())
    })?;
    if !best_path.exists() {
        checkpoint::save_backbone(&best_path, &pair.student, cfg, cfg.epochs - 1)?;
    }

    let eval_split = if val.is_empty() { &train } else { &val };
    let teacher_acc = evaluate_accuracy(&pair.teacher, eval_split, 0.0, cfg.seed, cfg.batch_size)?;
    let student_acc = evaluate_accuracy(&pair.student, eval_split, 0.0, cfg.seed, cfg.batch_size)?;
    let record = serde_json::json!({
        "teacher_acc": teacher_acc,
        "student_acc": student_acc,
        "gap": teacher_acc - student_acc,
    });
    std::fs::write(dir.join("comparison.json"), record.to_string())?;
    Ok(RunArtifacts {
        run_dir: dir.clone(),
        checkpoint_best: best_path,
        checkpoint_last: last_path,
        metrics: metrics_path,
        config_snapshot: dir.join("config.toml"),
    })
}

pub enum LoadedModel {
    Pmal(Box<PmalModel<f32>>),
    Backbone(Box<crate::backbone::RefBackbone<f32>>),
}

/// Loads either checkpoint kind, refusing structural conflicts with `cfg`.
pub fn load_model_checked(ckpt: &Path, cfg: &ExperimentConfig) -> Result<(CheckpointMeta, LoadedModel)> {
    match checkpoint::load_pmal(ckpt) {
        Ok((meta, model, _)) => {
            meta.check_structural(cfg)?;
            Ok((meta, LoadedModel::Pmal(Box::new(model))))
        }
        Err(Error::InvalidCheckpoint(_)) => {
            let (meta, bb) = checkpoint::load_backbone(ckpt)?;
            Ok((meta, LoadedModel::Backbone(Box::new(bb))))
        }
        Err(e) => Err(e),
    }
}

fn eval_split(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    let (train, val, test) = load_dataset(cfg)?;
    Ok(if !test.is_empty() {
        test
    } else if !val.is_empty() {
        val
    } else {
        train
    })
}

/// Evaluates a checkpoint at the given noise levels and writes `eval.csv`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    sigmas: &[f64],
    run_dir: Option<&Path>,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let (_, model) = load_model_checked(ckpt, cfg)?;
    let ds = eval_split(cfg)?;
    let mut rows = Vec::new();
    let mut out = Vec::new();
    for &sigma in sigmas {
        let acc = match &model {
            LoadedModel::Pmal(m) => evaluate_accuracy(m.as_ref(), &ds, sigma, cfg.seed, cfg.batch_size)?,
            LoadedModel::Backbone(m) => evaluate_accuracy(m.as_ref(), &ds, sigma, cfg.seed, cfg.batch_size)?,
        };
        println!("sigma {sigma:.3}: accuracy {acc:.4}");
        rows.push(vec![format!("{sigma}"), format!("{acc}")]);
        out.push((sigma, acc));
    }
    let dir = prepare_run_dir(cfg, "eval", run_dir)?;
    write_csv(&dir.join("eval.csv"), &["sigma", "accuracy"], &rows)?;
    Ok(out)
}

/// Runs the default sigma sweep for one or more checkpoints and writes the
/// curve CSV and plot.
pub fn cmd_robustness(
    cfg: &ExperimentConfig,
    ckpts: &[PathBuf],
    run_dir: Option<&Path>,
) -> Result<Vec<RobustnessCurve>> {
    cfg.validate()?;
    let ds = eval_split(cfg)?;
    let sweep = default_sigma_sweep();
    let mut curves = Vec::new();
    for ckpt in ckpts {
        let (_, model) = load_model_checked(ckpt, cfg)?;
        let id = ckpt.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let curve = match &model {
            LoadedModel::Pmal(m) => {
                robustness_curve(m.as_ref(), &ds, &sweep, cfg.seed, cfg.batch_size, &id)?
            }
            LoadedModel::Backbone(m) => {
                robustness_curve(m.as_ref(), &ds, &sweep, cfg.seed, cfg.batch_size, &id)?
            }
        };
        curves.push(curve);
    }
    let dir = prepare_run_dir(cfg, "robustness", run_dir)?;
    write_robustness_artifacts(&curves, &dir)?;
    Ok(curves)
}

/// Exports denoised-image groups (clean, noisy, K denoised) with PSNR stats.
pub fn cmd_denoise_dump(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    count: usize,
    run_dir: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let (meta, mut model, _) = match checkpoint::load_pmal(ckpt) {
        Ok(x) => x,
        Err(_) => {
            return Err(Error::InvalidCheckpoint(
                "denoise-dump needs a checkpoint with denoising heads".into(),
            ))
        }
    };
    meta.check_structural(cfg)?;
    let ds = eval_split(cfg)?;
    let images: Vec<_> = ds.images.iter().take(count).cloned().collect();
    let dir = prepare_run_dir(cfg, "denoise", run_dir)?;
    export_denoised(&mut model, &images, cfg.sigma, cfg.seed, &dir)?;
    Ok(dir)
}

#[derive(Debug, Deserialize)]
pub struct GridFile {
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Deserialize)]
pub struct GridCell {
    pub name: String,
    #[serde(flatten)]
    pub cfg: ExperimentConfig,
}

/// Trains and evaluates an ablation grid (default: baseline, K sweep,
/// single-step, sharpness-aware) with `repeats` matched-seed repeats per
/// cell, writing a table with mean accuracy and 95% confidence intervals.
pub fn cmd_ablation(
    cfg: &ExperimentConfig,
    grid_file: Option<&Path>,
    repeats: usize,
    run_dir: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let cells: Vec<AblationCell> = match grid_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let grid: GridFile =
                toml::from_str(&text).map_err(|e| Error::Config(format!("bad grid file: {e}")))?;
            grid.cells
                .into_iter()
                .map(|c| AblationCell { name: c.name, cfg: c.cfg })
                .collect()
        }
        None => default_ablation_grid(cfg),
    };
    let (train, val, test) = load_dataset(cfg)?;
    let eval = if !test.is_empty() { test } else { val };
    let dir = prepare_run_dir(cfg, "ablation", run_dir)?;
    let results = run_ablation(&cells, &train, &eval, repeats, Some(&dir))?;
    for r in &results {
        match (&r.mean, &r.error) {
            (Some(m), _) => println!(
                "{:<18} {:.4} +- {:.4} ({} repeats)",
                r.name,
                m,
                r.ci95.unwrap_or(0.0),
                r.accuracies.len()
            ),
            (None, Some(e)) => println!("{:<18} FAILED: {e}", r.name),
            _ => {}
        }
    }
    Ok(dir)
}

/// Generates the synthetic toy dataset in the folder-per-class layout.
pub fn cmd_make_toy_data(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = make_toy_dataset(num_classes, per_class, image_size, seed);
    write_folder_dataset(&ds, out)?;
    println!(
        "wrote {} images ({num_classes} classes x {per_class}) to {}",
        ds.len(),
        out.display()
    );
    Ok(())
}

/// Restores optimizer state saved in a checkpoint onto fresh instances.
pub fn restore_optimizers(opts: &mut [SamState], momenta: Vec<Vec<f64>>, counts: &[u64]) {
    for (o, m) in opts.iter_mut().zip(momenta) {
        *o.momentum_buffer_mut() = m;
    }
    for (o, &c) in opts.iter_mut().zip(counts) {
        o.update_count = c;
    }
}
