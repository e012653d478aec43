//! Accuracy evaluation, noise-robustness sweeps, denoised-image export, and
//! the ablation grid runner.

use crate::backbone::RefBackbone;
use crate::config::{derive_seed, ExperimentConfig};
use crate::data::{stable_hash, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::write_csv;
use crate::nn::{psnr, Element};
use crate::noise::add_noise_with_rng;
use crate::plot::{render_line_chart, Series};
use crate::pmal::{make_optimizers, pmal_infer, pmal_train, PmalModel};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::path::Path;

/// Anything that maps a batch of images to class scores in eval mode.
pub trait ScoreModel<E: Element> {
    fn scores(&self, images: &Array4<E>) -> Result<Array2<E>>;
}

impl<E: Element> ScoreModel<E> for PmalModel<E> {
    fn scores(&self, images: &Array4<E>) -> Result<Array2<E>> {
        Ok(pmal_infer(self, images)?.0)
    }
}

impl<E: Element> ScoreModel<E> for RefBackbone<E> {
    fn scores(&self, images: &Array4<E>) -> Result<Array2<E>> {
        self.infer_scores(images)
    }
}

fn argmax_row<E: Element>(row: ndarray::ArrayView1<E>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sample predictions on the dataset with per-image noise at `sigma`.
/// Noise for image i is drawn from a seed derived from `(seed, sigma, i)`,
/// so predictions are reproducible and independent of batching.
pub fn noisy_predictions<E: Element, M: ScoreModel<E>>(
    model: &M,
    ds: &LabeledDataset,
    sigma: f64,
    seed: u64,
    batch_size: usize,
) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("evaluation split is empty".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut preds = Vec::with_capacity(ds.len());
    for chunk in indices.chunks(batch_size) {
        let (mut images, _) = ds.batch::<E>(chunk);
        if sigma > 0.0 {
            for (bi, &i) in chunk.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&format!(
                    "evalnoise/{seed}/{sigma}/{i}"
                )));
                let img = images.index_axis(Axis(0), bi).to_owned();
                let noisy = add_noise_with_rng(&img, sigma, &mut rng);
                images.index_axis_mut(Axis(0), bi).assign(&noisy);
            }
        }
        let scores = model.scores(&images)?;
        for row in scores.axis_iter(Axis(0)) {
            preds.push(argmax_row(row));
        }
    }
    Ok(preds)
}

/// Top-1 accuracy under additive noise at `sigma` (0 means clean images).
pub fn evaluate_accuracy<E: Element, M: ScoreModel<E>>(
    model: &M,
    ds: &LabeledDataset,
    sigma: f64,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    let preds = noisy_predictions(model, ds, sigma, seed, batch_size)?;
    let correct = preds.iter().zip(ds.labels.iter()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Clean-image accuracy; convenience for training loops.
pub fn accuracy_of<E: Element, M: ScoreModel<E>>(
    model: &M,
    ds: &LabeledDataset,
    batch_size: usize,
) -> Result<f64> {
    evaluate_accuracy(model, ds, 0.0, 0, batch_size)
}

/// The sigma grid used for robustness sweeps.
pub fn default_sigma_sweep() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
}

#[derive(Debug, Clone)]
pub struct RobustnessCurve {
    pub sigmas: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub model_id: String,
}

impl RobustnessCurve {
    fn validate(sigmas: &[f64]) -> Result<()> {
        if sigmas.is_empty() || sigmas[0] != 0.0 {
            return Err(Error::Config("sigma sweep must start at 0".into()));
        }
        if sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sigma sweep must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Accuracy as a function of noise power, with one shared base seed so
/// different models see identical noisy test sets.
pub fn robustness_curve<E: Element, M: ScoreModel<E>>(
    model: &M,
    ds: &LabeledDataset,
    sigmas: &[f64],
    seed: u64,
    batch_size: usize,
    model_id: &str,
) -> Result<RobustnessCurve> {
    RobustnessCurve::validate(sigmas)?;
    let mut accuracies = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        accuracies.push(evaluate_accuracy(model, ds, s, seed, batch_size)?);
    }
    Ok(RobustnessCurve {
        sigmas: sigmas.to_vec(),
        accuracies,
        model_id: model_id.to_string(),
    })
}

/// Writes curves to `<out>/robustness.csv` and `<out>/robustness.png`.
pub fn write_robustness_artifacts(curves: &[RobustnessCurve], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for c in curves {
        for (s, a) in c.sigmas.iter().zip(c.accuracies.iter()) {
            rows.push(vec![c.model_id.clone(), format!("{s}"), format!("{a}")]);
        }
    }
    write_csv(&out_dir.join("robustness.csv"), &["model_id", "sigma", "accuracy"], &rows)?;
    let series: Vec<Series> = curves
        .iter()
        .map(|c| Series {
            label: c.model_id.clone(),
            points: c.sigmas.iter().copied().zip(c.accuracies.iter().copied()).collect(),
        })
        .collect();
    render_line_chart(&out_dir.join("robustness.png"), &series)?;
    Ok(())
}

/// PSNR bookkeeping for one exported image.
#[derive(Debug, Clone)]
pub struct DenoisePsnr {
    pub index: usize,
    pub noisy_db: f64,
    pub denoised_db: Vec<f64>,
}

/// For each image writes a side-by-side grid `clean | noisy | denoised_1..K`
/// (values clamped to [0,1] for export only) plus a `psnr.csv`, and returns
/// the per-image PSNR numbers.
pub fn export_denoised<E: Element>(
    model: &mut PmalModel<E>,
    images: &[Array3<f32>],
    sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<DenoisePsnr>> {
    std::fs::create_dir_all(out_dir)?;
    let k = model.k();
    let mut report = Vec::with_capacity(images.len());
    for (idx, img) in images.iter().enumerate() {
        let clean = img.mapv(|v| E::from_f64(v as f64));
        let mut rng =
            ChaCha8Rng::seed_from_u64(stable_hash(&format!("denoise/{seed}/{sigma}/{idx}")));
        let noisy = add_noise_with_rng(&clean, sigma, &mut rng);
        let (c, h, w) = clean.dim();
        let mut batch = Array4::zeros((1, c, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(&noisy);
        let taps = model.backbone.infer_with_taps(&batch)?.taps;
        let mut denoised = Vec::with_capacity(k);
        for (head, tap) in model.heads.iter_mut().zip(taps.iter()) {
            let (out, _) = head.denoise(tap, &batch)?;
            denoised.push(out.denoised.index_axis(Axis(0), 0).to_owned());
        }
        let noisy_db = psnr(&noisy, &clean);
        let denoised_db: Vec<f64> = denoised.iter().map(|d| psnr(d, &clean)).collect();

        // K+2 individual images plus the side-by-side group.
        let mut panels: Vec<&Array3<E>> = vec![&clean, &noisy];
        panels.extend(denoised.iter());
        let names: Vec<String> = std::iter::once("clean".to_string())
            .chain(std::iter::once("noisy".to_string()))
            .chain((1..=k).map(|i| format!("den{i}")))
            .collect();
        for (panel, name) in panels.iter().zip(names.iter()) {
            save_panel_grid(&[*panel], &out_dir.join(format!("img{idx:03}_{name}.png")))?;
        }
        save_panel_grid(&panels, &out_dir.join(format!("img{idx:03}_group.png")))?;
        report.push(DenoisePsnr { index: idx, noisy_db, denoised_db });
    }
    let rows: Vec<Vec<String>> = report
        .iter()
        .map(|r| {
            let mut row = vec![r.index.to_string(), format!("{}", r.noisy_db)];
            row.extend(r.denoised_db.iter().map(|d| format!("{d}")));
            row
        })
        .collect();
    let mut header = vec!["index".to_string(), "psnr_noisy_db".to_string()];
    for i in 1..=k {
        header.push(format!("psnr_denoised_{i}_db"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(&out_dir.join("psnr.csv"), &header_refs, &rows)?;
    Ok(report)
}

fn save_panel_grid<E: Element>(panels: &[&Array3<E>], path: &Path) -> Result<()> {
    let (c, h, w) = panels[0].dim();
    assert_eq!(c, 3);
    let gap = 2usize;
    let total_w = panels.len() * w + (panels.len() - 1) * gap;
    let mut img = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = pi * (w + gap);
        for i in 0..h {
            for j in 0..w {
                let px = image::Rgb([
                    to_byte(panel[(0, i, j)]),
                    to_byte(panel[(1, i, j)]),
                    to_byte(panel[(2, i, j)]),
                ]);
                img.put_pixel((x0 + j) as u32, i as u32, px);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

fn to_byte<E: Element>(v: E) -> u8 {
    (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

// ---------------------------------------------------------------------------
// Ablation grid.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
    pub cfg: ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub name: String,
    pub accuracies: Vec<f64>,
    pub mean: Option<f64>,
    /// Half-width of the 95% confidence interval over repeats.
    pub ci95: Option<f64>,
    pub error: Option<String>,
}

/// Two-sided 95% Student-t half-width for `values`.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).unwrap().inverse_cdf(0.975);
    (mean, t * (var / n).sqrt())
}

/// The training-strategy grid: plain baseline, K sweep, single-step, and
/// sharpness-aware variants.
pub fn default_ablation_grid(base: &ExperimentConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let mut plain = base.clone();
    plain.k = 0;
    plain.sigma = 0.0;
    plain.no_sam = true;
    cells.push(AblationCell { name: "baseline".into(), cfg: plain });
    for k in 1..=3 {
        let mut cfg = base.clone();
        cfg.k = k;
        cfg.no_sam = true;
        cells.push(AblationCell { name: format!("k{k}"), cfg });
    }
    let mut single = base.clone();
    single.k = 3;
    single.no_sam = true;
    single.single_step = true;
    cells.push(AblationCell { name: "k3_single_step".into(), cfg: single });
    let mut sam = base.clone();
    sam.k = 3;
    sam.no_sam = false;
    cells.push(AblationCell { name: "k3_sam".into(), cfg: sam });
    cells
}

/// Trains and evaluates every cell `repeats` times with matched seeds and
/// reports mean accuracy with a 95% confidence interval. A failing cell is
/// recorded and the grid continues.
pub fn run_ablation(
    cells: &[AblationCell],
    train: &LabeledDataset,
    test: &LabeledDataset,
    repeats: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::new();
    for cell in cells {
        let mut accs = Vec::new();
        let mut error = None;
        for r in 0..repeats {
            let mut cfg = cell.cfg.clone();
            cfg.seed = derive_seed(cell.cfg.seed, &format!("repeat/{r}"));
            match train_cell(&cfg, train, test) {
                Ok(acc) => accs.push(acc),
                Err(e) => {
                    error = Some(format!("repeat {r}: {e}"));
                    break;
                }
            }
        }
        let (mean, ci) = if accs.is_empty() || error.is_some() {
            (None, None)
        } else {
            let (m, c) = mean_and_ci95(&accs);
            (Some(m), Some(c))
        };
        results.push(AblationResult {
            name: cell.name.clone(),
            accuracies: accs,
            mean,
            ci95: ci,
            error,
        });
    }
    if let Some(dir) = out_dir {
        let rows: Vec<Vec<String>> = results
            .iter()
            .map(|r| {
                vec![
                    r.name.clone(),
                    r.mean.map(|m| format!("{m:.4}")).unwrap_or_default(),
                    r.ci95.map(|c| format!("{c:.4}")).unwrap_or_default(),
                    format!("{}", r.accuracies.len()),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        write_csv(
            &dir.join("ablation.csv"),
            &["cell", "mean_acc", "ci95", "repeats", "error"],
            &rows,
        )?;
    }
    Ok(results)
}

fn train_cell(
    cfg: &ExperimentConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<f64> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut model = PmalModel::<f32>::new(cfg, train.num_classes(), &mut rng)?;
    let mut opts = make_optimizers(&model, cfg.sam_config(), cfg.single_step);
    pmal_train(&mut model, &mut opts, train, test, cfg, 0, |_| Ok(()))?;
    evaluate_accuracy(&model, test, 0.0, cfg.seed, cfg.batch_size)
}
