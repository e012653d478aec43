//! Progressive multi-task anti-noise training.
//!
//! Each batch is optimized in K+1 sequential steps. Step k (shallow to deep)
//! draws fresh noise, forwards to tap k, scores the tap, denoises the noisy
//! image from the tap, re-forwards the denoised image to tap k, and updates
//! the stages on the path to the tap together with head k under the
//! three-term head loss. Step K+1 draws fresh noise again and updates the
//! whole backbone under plain cross-entropy. Inference averages the K head
//! scores and the backbone score from one clean pass.

use crate::backbone::{ParamGroup, RefBackbone, StageTapSpec};
use crate::config::{derive_seed, ExperimentConfig};
use crate::data::LabeledDataset;
use crate::drh::{drh_loss, Drh, DrhConfig, DrhLoss};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::nn::{mse_grad, softmax_cross_entropy, Element, NormMode};
use crate::noise::add_noise_batch;
use crate::sam::{SamConfig, SamState};
use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// Backbone plus K denoising-recognition heads keyed by tap.
pub struct PmalModel<E: Element> {
    pub backbone: RefBackbone<E>,
    pub heads: Vec<Drh<E>>,
    pub tap_specs: Vec<StageTapSpec>,
}

impl<E: Element> PmalModel<E> {
    pub fn new<R: Rng>(cfg: &ExperimentConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tap_stages = cfg.resolved_tap_stages();
        let backbone = RefBackbone::new(
            cfg.input_size,
            cfg.input_size,
            num_classes,
            &tap_stages,
            rng,
        )?;
        let tap_specs = backbone.stage_shapes(cfg.input_size, cfg.input_size)?;
        let mut heads = Vec::with_capacity(tap_specs.len());
        for spec in &tap_specs {
            let drh_cfg = DrhConfig {
                in_channels: spec.channels,
                descriptor_dim: cfg.descriptor_dim,
                restore_channels: cfg.restore_channels,
                skip_channels: cfg.skip_channels,
                num_classes,
                first_upsample_scale: spec.first_upsample_scale(cfg.input_size, cfg.input_size),
            };
            heads.push(Drh::new(drh_cfg, rng)?);
        }
        Ok(Self { backbone, heads, tap_specs })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes
    }

    /// Total denoising sub-head invocations across heads.
    pub fn denoise_call_count(&self) -> u64 {
        self.heads.iter().map(|h| h.denoise_calls).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            heads: self.heads.iter().map(|h| h.zeros_like()).collect(),
            tap_specs: self.tap_specs.clone(),
        }
    }

    /// Flat layout of all trainable parameters: backbone stages, classifier,
    /// then heads in tap order.
    pub fn param_layout(&self) -> Vec<(ParamGroup, String, Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0usize;
        self.backbone.visit_params(&mut |g, name, s| {
            out.push((g, name.to_string(), off..off + s.len()));
            off += s.len();
        });
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&mut |name, s| {
                out.push((
                    ParamGroup::Head(i + 1),
                    format!("head{}.{name}", i + 1),
                    off..off + s.len(),
                ));
                off += s.len();
            });
        }
        out
    }

    pub fn param_len(&self) -> usize {
        let mut n = 0;
        self.backbone.visit_params(&mut |_, _, s| n += s.len());
        for h in &self.heads {
            h.visit_params(&mut |_, s| n += s.len());
        }
        n
    }

    pub fn params_flat(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.param_len());
        self.backbone.visit_params(&mut |_, _, s| out.extend_from_slice(s));
        for h in &self.heads {
            h.visit_params(&mut |_, s| out.extend_from_slice(s));
        }
        out
    }

    pub fn set_params(&mut self, flat: &[E]) {
        let mut off = 0usize;
        self.backbone.visit_params_mut(&mut |_, _, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        for h in &mut self.heads {
            h.visit_params_mut(&mut |_, s| {
                s.copy_from_slice(&flat[off..off + s.len()]);
                off += s.len();
            });
        }
        assert_eq!(off, flat.len());
    }

    /// Parameter ranges updated by progressive step `k` (1-based):
    /// stages on the path to tap k plus head k; step K+1 covers the whole
    /// backbone and classifier.
    pub fn ranges_for_step(&self, k: usize) -> Vec<Range<usize>> {
        let layout = self.param_layout();
        let keep: Box<dyn Fn(ParamGroup) -> bool> = if k <= self.k() {
            let path_depth = self.tap_specs[k - 1].stage_index;
            Box::new(move |g| match g {
                ParamGroup::Stage(s) => s <= path_depth,
                ParamGroup::Head(h) => h == k,
                ParamGroup::Classifier => false,
            })
        } else {
            Box::new(|g| matches!(g, ParamGroup::Stage(_) | ParamGroup::Classifier))
        };
        merge_ranges(layout.into_iter().filter(|(g, _, _)| keep(*g)).map(|(_, _, r)| r))
    }

    pub fn ranges_all(&self) -> Vec<Range<usize>> {
        vec![0..self.param_len()]
    }

    pub fn param_count(&self) -> usize {
        self.param_len()
    }
}

fn merge_ranges(iter: impl Iterator<Item = Range<usize>>) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    for r in iter {
        if let Some(last) = out.last_mut() {
            if last.end == r.start {
                last.end = r.end;
                continue;
            }
        }
        out.push(r);
    }
    out
}

/// Loss record of one progressive step.
#[derive(Debug, Clone, Copy)]
pub enum StepLosses {
    /// Head step: the three-term head loss.
    Drh { rec: f64, mse: f64, den_softmax: f64 },
    /// Final whole-backbone step: plain cross-entropy.
    BackboneCe { ce: f64 },
    /// Single-step ablation: all K+1 losses summed into one value.
    Combined { total: f64 },
    /// Distillation feature step: scaled feature MSE.
    Feature { feature: f64 },
    /// Distillation score step.
    Score { score: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step_index: usize,
    pub losses: StepLosses,
    pub total: f64,
    pub grad_norm: f64,
    /// Fingerprint of the noisy batch used by this step (0 when no noise).
    pub noise_sig: u64,
}

/// FNV-1a over the element bit patterns; used to show that the K+1 steps saw
/// pairwise different noise.
pub fn noise_signature<E: Element>(a: &Array4<E>) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &v in a.iter() {
        for b in Element::to_f64(v).to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for &g in labels {
        if g >= num_classes {
            return Err(Error::LabelOutOfRange { label: g, num_classes });
        }
    }
    Ok(())
}

/// Forward and backward of head step k. Parameter gradients are accumulated
/// into `grads`; the returned loss terms are batch means.
pub fn step_k_graph<E: Element>(
    model: &mut PmalModel<E>,
    grads: &mut PmalModel<E>,
    clean: &Array4<E>,
    noisy: &Array4<E>,
    labels: &[usize],
    k: usize,
    primary: bool,
) -> Result<DrhLoss<E>> {
    let stage = model.tap_specs[k - 1].stage_index;
    let mode_data = NormMode::Train { update_running: primary };
    // The re-forwarded denoised image is a derived input: batch statistics
    // are used but running statistics are never updated from it.
    let mode_derived = NormMode::Train { update_running: false };

    let backbone = &mut model.backbone;
    let head = &mut model.heads[k - 1];
    let g_backbone = &mut grads.backbone;
    let g_head = &mut grads.heads[k - 1];

    // Noisy pass to the tap, head score, denoised image.
    let (x, stage_caches) = backbone.forward_to_stage(noisy, stage, mode_data);
    let (d, enc_cache) = head.encode_train(&x, mode_data)?;
    let (p, rec_cache) = head.recognize.forward(&d, mode_data);
    let (den_out, den_cache) = head.denoise(&x, noisy)?;

    // Re-forward the denoised image through the same stages and head.
    let (x_den, stage_caches_den) = backbone.forward_to_stage(&den_out.denoised, stage, mode_derived);
    let (d_den, enc_cache_den) = head.encode_train(&x_den, mode_derived)?;
    let (p_den, rec_cache_den) = head.recognize.forward(&d_den, mode_derived);

    let losses = drh_loss(&p, &den_out.denoised, &p_den, clean, labels)?;

    // Backward. Head parameters take gradient from both uses.
    let (_, dp) = softmax_cross_entropy(&p, labels);
    let (_, dp_den) = softmax_cross_entropy(&p_den, labels);

    let dd_den = head.recognize.backward(&rec_cache_den, &dp_den, &mut g_head.recognize);
    let dx_den = head.encode.backward(&enc_cache_den, &dd_den, &mut g_head.encode);
    let d_denoised_rec = backbone.backward_from_stage(&stage_caches_den, &dx_den, g_backbone);
    let d_denoised = &mse_grad(&den_out.denoised, clean) + &d_denoised_rec;

    let d_tap_restore = head.restore.backward(&den_cache.restore, &d_denoised, &mut g_head.restore);
    // The skip path ends at the noisy input, which is a leaf.
    let _ = head.skip.backward(&den_cache.skip, &d_denoised, &mut g_head.skip);

    let dd = head.recognize.backward(&rec_cache, &dp, &mut g_head.recognize);
    let dx_rec = head.encode.backward(&enc_cache, &dd, &mut g_head.encode);
    let d_tap = &dx_rec + &d_tap_restore;
    let _ = backbone.backward_from_stage(&stage_caches, &d_tap, g_backbone);

    Ok(losses)
}

/// Forward and backward of the final whole-backbone cross-entropy step.
pub fn final_step_graph<E: Element>(
    model: &mut PmalModel<E>,
    grads: &mut PmalModel<E>,
    noisy: &Array4<E>,
    labels: &[usize],
    primary: bool,
) -> Result<E> {
    let mode = NormMode::Train { update_running: primary };
    let (score, cache) = model.backbone.forward_full(noisy, mode);
    let (ce, d_score) = softmax_cross_entropy(&score, labels);
    let _ = model.backbone.backward_full(&cache, &d_score, &mut grads.backbone);
    Ok(ce)
}

/// One progressive training iteration: K head steps then the whole-backbone
/// step, each with freshly drawn noise and its own optimizer update. Each
/// step's update is visible to the next step within the iteration.
pub fn pmal_train_iteration<E: Element, R: Rng>(
    model: &mut PmalModel<E>,
    clean: &Array4<E>,
    labels: &[usize],
    optimizers: &mut [SamState],
    sigma: f64,
    lr: f64,
    noise_rng: &mut R,
) -> Result<Vec<StepReport>> {
    let k_total = model.k();
    assert_eq!(optimizers.len(), k_total + 1, "need one optimizer per step");
    check_labels(labels, model.num_classes())?;
    let mut reports = Vec::with_capacity(k_total + 1);
    let mut params = model.params_flat();

    for k in 1..=k_total {
        let noisy = add_noise_batch(clean, sigma, noise_rng);
        let ranges = model.ranges_for_step(k);
        let mut last_losses = None;
        let outcome = optimizers[k - 1].step(&mut params, &ranges, lr, k, |p, primary| {
            model.set_params(p);
            let mut grads = model.zeros_like();
            let losses = step_k_graph(model, &mut grads, clean, &noisy, labels, k, primary)?;
            if primary {
                last_losses = Some(losses);
            }
            Ok((losses.total, grads.params_flat()))
        })?;
        model.set_params(&params);
        let l = last_losses.expect("primary pass ran");
        reports.push(StepReport {
            step_index: k,
            losses: StepLosses::Drh {
                rec: l.rec.to_f64(),
                mse: l.mse.to_f64(),
                den_softmax: l.den_softmax.to_f64(),
            },
            total: outcome.loss,
            grad_norm: outcome.grad_norm,
            noise_sig: if sigma > 0.0 { noise_signature(&noisy) } else { 0 },
        });
    }

    // Step K+1: whole backbone under cross-entropy, fresh noise again.
    let noisy = add_noise_batch(clean, sigma, noise_rng);
    let ranges = model.ranges_for_step(k_total + 1);
    let outcome = optimizers[k_total].step(&mut params, &ranges, lr, k_total + 1, |p, primary| {
        model.set_params(p);
        let mut grads = model.zeros_like();
        let ce = final_step_graph(model, &mut grads, &noisy, labels, primary)?;
        Ok((ce, grads.params_flat()))
    })?;
    model.set_params(&params);
    reports.push(StepReport {
        step_index: k_total + 1,
        losses: StepLosses::BackboneCe { ce: outcome.loss },
        total: outcome.loss,
        grad_norm: outcome.grad_norm,
        noise_sig: if sigma > 0.0 { noise_signature(&noisy) } else { 0 },
    });
    Ok(reports)
}

/// Single-step ablation: all K+1 losses (each on its own fresh noise) are
/// summed and minimized in one combined update of every parameter.
pub fn pmal_train_iteration_single_step<E: Element, R: Rng>(
    model: &mut PmalModel<E>,
    clean: &Array4<E>,
    labels: &[usize],
    optimizer: &mut SamState,
    sigma: f64,
    lr: f64,
    noise_rng: &mut R,
) -> Result<Vec<StepReport>> {
    let k_total = model.k();
    check_labels(labels, model.num_classes())?;
    let noisy_batches: Vec<Array4<E>> = (0..=k_total)
        .map(|_| add_noise_batch(clean, sigma, noise_rng))
        .collect();
    let ranges = model.ranges_all();
    let mut params = model.params_flat();
    let outcome = optimizer.step(&mut params, &ranges, lr, 1, |p, primary| {
        model.set_params(p);
        let mut grads = model.zeros_like();
        let mut total = E::zero();
        for k in 1..=k_total {
            let l = step_k_graph(model, &mut grads, clean, &noisy_batches[k - 1], labels, k, primary)?;
            total = total + l.total;
        }
        let ce = final_step_graph(model, &mut grads, &noisy_batches[k_total], labels, primary)?;
        total = total + ce;
        Ok((total, grads.params_flat()))
    })?;
    model.set_params(&params);
    Ok(vec![StepReport {
        step_index: 1,
        losses: StepLosses::Combined { total: outcome.loss },
        total: outcome.loss,
        grad_norm: outcome.grad_norm,
        noise_sig: if sigma > 0.0 { noise_signature(&noisy_batches[0]) } else { 0 },
    }])
}

/// Eval-mode inference on clean images: one pass yields the K head scores
/// and the backbone score; the prediction is their arithmetic mean. The
/// denoising sub-heads are not evaluated.
pub fn pmal_infer<E: Element>(
    model: &PmalModel<E>,
    images: &Array4<E>,
) -> Result<(Array2<E>, Vec<Array2<E>>)> {
    let out = model.backbone.infer_with_taps(images)?;
    let mut parts = Vec::with_capacity(model.k() + 1);
    for (head, tap) in model.heads.iter().zip(out.taps.iter()) {
        parts.push(head.score_infer(tap)?);
    }
    parts.push(out.final_score);
    let mut mean = parts[0].clone();
    for p in &parts[1..] {
        mean += p;
    }
    mean.mapv_inplace(|v| v / E::from_f64(parts.len() as f64));
    Ok((mean, parts))
}

/// Allocates the per-step optimizer instances (one per progressive step, or
/// a single one in single-step mode), all sharing one schedule.
pub fn make_optimizers<E: Element>(model: &PmalModel<E>, sam: SamConfig, single_step: bool) -> Vec<SamState> {
    let n = if single_step { 1 } else { model.k() + 1 };
    (0..n).map(|_| SamState::new(sam, model.param_len())).collect()
}

/// Iterates over shuffled batches of a dataset, applying train-time flip
/// augmentation, and yields `(clean_batch, labels)` in a deterministic order
/// derived from `(seed, epoch)`.
pub fn epoch_batches<E: Element>(
    ds: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    augment: bool,
) -> Vec<(Array4<E>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("order/{epoch}")));
    // Fisher-Yates, driven by the derived per-epoch RNG.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("aug/{epoch}")));
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let (mut images, labels) = ds.batch::<E>(chunk);
        if augment {
            for mut img in images.axis_iter_mut(Axis(0)) {
                if aug_rng.random::<bool>() {
                    let flipped: Vec<E> = {
                        let (c, h, w) = img.dim();
                        let mut v = Vec::with_capacity(c * h * w);
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    v.push(img[(ci, i, w - 1 - j)]);
                                }
                            }
                        }
                        v
                    };
                    for (dst, src) in img.iter_mut().zip(flipped) {
                        *dst = src;
                    }
                }
            }
        }
        out.push((images, labels));
    }
    out
}

/// Progress of a full training run, reported once per epoch.
pub struct EpochState<'a, E: Element> {
    pub epoch: usize,
    pub row: &'a MetricsRow,
    pub model: &'a PmalModel<E>,
    pub optimizers: &'a [SamState],
    pub is_best_val: bool,
}

/// Trains a PMAL model for `cfg.epochs` epochs under the cosine schedule.
/// Logs one metrics row per epoch (per-step losses, train/val accuracy of
/// the averaged prediction, learning rate) and reports best-validation
/// epochs through the callback so callers can checkpoint them. Training can
/// resume from `start_epoch` because all randomness is derived per epoch.
pub fn pmal_train<E: Element>(
    model: &mut PmalModel<E>,
    optimizers: &mut [SamState],
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &ExperimentConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochState<E>) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let sam = cfg.sam_config();
    let mut rows = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let noise_seed = derive_seed(cfg.seed, "noise");
    for epoch in start_epoch..cfg.epochs {
        let lr = sam.lr_at(epoch);
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(noise_seed, &epoch.to_string()));
        let batches = epoch_batches::<E>(train, cfg.batch_size, cfg.seed, epoch, true);
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut n_batches = 0.0;
        for (images, labels) in &batches {
            let reports = if cfg.single_step {
                pmal_train_iteration_single_step(
                    model, images, labels, &mut optimizers[0], cfg.sigma, lr, &mut noise_rng,
                )?
            } else {
                pmal_train_iteration(
                    model, images, labels, optimizers, cfg.sigma, lr, &mut noise_rng,
                )?
            };
            accumulate_losses(&mut sums, &reports);
            n_batches += 1.0;
        }
        for (_, v) in sums.iter_mut() {
            *v /= n_batches;
        }
        let train_acc = crate::eval::accuracy_of(&*model, train, cfg.batch_size)?;
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            crate::eval::accuracy_of(&*model, val, cfg.batch_size)?
        };
        let mut values = vec![("lr".to_string(), lr)];
        values.extend(sums);
        values.push(("train_acc".to_string(), train_acc));
        values.push(("val_acc".to_string(), val_acc));
        let row = MetricsRow { epoch, values };
        let is_best = val_acc.is_finite() && val_acc > best_val;
        if is_best {
            best_val = val_acc;
        }
        on_epoch(&EpochState {
            epoch,
            row: &row,
            model,
            optimizers,
            is_best_val: is_best,
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Folds per-step losses into named sums (`l_rec_1`, `l_mse_1`, ...,
/// `l_ce`), keeping insertion order stable for CSV output.
pub fn accumulate_losses(sums: &mut Vec<(String, f64)>, reports: &[StepReport]) {
    let mut add = |key: String, v: f64| {
        if let Some(e) = sums.iter_mut().find(|(k, _)| *k == key) {
            e.1 += v;
        } else {
            sums.push((key, v));
        }
    };
    for r in reports {
        match r.losses {
            StepLosses::Drh { rec, mse, den_softmax } => {
                add(format!("l_rec_{}", r.step_index), rec);
                add(format!("l_mse_{}", r.step_index), mse);
                add(format!("l_den_{}", r.step_index), den_softmax);
            }
            StepLosses::BackboneCe { ce } => add("l_ce".into(), ce),
            StepLosses::Combined { total } => add("l_combined".into(), total),
            StepLosses::Feature { feature } => {
                add(format!("l_feat_{}", r.step_index), feature)
            }
            StepLosses::Score { score } => add("l_score".into(), score),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ParamGroup;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            input_size: 32,
            k: 2,
            tap_stages: vec![],
            descriptor_dim: 16,
            restore_channels: 8,
            skip_channels: 4,
            batch_size: 2,
            epochs: 4,
            ..ExperimentConfig::desk_defaults()
        }
    }

    fn tiny_model(seed: u64) -> PmalModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PmalModel::new(&tiny_cfg(), 3, &mut rng).unwrap()
    }

    fn toy_batch(n: usize) -> (Array4<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let images = Array4::from_shape_fn((n, 3, 32, 32), |_| rng.random::<f32>());
        let labels = (0..n).map(|i| i % 3).collect();
        (images, labels)
    }

    #[test]
    fn k_steps_plus_one_updates_per_iteration() {
        let mut model = tiny_model(1);
        let (images, labels) = toy_batch(2);
        let mut opts = make_optimizers(&model, SamConfig::default(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reports =
            pmal_train_iteration(&mut model, &images, &labels, &mut opts, 0.05, 0.01, &mut rng)
                .unwrap();
        assert_eq!(reports.len(), model.k() + 1);
        let updates: u64 = opts.iter().map(|o| o.update_count).sum();
        assert_eq!(updates, (model.k() + 1) as u64);
        // Fresh independent noise per step: pairwise distinct fingerprints.
        for i in 0..reports.len() {
            for j in i + 1..reports.len() {
                assert_ne!(reports[i].noise_sig, reports[j].noise_sig);
            }
        }
        // All reported losses finite.
        for r in &reports {
            assert!(r.total.is_finite() && r.grad_norm.is_finite());
        }
    }

    #[test]
    fn k0_reduces_to_plain_cross_entropy_training() {
        let mut cfg = tiny_cfg();
        cfg.k = 0;
        cfg.sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = PmalModel::<f32>::new(&cfg, 3, &mut rng).unwrap();
        let (images, labels) = toy_batch(2);
        let mut opts = make_optimizers(&model, cfg.sam_config(), false);
        let mut nrng = ChaCha8Rng::seed_from_u64(5);
        let reports =
            pmal_train_iteration(&mut model, &images, &labels, &mut opts, 0.0, 0.01, &mut nrng)
                .unwrap();
        assert_eq!(reports.len(), 1);
        assert!(matches!(reports[0].losses, StepLosses::BackboneCe { .. }));
    }

    #[test]
    fn zero_lr_without_sam_is_a_fixpoint() {
        let mut model = tiny_model(3);
        let (images, labels) = toy_batch(2);
        let sam = SamConfig { enabled: false, weight_decay: 0.0, ..SamConfig::default() };
        let mut opts = make_optimizers(&model, sam, false);
        let before = model.params_flat();
        let mut run = |model: &mut PmalModel<f32>, opts: &mut [SamState]| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            pmal_train_iteration(model, &images, &labels, opts, 0.05, 0.0, &mut rng).unwrap()
        };
        let r1 = run(&mut model, &mut opts);
        let r2 = run(&mut model, &mut opts);
        assert_eq!(before, model.params_flat());
        for (a, b) in r1.iter().zip(r2.iter()) {
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn single_step_mode_makes_one_update() {
        let mut model = tiny_model(4);
        let (images, labels) = toy_batch(2);
        let mut opts = make_optimizers(&model, SamConfig::default(), true);
        assert_eq!(opts.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reports = pmal_train_iteration_single_step(
            &mut model, &images, &labels, &mut opts[0], 0.05, 0.01, &mut rng,
        )
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(opts[0].update_count, 1);
    }

    #[test]
    fn infer_averages_parts_and_skips_denoising() {
        let model = tiny_model(6);
        let (images, _) = toy_batch(2);
        let calls_before = model.denoise_call_count();
        let (p_final, parts) = pmal_infer(&model, &images).unwrap();
        assert_eq!(parts.len(), model.k() + 1);
        assert_eq!(model.denoise_call_count(), calls_before);
        // Scalar-loop averaging oracle.
        for i in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for p in &parts {
                    acc += p[(i, c)] as f64;
                }
                let expect = acc / parts.len() as f64;
                assert!((p_final[(i, c)] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn infer_of_identical_parts_is_identity() {
        // Mean of identical vectors is that vector; checked through the
        // degenerate K=0 model where the only part is the backbone score.
        let mut cfg = tiny_cfg();
        cfg.k = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = PmalModel::<f32>::new(&cfg, 3, &mut rng).unwrap();
        let (images, _) = toy_batch(2);
        let (p_final, parts) = pmal_infer(&model, &images).unwrap();
        assert_eq!(p_final, parts[0]);
    }

    #[test]
    fn mean_of_basis_vectors_is_uniform() {
        use ndarray::arr2;
        let parts = [
            arr2(&[[1.0f64, 0.0, 0.0, 0.0]]),
            arr2(&[[0.0, 1.0, 0.0, 0.0]]),
            arr2(&[[0.0, 0.0, 1.0, 0.0]]),
            arr2(&[[0.0, 0.0, 0.0, 1.0]]),
        ];
        let mut mean = parts[0].clone();
        for p in &parts[1..] {
            mean += p;
        }
        mean.mapv_inplace(|v| v / 4.0);
        assert_eq!(mean, arr2(&[[0.25, 0.25, 0.25, 0.25]]));
    }

    #[test]
    fn step_gradients_respect_parameter_partition() {
        // Head j gets gradient only in step j; the classifier only in the
        // final step.
        let mut model = tiny_model(7);
        let (images, labels) = toy_batch(2);
        let layout = model.param_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=model.k() {
            let noisy = add_noise_batch(&images, 0.05, &mut rng);
            let mut grads = model.zeros_like();
            step_k_graph(&mut model, &mut grads, &images, &noisy, &labels, k, false).unwrap();
            let flat = grads.params_flat();
            for (group, name, range) in &layout {
                let zero = flat[range.clone()].iter().all(|&v| v == 0.0);
                match group {
                    ParamGroup::Head(h) if *h != k => {
                        assert!(zero, "step {k} leaked into {name}")
                    }
                    ParamGroup::Classifier => assert!(zero, "step {k} touched classifier"),
                    ParamGroup::Stage(s) if *s > model.tap_specs[k - 1].stage_index => {
                        assert!(zero, "step {k} leaked into deeper {name}")
                    }
                    _ => {}
                }
            }
        }
        let noisy = add_noise_batch(&images, 0.05, &mut rng);
        let mut grads = model.zeros_like();
        final_step_graph(&mut model, &mut grads, &noisy, &labels, false).unwrap();
        let flat = grads.params_flat();
        for (group, name, range) in &layout {
            if let ParamGroup::Head(_) = group {
                assert!(
                    flat[range.clone()].iter().all(|&v| v == 0.0),
                    "final step leaked into {name}"
                );
            }
        }
    }

    #[test]
    fn step_ranges_cover_expected_groups() {
        let model = tiny_model(9);
        let layout = model.param_layout();
        let in_ranges = |ranges: &[Range<usize>], r: &Range<usize>| {
            ranges.iter().any(|q| q.start <= r.start && r.end <= q.end)
        };
        let r1 = model.ranges_for_step(1);
        for (g, _, r) in &layout {
            let included = in_ranges(&r1, r);
            let expected = match g {
                ParamGroup::Stage(s) => *s <= model.tap_specs[0].stage_index,
                ParamGroup::Head(h) => *h == 1,
                ParamGroup::Classifier => false,
            };
            assert_eq!(included, expected);
        }
        let r_final = model.ranges_for_step(model.k() + 1);
        for (g, _, r) in &layout {
            let included = in_ranges(&r_final, r);
            let expected = !matches!(g, ParamGroup::Head(_));
            assert_eq!(included, expected);
        }
    }

    #[test]
    fn flat_roundtrip_preserves_parameters() {
        let mut model = tiny_model(11);
        let flat = model.params_flat();
        assert_eq!(flat.len(), model.param_len());
        let mut modified = flat.clone();
        modified[0] += 1.0;
        model.set_params(&modified);
        assert_eq!(model.params_flat(), modified);
    }
}
