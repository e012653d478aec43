//! Progressive multi-task distillation: transfers a trained multi-head
//! model into a plain backbone with the same stage structure.
//!
//! Per batch the student takes K+1 steps on clean images: step k matches its
//! tap-k features to the frozen teacher's (scaled by alpha), and the final
//! step matches its score to every teacher score while also predicting the
//! label. A second phase fine-tunes the student with cross-entropy alone.

use crate::backbone::{ParamGroup, RefBackbone};
use crate::config::{derive_seed, ExperimentConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::nn::{mse, mse_grad, softmax_cross_entropy, Element, NormMode};
use crate::pmal::{accumulate_losses, epoch_batches, PmalModel, StepLosses, StepReport};
use crate::sam::{SamConfig, SamState};
use ndarray::{Array2, Array4};
use std::ops::Range;

impl<E: Element> RefBackbone<E> {
    pub fn param_layout(&self) -> Vec<(ParamGroup, String, Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0usize;
        self.visit_params(&mut |g, name, s| {
            out.push((g, name.to_string(), off..off + s.len()));
            off += s.len();
        });
        out
    }

    pub fn params_flat(&self) -> Vec<E> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, _, s| out.extend_from_slice(s));
        out
    }

    pub fn set_params(&mut self, flat: &[E]) {
        let mut off = 0usize;
        self.visit_params_mut(&mut |_, _, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        assert_eq!(off, flat.len());
    }

    /// Ranges of stages `1..=depth` (no classifier).
    pub fn ranges_to_stage(&self, depth: usize) -> Vec<Range<usize>> {
        let mut out: Vec<Range<usize>> = Vec::new();
        for (g, _, r) in self.param_layout() {
            let keep = matches!(g, ParamGroup::Stage(s) if s <= depth);
            if keep {
                if let Some(last) = out.last_mut() {
                    if last.end == r.start {
                        last.end = r.end;
                        continue;
                    }
                }
                out.push(r);
            }
        }
        out
    }

    pub fn ranges_all(&self) -> Vec<Range<usize>> {
        vec![0..self.param_count()]
    }
}

/// A frozen teacher and the plain student being distilled into.
pub struct DistillPair<E: Element> {
    pub teacher: PmalModel<E>,
    pub student: RefBackbone<E>,
    /// Feature-loss scale alpha.
    pub alpha: f64,
}

impl<E: Element> DistillPair<E> {
    /// Validates that teacher and student share the stage structure; on
    /// mismatch the error carries a field-by-field diff.
    pub fn new(teacher: PmalModel<E>, student: RefBackbone<E>, alpha: f64) -> Result<Self> {
        let t = &teacher.backbone;
        let mut diff = String::new();
        let mut check = |field: &str, a: String, b: String| {
            if a != b {
                diff.push_str(&format!("  {field}: teacher {a} vs student {b}\n"));
            }
        };
        check("input_h", t.input_h.to_string(), student.input_h.to_string());
        check("input_w", t.input_w.to_string(), student.input_w.to_string());
        check(
            "num_classes",
            t.num_classes.to_string(),
            student.num_classes.to_string(),
        );
        check(
            "tap_stages",
            format!("{:?}", t.tap_stages),
            format!("{:?}", student.tap_stages),
        );
        check(
            "stage_count",
            t.stages.len().to_string(),
            student.stages.len().to_string(),
        );
        if diff.is_empty() {
            let ts = t.stage_shapes(t.input_h, t.input_w)?;
            let ss = student.stage_shapes(student.input_h, student.input_w)?;
            if ts != ss {
                diff.push_str(&format!("  tap shapes: teacher {ts:?} vs student {ss:?}\n"));
            }
        }
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch { diff });
        }
        if alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(Self { teacher, student, alpha })
    }
}

/// Teacher targets for one clean batch, computed once in eval mode and
/// reused across both optimizer passes of every step.
pub struct TeacherTargets<E: Element> {
    pub taps: Vec<Array4<E>>,
    pub head_scores: Vec<Array2<E>>,
    pub backbone_score: Array2<E>,
}

pub fn teacher_targets<E: Element>(
    teacher: &PmalModel<E>,
    clean: &Array4<E>,
) -> Result<TeacherTargets<E>> {
    let out = teacher.backbone.infer_with_taps(clean)?;
    let mut head_scores = Vec::with_capacity(teacher.k());
    for (head, tap) in teacher.heads.iter().zip(out.taps.iter()) {
        head_scores.push(head.score_infer(tap)?);
    }
    Ok(TeacherTargets {
        taps: out.taps,
        head_scores,
        backbone_score: out.final_score,
    })
}

/// One distillation iteration: K feature-matching steps then the score step.
/// No noise is involved anywhere; the teacher is read-only.
pub fn pmd_train_iteration<E: Element>(
    pair: &mut DistillPair<E>,
    clean: &Array4<E>,
    labels: &[usize],
    optimizers: &mut [SamState],
    lr: f64,
    baseline_kd: bool,
) -> Result<Vec<StepReport>> {
    let k_total = pair.teacher.k();
    let targets = teacher_targets(&pair.teacher, clean)?;
    let alpha = E::from_f64(pair.alpha);
    let mut reports = Vec::new();
    let student = &mut pair.student;
    let mut params = student.params_flat();

    if !baseline_kd {
        assert_eq!(optimizers.len(), k_total + 1, "need one optimizer per step");
        for k in 1..=k_total {
            let stage = pair.teacher.tap_specs[k - 1].stage_index;
            let target = &targets.taps[k - 1];
            let ranges = student.ranges_to_stage(stage);
            let outcome = optimizers[k - 1].step(&mut params, &ranges, lr, k, |p, primary| {
                student.set_params(p);
                let mode = NormMode::Train { update_running: primary };
                let (x_s, caches) = student.forward_to_stage(clean, stage, mode);
                let loss = alpha * mse(&x_s, target);
                let mut grads = student.zeros_like();
                let d_tap = mse_grad(&x_s, target).mapv(|v| v * alpha);
                let _ = student.backward_from_stage(&caches, &d_tap, &mut grads);
                Ok((loss, grads.params_flat()))
            })?;
            student.set_params(&params);
            reports.push(StepReport {
                step_index: k,
                losses: StepLosses::Feature { feature: outcome.loss },
                total: outcome.loss,
                grad_norm: outcome.grad_norm,
                noise_sig: 0,
            });
        }
    }

    // Score step: match every teacher score and predict the label.
    let score_opt = optimizers.last_mut().expect("at least one optimizer");
    let ranges = student.ranges_all();
    let outcome = score_opt.step(&mut params, &ranges, lr, k_total + 1, |p, primary| {
        student.set_params(p);
        let mode = NormMode::Train { update_running: primary };
        let (score, cache) = student.forward_full(clean, mode);
        let mut loss = E::zero();
        let mut d_score: Array2<E> = Array2::zeros(score.dim());
        for t in &targets.head_scores {
            loss = loss + mse(&score, t);
            d_score += &mse_grad(&score, t);
        }
        loss = loss + mse(&score, &targets.backbone_score);
        d_score += &mse_grad(&score, &targets.backbone_score);
        let (ce, d_ce) = softmax_cross_entropy(&score, labels);
        loss = loss + ce;
        d_score += &d_ce;
        let mut grads = student.zeros_like();
        let _ = student.backward_full(&cache, &d_score, &mut grads);
        Ok((loss, grads.params_flat()))
    })?;
    student.set_params(&params);
    reports.push(StepReport {
        step_index: k_total + 1,
        losses: StepLosses::Score { score: outcome.loss },
        total: outcome.loss,
        grad_norm: outcome.grad_norm,
        noise_sig: 0,
    });
    Ok(reports)
}

/// One fine-tuning iteration: plain cross-entropy on the whole student, with
/// the sharpness-aware step retained.
pub fn finetune_iteration<E: Element>(
    student: &mut RefBackbone<E>,
    clean: &Array4<E>,
    labels: &[usize],
    optimizer: &mut SamState,
    lr: f64,
) -> Result<StepReport> {
    let ranges = student.ranges_all();
    let mut params = student.params_flat();
    let outcome = optimizer.step(&mut params, &ranges, lr, 1, |p, primary| {
        student.set_params(p);
        let mode = NormMode::Train { update_running: primary };
        let (score, cache) = student.forward_full(clean, mode);
        let (ce, d_score) = softmax_cross_entropy(&score, labels);
        let mut grads = student.zeros_like();
        let _ = student.backward_full(&cache, &d_score, &mut grads);
        Ok((ce, grads.params_flat()))
    })?;
    student.set_params(&params);
    Ok(StepReport {
        step_index: 1,
        losses: StepLosses::BackboneCe { ce: outcome.loss },
        total: outcome.loss,
        grad_norm: outcome.grad_norm,
        noise_sig: 0,
    })
}

pub fn make_student_optimizers<E: Element>(
    student: &RefBackbone<E>,
    sam: SamConfig,
    k: usize,
    baseline_kd: bool,
) -> Vec<SamState> {
    let n = if baseline_kd { 1 } else { k + 1 };
    (0..n).map(|_| SamState::new(sam, student.param_count())).collect()
}

pub struct PmdEpochState<'a, E: Element> {
    pub epoch: usize,
    pub row: &'a MetricsRow,
    pub student: &'a RefBackbone<E>,
    pub is_best_val: bool,
    pub fine_tuning: bool,
}

/// Full distillation run: the first half of the epochs distills with the
/// K+1-step schedule, the second half fine-tunes with cross-entropy only.
/// The learning-rate schedule continues across the phase switch.
pub fn pmd_train<E: Element>(
    pair: &mut DistillPair<E>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &ExperimentConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&PmdEpochState<E>) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let sam = cfg.sam_config();
    let k = pair.teacher.k();
    let mut opts = make_student_optimizers(&pair.student, sam, k, cfg.baseline_kd);
    let distill_epochs = cfg.epochs / 2;
    let mut rows = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let seed = derive_seed(cfg.seed, "pmd");
    for epoch in start_epoch..cfg.epochs {
        let lr = sam.lr_at(epoch);
        let fine_tuning = epoch >= distill_epochs;
        let batches = epoch_batches::<E>(train, cfg.batch_size, seed, epoch, true);
        let mut sums: Vec<(String, f64)> = Vec::new();
        let mut n_batches = 0.0;
        for (images, labels) in &batches {
            let reports = if fine_tuning {
                let opt = opts.last_mut().unwrap();
                vec![finetune_iteration(&mut pair.student, images, labels, opt, lr)?]
            } else {
                pmd_train_iteration(pair, images, labels, &mut opts, lr, cfg.baseline_kd)?
            };
            accumulate_losses(&mut sums, &reports);
            n_batches += 1.0;
        }
        for (_, v) in sums.iter_mut() {
            *v /= n_batches;
        }
        let train_acc = crate::eval::accuracy_of(&pair.student, train, cfg.batch_size)?;
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            crate::eval::accuracy_of(&pair.student, val, cfg.batch_size)?
        };
        // One stable column set across both phases.
        let mut values = vec![
            ("lr".to_string(), lr),
            ("phase".to_string(), if fine_tuning { 2.0 } else { 1.0 }),
        ];
        if !cfg.baseline_kd {
            for i in 1..=k {
                let key = format!("l_feat_{i}");
                let v = sums.iter().find(|(s, _)| *s == key).map(|(_, v)| *v);
                values.push((key, v.unwrap_or(f64::NAN)));
            }
        }
        for key in ["l_score", "l_ce"] {
            let v = sums.iter().find(|(s, _)| s == key).map(|(_, v)| *v);
            values.push((key.to_string(), v.unwrap_or(f64::NAN)));
        }
        values.push(("train_acc".to_string(), train_acc));
        values.push(("val_acc".to_string(), val_acc));
        let row = MetricsRow { epoch, values };
        let is_best = val_acc.is_finite() && val_acc > best_val;
        if is_best {
            best_val = val_acc;
        }
        on_epoch(&PmdEpochState {
            epoch,
            row: &row,
            student: &pair.student,
            is_best_val: is_best,
            fine_tuning,
        })?;
        rows.push(row);
    }
    Ok(rows)
}
