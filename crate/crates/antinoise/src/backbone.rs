//! Staged feature extractor with readable intermediate taps.
//!
//! The reference backbone is five stages of conv 3x3 / batch norm / ReLU /
//! 2x2 max-pool downsample (widths 32..512), followed by global average
//! pooling and a linear classifier. Taps are reads at stage boundaries; they
//! add no parameters. Any backbone that can report its tap shapes ahead of
//! time and expose per-stage forward/backward passes can stand in for it.

use crate::error::{Error, Result};
use crate::nn::{
    init, BatchNorm2d, Bn2dCache, Conv2d, Element, GlobalAvgPool, Linear, MaxPool2, NormMode,
    Relu, Visit,
};
use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Channel widths of the reference backbone's five stages.
pub const REF_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];

/// Where a flat-parameter slice belongs: a backbone stage (1-based), the
/// final classifier, or a head (1-based). Training steps select parameter
/// subsets by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Stage(usize),
    Classifier,
    Head(usize),
}

/// Shape of one tapped stage output for a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTapSpec {
    pub stage_index: usize,
    pub channels: usize,
    pub spatial_h: usize,
    pub spatial_w: usize,
}

impl StageTapSpec {
    /// First-upsample scale of the restoration chain fed by this tap.
    pub fn first_upsample_scale(&self, input_h: usize, input_w: usize) -> (usize, usize) {
        (input_h / (8 * self.spatial_h), input_w / (8 * self.spatial_w))
    }
}

/// Checks the divisibility rules a tap must satisfy so the restoration chain
/// (one tap-dependent shuffle, then three x2 shuffles) lands exactly on the
/// input size: `H' mod 8H = 0`, `W' mod 8W = 0`, and channels divisible by
/// `(H'/8H)*(W'/8W)*4`.
pub fn validate_tap_specs(input_h: usize, input_w: usize, specs: &[StageTapSpec]) -> Result<()> {
    let mut prev: Option<&StageTapSpec> = None;
    for spec in specs {
        if let Some(p) = prev {
            if spec.stage_index <= p.stage_index {
                return Err(Error::Config(format!(
                    "tap stages must be strictly increasing, got {} after {}",
                    spec.stage_index, p.stage_index
                )));
            }
            if spec.spatial_h > p.spatial_h || spec.spatial_w > p.spatial_w {
                return Err(Error::Config(format!(
                    "tap spatial size must be non-increasing with depth (stage {})",
                    spec.stage_index
                )));
            }
        }
        if input_h % (8 * spec.spatial_h) != 0 || input_w % (8 * spec.spatial_w) != 0 {
            return Err(Error::Divisibility(format!(
                "input {}x{} not divisible by 8x tap size {}x{} at stage {}",
                input_h, input_w, spec.spatial_h, spec.spatial_w, spec.stage_index
            )));
        }
        let (sh, sw) = spec.first_upsample_scale(input_h, input_w);
        if spec.channels % (sh * sw * 4) != 0 {
            return Err(Error::Divisibility(format!(
                "stage {} channels {} not divisible by first-shuffle factor {}*{}*4",
                spec.stage_index, spec.channels, sh, sw
            )));
        }
        prev = Some(spec);
    }
    Ok(())
}

/// All tapped feature maps (shallow to deep) plus the backbone's own score.
pub struct BackboneOutput<E: Element> {
    pub taps: Vec<Array4<E>>,
    pub final_score: Array2<E>,
}

/// One backbone stage: conv 3x3 (same padding), batch norm, ReLU, 2x2 max pool.
#[derive(Clone)]
pub struct Stage<E: Element> {
    pub conv: Conv2d<E>,
    pub bn: BatchNorm2d<E>,
}

/// Saved per-stage forward state for the backward pass.
pub struct StageCache<E: Element> {
    x: Array4<E>,
    bn: Bn2dCache<E>,
    relu_out: Array4<E>,
    pool_arg: Vec<usize>,
}

pub struct FullCache<E: Element> {
    pub stages: Vec<StageCache<E>>,
    feat_dim: (usize, usize, usize, usize),
    pooled: Array2<E>,
}

/// The compact reference backbone.
#[derive(Clone)]
pub struct RefBackbone<E: Element> {
    pub stages: Vec<Stage<E>>,
    pub classifier: Linear<E>,
    pub num_classes: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub tap_stages: Vec<usize>,
}

impl<E: Element> RefBackbone<E> {
    /// Builds a randomly initialized backbone and validates the tap layout.
    pub fn new<R: Rng>(
        input_h: usize,
        input_w: usize,
        num_classes: usize,
        tap_stages: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let n_stages = REF_WIDTHS.len();
        if input_h == 0 || input_w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if input_h % (1 << n_stages) != 0 || input_w % (1 << n_stages) != 0 {
            return Err(Error::Config(format!(
                "input {input_h}x{input_w} must be divisible by 2^{n_stages}"
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        for &t in tap_stages {
            if t == 0 || t > n_stages {
                return Err(Error::Config(format!(
                    "tap stage {t} out of range 1..={n_stages}"
                )));
            }
        }
        let mut stages = Vec::with_capacity(n_stages);
        let mut in_ch = 3;
        for &out_ch in &REF_WIDTHS {
            stages.push(Stage {
                conv: init::conv2d(out_ch, in_ch, 3, rng),
                bn: BatchNorm2d::new(out_ch),
            });
            in_ch = out_ch;
        }
        let classifier = init::linear(num_classes, REF_WIDTHS[n_stages - 1], rng);
        let bb = Self {
            stages,
            classifier,
            num_classes,
            input_h,
            input_w,
            tap_stages: tap_stages.to_vec(),
        };
        validate_tap_specs(input_h, input_w, &bb.stage_shapes(input_h, input_w)?)?;
        Ok(bb)
    }

    /// Tap shapes this backbone will produce for the given input size,
    /// without running a forward pass. Fails on divisibility violations.
    pub fn stage_shapes(&self, input_h: usize, input_w: usize) -> Result<Vec<StageTapSpec>> {
        if input_h == 0 || input_w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        let specs: Vec<StageTapSpec> = self
            .tap_stages
            .iter()
            .map(|&s| StageTapSpec {
                stage_index: s,
                channels: REF_WIDTHS[s - 1],
                spatial_h: input_h >> s,
                spatial_w: input_w >> s,
            })
            .collect();
        validate_tap_specs(input_h, input_w, &specs)?;
        Ok(specs)
    }

    pub fn check_input(&self, images: &Array4<E>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 || h != self.input_h || w != self.input_w {
            return Err(Error::ShapeMismatch(format!(
                "expected 3x{}x{} input, got {c}x{h}x{w}",
                self.input_h, self.input_w
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite input values".into()));
        }
        Ok(())
    }

    fn stage_forward_train(
        stage: &mut Stage<E>,
        x: &Array4<E>,
        mode: NormMode,
    ) -> (Array4<E>, StageCache<E>) {
        let c = stage.conv.forward(x);
        let (b, bn_cache) = stage.bn.forward(&c, mode);
        let r = Relu::forward(&b);
        let (y, pool_arg) = MaxPool2::forward(&r);
        (
            y,
            StageCache {
                x: x.clone(),
                bn: bn_cache,
                relu_out: r,
                pool_arg,
            },
        )
    }

    fn stage_backward(
        stage: &Stage<E>,
        cache: &StageCache<E>,
        dy: &Array4<E>,
        grad: &mut Stage<E>,
    ) -> Array4<E> {
        let mut dr = MaxPool2::backward(dy, &cache.pool_arg, cache.relu_out.dim());
        Relu::backward(&cache.relu_out, &mut dr);
        let db = stage.bn.backward(&cache.bn, &dr, &mut grad.bn);
        stage.conv.backward(&cache.x, &db, &mut grad.conv)
    }

    fn stage_infer(stage: &Stage<E>, x: &Array4<E>) -> Array4<E> {
        let c = stage.conv.forward(x);
        let b = stage.bn.infer(&c);
        let r = Relu::forward(&b);
        MaxPool2::forward(&r).0
    }

    /// Forward through stages `1..=upto`, returning the tap and per-stage caches.
    pub fn forward_to_stage(
        &mut self,
        images: &Array4<E>,
        upto: usize,
        mode: NormMode,
    ) -> (Array4<E>, Vec<StageCache<E>>) {
        let mut caches = Vec::with_capacity(upto);
        let mut cur = images.clone();
        for stage in self.stages[..upto].iter_mut() {
            let (y, cache) = Self::stage_forward_train(stage, &cur, mode);
            caches.push(cache);
            cur = y;
        }
        (cur, caches)
    }

    /// Backward from a tap gradient down to the input image gradient,
    /// accumulating parameter gradients for the traversed stages.
    pub fn backward_from_stage(
        &self,
        caches: &[StageCache<E>],
        d_tap: &Array4<E>,
        grads: &mut RefBackbone<E>,
    ) -> Array4<E> {
        let mut dy = d_tap.clone();
        for (stage, (cache, gstage)) in self.stages[..caches.len()]
            .iter()
            .zip(caches.iter().zip(grads.stages.iter_mut()))
            .rev()
        {
            dy = Self::stage_backward(stage, cache, &dy, gstage);
        }
        dy
    }

    /// Full training forward: all stages, global average pool, classifier.
    pub fn forward_full(&mut self, images: &Array4<E>, mode: NormMode) -> (Array2<E>, FullCache<E>) {
        let n_stages = self.stages.len();
        let (feat, stages) = self.forward_to_stage(images, n_stages, mode);
        let pooled = GlobalAvgPool::forward(&feat);
        let score = self.classifier.forward(&pooled);
        (
            score,
            FullCache {
                stages,
                feat_dim: feat.dim(),
                pooled,
            },
        )
    }

    pub fn backward_full(
        &self,
        cache: &FullCache<E>,
        d_score: &Array2<E>,
        grads: &mut RefBackbone<E>,
    ) -> Array4<E> {
        let d_pooled = self
            .classifier
            .backward(&cache.pooled, d_score, &mut grads.classifier);
        let d_feat = GlobalAvgPool::backward(&d_pooled, cache.feat_dim);
        self.backward_from_stage(&cache.stages, &d_feat, grads)
    }

    /// Single eval-mode pass producing every tap and the backbone score.
    /// Deterministic for fixed parameters and input.
    pub fn infer_with_taps(&self, images: &Array4<E>) -> Result<BackboneOutput<E>> {
        self.check_input(images)?;
        let mut taps = Vec::with_capacity(self.tap_stages.len());
        let mut cur = images.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            cur = Self::stage_infer(stage, &cur);
            if self.tap_stages.contains(&(i + 1)) {
                taps.push(cur.clone());
            }
        }
        let pooled = GlobalAvgPool::forward(&cur);
        let final_score = self.classifier.forward(&pooled);
        Ok(BackboneOutput { taps, final_score })
    }

    /// Training-mode pass producing every tap and the score, with caches so
    /// gradients can propagate through all returned values.
    pub fn forward_with_taps(
        &mut self,
        images: &Array4<E>,
        mode: NormMode,
    ) -> Result<(BackboneOutput<E>, FullCache<E>)> {
        self.check_input(images)?;
        let mut taps = Vec::with_capacity(self.tap_stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut cur = images.clone();
        let tap_stages = self.tap_stages.clone();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let (y, cache) = Self::stage_forward_train(stage, &cur, mode);
            caches.push(cache);
            cur = y;
            if tap_stages.contains(&(i + 1)) {
                taps.push(cur.clone());
            }
        }
        let pooled = GlobalAvgPool::forward(&cur);
        let final_score = self.classifier.forward(&pooled);
        Ok((
            BackboneOutput { taps, final_score },
            FullCache {
                stages: caches,
                feat_dim: cur.dim(),
                pooled,
            },
        ))
    }

    /// Plain eval-mode classification scores.
    pub fn infer_scores(&self, images: &Array4<E>) -> Result<Array2<E>> {
        Ok(self.infer_with_taps(images)?.final_score)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stages: self
                .stages
                .iter()
                .map(|s| Stage {
                    conv: s.conv.zeros_like(),
                    bn: s.bn.zeros_like(),
                })
                .collect(),
            classifier: self.classifier.zeros_like(),
            num_classes: self.num_classes,
            input_h: self.input_h,
            input_w: self.input_w,
            tap_stages: self.tap_stages.clone(),
        }
    }

    /// Walks trainable parameters in a fixed order, tagged by group.
    pub fn visit_params(&self, f: &mut dyn FnMut(ParamGroup, &str, &[E])) {
        for (i, stage) in self.stages.iter().enumerate() {
            let g = ParamGroup::Stage(i + 1);
            stage.conv.visit(&mut |n, s| f(g, &format!("stage{}.conv.{n}", i + 1), s));
            stage.bn.visit(&mut |n, s| f(g, &format!("stage{}.bn.{n}", i + 1), s));
        }
        self.classifier
            .visit(&mut |n, s| f(ParamGroup::Classifier, &format!("classifier.{n}"), s));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &str, &mut [E])) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let g = ParamGroup::Stage(i + 1);
            stage
                .conv
                .visit_mut(&mut |n, s| f(g, &format!("stage{}.conv.{n}", i + 1), s));
            stage
                .bn
                .visit_mut(&mut |n, s| f(g, &format!("stage{}.bn.{n}", i + 1), s));
        }
        self.classifier
            .visit_mut(&mut |n, s| f(ParamGroup::Classifier, &format!("classifier.{n}"), s));
    }

    /// Walks non-trainable state (batch-norm running statistics).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[E])) {
        for (i, stage) in self.stages.iter().enumerate() {
            f(
                &format!("stage{}.bn.running_mean", i + 1),
                stage.bn.running_mean.as_slice().unwrap(),
            );
            f(
                &format!("stage{}.bn.running_var", i + 1),
                stage.bn.running_var.as_slice().unwrap(),
            );
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            f(
                &format!("stage{}.bn.running_mean", i + 1),
                stage.bn.running_mean.as_slice_mut().unwrap(),
            );
            f(
                &format!("stage{}.bn.running_var", i + 1),
                stage.bn.running_var.as_slice_mut().unwrap(),
            );
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, s| n += s.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn backbone(taps: &[usize]) -> RefBackbone<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        RefBackbone::new(64, 64, 4, taps, &mut rng).unwrap()
    }

    /// Independent stride-schedule oracle: each stage halves the spatial size.
    fn oracle_tap_shape(input: usize, stage: usize) -> usize {
        let mut h = input;
        for _ in 0..stage {
            h /= 2;
        }
        h
    }

    #[test]
    fn tap_shapes_follow_stride_schedule() {
        let bb = backbone(&[3, 4, 5]);
        let specs = bb.stage_shapes(64, 64).unwrap();
        let spatial: Vec<usize> = specs.iter().map(|s| s.spatial_h).collect();
        assert_eq!(
            spatial,
            vec![
                oracle_tap_shape(64, 3),
                oracle_tap_shape(64, 4),
                oracle_tap_shape(64, 5)
            ]
        );
        assert_eq!(spatial, vec![8, 4, 2]);
        let channels: Vec<usize> = specs.iter().map(|s| s.channels).collect();
        assert_eq!(channels, vec![128, 256, 512]);
    }

    #[test]
    fn forward_taps_match_declared_shapes() {
        let mut bb = backbone(&[3, 4, 5]);
        let x = Array4::from_elem((2, 3, 64, 64), 0.5f32);
        let (out, _) = bb.forward_with_taps(&x, NormMode::Train { update_running: true }).unwrap();
        assert_eq!(out.taps.len(), 3);
        assert_eq!(out.taps[0].dim(), (2, 128, 8, 8));
        assert_eq!(out.taps[1].dim(), (2, 256, 4, 4));
        assert_eq!(out.taps[2].dim(), (2, 512, 2, 2));
        assert_eq!(out.final_score.dim(), (2, 4));
    }

    #[test]
    fn resnet50_shaped_spec_passes_divisibility_at_448() {
        let specs = [
            StageTapSpec { stage_index: 3, channels: 512, spatial_h: 28, spatial_w: 28 },
            StageTapSpec { stage_index: 4, channels: 1024, spatial_h: 14, spatial_w: 14 },
            StageTapSpec { stage_index: 5, channels: 2048, spatial_h: 7, spatial_w: 7 },
        ];
        validate_tap_specs(448, 448, &specs).unwrap();
        // Independent arithmetic check of the channel rule.
        for (c, s) in [(512usize, 2usize), (1024, 4), (2048, 8)] {
            assert_eq!(448 % (8 * (448 / (8 * s))), 0);
            assert_eq!(c % (s * s * 4), 0);
        }
    }

    #[test]
    fn odd_input_size_violates_divisibility() {
        let specs = [StageTapSpec { stage_index: 3, channels: 128, spatial_h: 8, spatial_w: 8 }];
        let err = validate_tap_specs(60, 60, &specs).unwrap_err();
        assert!(matches!(err, Error::Divisibility(_)));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let bb = backbone(&[3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array4::from_shape_fn((1, 3, 64, 64), |_| {
            rand::Rng::random::<f32>(&mut rng)
        });
        let a = bb.infer_with_taps(&x).unwrap();
        let b = bb.infer_with_taps(&x).unwrap();
        assert_eq!(a.final_score, b.final_score);
        for (ta, tb) in a.taps.iter().zip(b.taps.iter()) {
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let bb = backbone(&[3, 4, 5]);
        let x = Array4::from_elem((1, 3, 32, 32), 0.1f32);
        assert!(matches!(
            bb.infer_with_taps(&x),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tap_out_of_range_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = match RefBackbone::<f32>::new(64, 64, 4, &[6], &mut rng) {
            Err(e) => e,
            Ok(_) => panic!("expected config error"),
        };
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn param_count_is_independent_of_taps() {
        assert_eq!(backbone(&[3, 4, 5]).param_count(), backbone(&[5]).param_count());
    }

    #[test]
    fn taps_are_ordered_shallow_to_deep() {
        let bb = backbone(&[3, 4, 5]);
        let specs = bb.stage_shapes(64, 64).unwrap();
        for pair in specs.windows(2) {
            assert!(pair[0].stage_index < pair[1].stage_index);
            assert!(pair[0].spatial_h >= pair[1].spatial_h);
        }
    }
}
