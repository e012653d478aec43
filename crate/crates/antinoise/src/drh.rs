//! Denoising-recognition head: a recognition sub-head (encoding block +
//! recognition block) and a denoising sub-head (restoration block + skip
//! block), plus the three-term head loss.
//!
//! The recognition sub-head compresses a tapped feature map into a
//! descriptor and classifies it. The denoising sub-head upsamples the same
//! feature map back to image resolution through four shuffle/conv modules
//! and adds a shallow skip correction computed from the noisy image:
//! `denoised = restored + skip`.

use crate::error::{Error, Result};
use crate::nn::{
    init, mse, softmax_cross_entropy, BatchNorm1d, BatchNorm2d, Bn1dCache, Bn2dCache, Conv2d,
    Element, Elu, GlobalMaxPool, Linear, NormMode, PixelShuffle, Relu, Visit,
};
use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrhConfig {
    /// Channels of the tapped feature map (C).
    pub in_channels: usize,
    /// Descriptor width (D); must be even.
    pub descriptor_dim: usize,
    /// Working width of the restoration chain (D'); must be divisible by 4.
    pub restore_channels: usize,
    /// Width of the skip block (D'').
    pub skip_channels: usize,
    pub num_classes: usize,
    /// Shuffle scale of the first upsampling module: (H'/(8H), W'/(8W)).
    pub first_upsample_scale: (usize, usize),
}

impl DrhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 || self.descriptor_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "descriptor dim {} must be positive and even",
                self.descriptor_dim
            )));
        }
        if self.restore_channels == 0 || self.skip_channels == 0 {
            return Err(Error::Config("restore/skip channels must be positive".into()));
        }
        let (sh, sw) = self.first_upsample_scale;
        if sh == 0 || sw == 0 {
            return Err(Error::Config("upsample scale must be positive".into()));
        }
        if self.in_channels % (sh * sw) != 0 {
            return Err(Error::Divisibility(format!(
                "in_channels {} not divisible by first upsample factor {}",
                self.in_channels,
                sh * sw
            )));
        }
        // The three x2 shuffles each consume a factor of 4.
        if self.restore_channels % 4 != 0 {
            return Err(Error::Divisibility(format!(
                "restore channels {} must be divisible by 4",
                self.restore_channels
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        Ok(())
    }
}

/// Encoding block: conv 1x1 (C -> D/2) + BN + ReLU, conv 3x3 (D/2 -> D) +
/// BN + ReLU, global max pool to a length-D descriptor.
#[derive(Clone)]
pub struct EncodeBlock<E: Element> {
    pub conv1: Conv2d<E>,
    pub bn1: BatchNorm2d<E>,
    pub conv2: Conv2d<E>,
    pub bn2: BatchNorm2d<E>,
}

pub struct EncodeCache<E: Element> {
    x: Array4<E>,
    bn1: Bn2dCache<E>,
    r1: Array4<E>,
    bn2: Bn2dCache<E>,
    r2: Array4<E>,
    gmp_arg: Vec<usize>,
}

impl<E: Element> EncodeBlock<E> {
    fn new<R: Rng>(cfg: &DrhConfig, rng: &mut R) -> Self {
        let d = cfg.descriptor_dim;
        Self {
            conv1: init::conv2d(d / 2, cfg.in_channels, 1, rng),
            bn1: BatchNorm2d::new(d / 2),
            conv2: init::conv2d(d, d / 2, 3, rng),
            bn2: BatchNorm2d::new(d),
        }
    }

    pub fn forward(&mut self, x: &Array4<E>, mode: NormMode) -> (Array2<E>, EncodeCache<E>) {
        let c1 = self.conv1.forward(x);
        let (b1, bn1) = self.bn1.forward(&c1, mode);
        let r1 = Relu::forward(&b1);
        let c2 = self.conv2.forward(&r1);
        let (b2, bn2) = self.bn2.forward(&c2, mode);
        let r2 = Relu::forward(&b2);
        let (d, gmp_arg) = GlobalMaxPool::forward(&r2);
        (
            d,
            EncodeCache { x: x.clone(), bn1, r1, bn2, r2, gmp_arg },
        )
    }

    pub fn backward(
        &self,
        cache: &EncodeCache<E>,
        d_desc: &Array2<E>,
        grad: &mut EncodeBlock<E>,
    ) -> Array4<E> {
        let mut dr2 = GlobalMaxPool::backward(d_desc, &cache.gmp_arg, cache.r2.dim());
        Relu::backward(&cache.r2, &mut dr2);
        let db2 = self.bn2.backward(&cache.bn2, &dr2, &mut grad.bn2);
        let mut dr1 = self.conv2.backward(&cache.r1, &db2, &mut grad.conv2);
        Relu::backward(&cache.r1, &mut dr1);
        let db1 = self.bn1.backward(&cache.bn1, &dr1, &mut grad.bn1);
        self.conv1.backward(&cache.x, &db1, &mut grad.conv1)
    }

    pub fn infer(&self, x: &Array4<E>) -> Array2<E> {
        let r1 = Relu::forward(&self.bn1.infer(&self.conv1.forward(x)));
        let r2 = Relu::forward(&self.bn2.infer(&self.conv2.forward(&r1)));
        GlobalMaxPool::forward(&r2).0
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            bn1: self.bn1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            bn2: self.bn2.zeros_like(),
        }
    }
}

/// Recognition block: BN over the descriptor, FC (D -> D/2) + BN + ELU,
/// FC (D/2 -> N) classifier emitting raw logits.
#[derive(Clone)]
pub struct RecognizeBlock<E: Element> {
    pub bn0: BatchNorm1d<E>,
    pub fc1: Linear<E>,
    pub bn1: BatchNorm1d<E>,
    pub fc2: Linear<E>,
}

pub struct RecognizeCache<E: Element> {
    d: Array2<E>,
    bn0: Bn1dCache<E>,
    bn0_out: Array2<E>,
    bn1: Bn1dCache<E>,
    elu_out: Array2<E>,
}

impl<E: Element> RecognizeBlock<E> {
    fn new<R: Rng>(cfg: &DrhConfig, rng: &mut R) -> Self {
        let d = cfg.descriptor_dim;
        Self {
            bn0: BatchNorm1d::new(d),
            fc1: init::linear(d / 2, d, rng),
            bn1: BatchNorm1d::new(d / 2),
            fc2: init::linear(cfg.num_classes, d / 2, rng),
        }
    }

    pub fn forward(&mut self, d: &Array2<E>, mode: NormMode) -> (Array2<E>, RecognizeCache<E>) {
        let (b0, bn0) = self.bn0.forward(d, mode);
        let f1 = self.fc1.forward(&b0);
        let (b1, bn1) = self.bn1.forward(&f1, mode);
        let e1 = Elu::forward(&b1);
        let p = self.fc2.forward(&e1);
        (
            p,
            RecognizeCache { d: d.clone(), bn0, bn0_out: b0, bn1, elu_out: e1 },
        )
    }

    pub fn backward(
        &self,
        cache: &RecognizeCache<E>,
        dp: &Array2<E>,
        grad: &mut RecognizeBlock<E>,
    ) -> Array2<E> {
        let mut de1 = self.fc2.backward(&cache.elu_out, dp, &mut grad.fc2);
        Elu::backward(&cache.elu_out, &mut de1);
        let db1 = self.bn1.backward(&cache.bn1, &de1, &mut grad.bn1);
        let db0 = self.fc1.backward(&cache.bn0_out, &db1, &mut grad.fc1);
        let _ = &cache.d;
        self.bn0.backward(&cache.bn0, &db0, &mut grad.bn0)
    }

    pub fn infer(&self, d: &Array2<E>) -> Array2<E> {
        let b0 = self.bn0.infer(d);
        let e1 = Elu::forward(&self.bn1.infer(&self.fc1.forward(&b0)));
        self.fc2.forward(&e1)
    }

    fn zeros_like(&self) -> Self {
        Self {
            bn0: self.bn0.zeros_like(),
            fc1: self.fc1.zeros_like(),
            bn1: self.bn1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }
}

/// One upsampling module of the restoration chain: pixel shuffle, conv 3x3,
/// ReLU.
#[derive(Clone)]
pub struct UpModule<E: Element> {
    pub shuffle: PixelShuffle,
    pub conv: Conv2d<E>,
}

pub struct UpCache<E: Element> {
    in_dim: (usize, usize, usize, usize),
    shuffled: Array4<E>,
    relu_out: Array4<E>,
}

impl<E: Element> UpModule<E> {
    fn forward(&self, x: &Array4<E>) -> (Array4<E>, UpCache<E>) {
        let s = self.shuffle.forward(x);
        let c = self.conv.forward(&s);
        let r = Relu::forward(&c);
        (
            r.clone(),
            UpCache { in_dim: x.dim(), shuffled: s, relu_out: r },
        )
    }

    fn backward(&self, cache: &UpCache<E>, dy: &Array4<E>, grad: &mut UpModule<E>) -> Array4<E> {
        let mut dr = dy.clone();
        Relu::backward(&cache.relu_out, &mut dr);
        let ds = self.conv.backward(&cache.shuffled, &dr, &mut grad.conv);
        self.shuffle.backward(&ds, cache.in_dim)
    }
}

/// Restoration block: four upsampling modules. The first shuffle scale is
/// tap-dependent; the rest are 2x2. Output is a 3-channel image at the
/// input resolution.
#[derive(Clone)]
pub struct RestoreBlock<E: Element> {
    pub modules: Vec<UpModule<E>>,
}

pub struct RestoreCache<E: Element> {
    ups: Vec<UpCache<E>>,
}

impl<E: Element> RestoreBlock<E> {
    fn new<R: Rng>(cfg: &DrhConfig, rng: &mut R) -> Self {
        let (sh, sw) = cfg.first_upsample_scale;
        let dp = cfg.restore_channels;
        let modules = vec![
            UpModule {
                shuffle: PixelShuffle::new(sh, sw),
                conv: init::conv2d(dp, cfg.in_channels / (sh * sw), 3, rng),
            },
            UpModule {
                shuffle: PixelShuffle::new(2, 2),
                conv: init::conv2d(dp, dp / 4, 3, rng),
            },
            UpModule {
                shuffle: PixelShuffle::new(2, 2),
                conv: init::conv2d(dp, dp / 4, 3, rng),
            },
            UpModule {
                shuffle: PixelShuffle::new(2, 2),
                conv: init::conv2d(3, dp / 4, 3, rng),
            },
        ];
        Self { modules }
    }

    pub fn forward(&self, x: &Array4<E>) -> (Array4<E>, RestoreCache<E>) {
        let mut cur = x.clone();
        let mut ups = Vec::with_capacity(4);
        for m in &self.modules {
            let (y, cache) = m.forward(&cur);
            ups.push(cache);
            cur = y;
        }
        (cur, RestoreCache { ups })
    }

    pub fn backward(
        &self,
        cache: &RestoreCache<E>,
        dy: &Array4<E>,
        grad: &mut RestoreBlock<E>,
    ) -> Array4<E> {
        let mut cur = dy.clone();
        for (m, (c, g)) in self
            .modules
            .iter()
            .zip(cache.ups.iter().zip(grad.modules.iter_mut()))
            .rev()
        {
            cur = m.backward(c, &cur, g);
        }
        cur
    }

    fn zeros_like(&self) -> Self {
        Self {
            modules: self
                .modules
                .iter()
                .map(|m| UpModule { shuffle: m.shuffle, conv: m.conv.zeros_like() })
                .collect(),
        }
    }
}

/// Skip block: conv 3x3 (3 -> D'') + ReLU, conv 3x3 (D'' -> 3). No final
/// activation so the correction can be negative.
#[derive(Clone)]
pub struct SkipBlock<E: Element> {
    pub conv1: Conv2d<E>,
    pub conv2: Conv2d<E>,
}

pub struct SkipCache<E: Element> {
    noisy: Array4<E>,
    r1: Array4<E>,
}

impl<E: Element> SkipBlock<E> {
    fn new<R: Rng>(cfg: &DrhConfig, rng: &mut R) -> Self {
        Self {
            conv1: init::conv2d(cfg.skip_channels, 3, 3, rng),
            conv2: init::conv2d(3, cfg.skip_channels, 3, rng),
        }
    }

    pub fn forward(&self, noisy: &Array4<E>) -> (Array4<E>, SkipCache<E>) {
        let r1 = Relu::forward(&self.conv1.forward(noisy));
        let y = self.conv2.forward(&r1);
        (y, SkipCache { noisy: noisy.clone(), r1 })
    }

    pub fn backward(&self, cache: &SkipCache<E>, dy: &Array4<E>, grad: &mut SkipBlock<E>) -> Array4<E> {
        let mut dr1 = self.conv2.backward(&cache.r1, dy, &mut grad.conv2);
        Relu::backward(&cache.r1, &mut dr1);
        self.conv1.backward(&cache.noisy, &dr1, &mut grad.conv1)
    }

    fn zeros_like(&self) -> Self {
        Self { conv1: self.conv1.zeros_like(), conv2: self.conv2.zeros_like() }
    }
}

/// Forward products of the denoising sub-head.
pub struct DenoiseOutput<E: Element> {
    pub denoised: Array4<E>,
    pub restored: Array4<E>,
    pub skip: Array4<E>,
}

pub struct DenoiseCache<E: Element> {
    pub restore: RestoreCache<E>,
    pub skip: SkipCache<E>,
}

/// A complete denoising-recognition head.
#[derive(Clone)]
pub struct Drh<E: Element> {
    pub cfg: DrhConfig,
    pub encode: EncodeBlock<E>,
    pub recognize: RecognizeBlock<E>,
    pub restore: RestoreBlock<E>,
    pub skip: SkipBlock<E>,
    /// Counts invocations of the denoising sub-head; inference must leave it
    /// untouched.
    pub denoise_calls: u64,
}

impl<E: Element> Drh<E> {
    pub fn new<R: Rng>(cfg: DrhConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encode: EncodeBlock::new(&cfg, rng),
            recognize: RecognizeBlock::new(&cfg, rng),
            restore: RestoreBlock::new(&cfg, rng),
            skip: SkipBlock::new(&cfg, rng),
            cfg,
            denoise_calls: 0,
        })
    }

    fn check_feature(&self, x: &Array4<E>) -> Result<()> {
        let (_, c, _, _) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "feature channels {c} != configured {}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Training-mode encode; see [`EncodeBlock`]. Use `encode_infer` for the
    /// pure descriptor op.
    pub fn encode_train(&mut self, x: &Array4<E>, mode: NormMode) -> Result<(Array2<E>, EncodeCache<E>)> {
        self.check_feature(x)?;
        Ok(self.encode.forward(x, mode))
    }

    pub fn encode_infer(&self, x: &Array4<E>) -> Result<Array2<E>> {
        self.check_feature(x)?;
        Ok(self.encode.infer(x))
    }

    pub fn recognize_infer(&self, d: &Array2<E>) -> Result<Array2<E>> {
        if d.dim().1 != self.cfg.descriptor_dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor dim {} != configured {}",
                d.dim().1,
                self.cfg.descriptor_dim
            )));
        }
        Ok(self.recognize.infer(d))
    }

    /// Eval-mode class score for a tapped feature map.
    pub fn score_infer(&self, x: &Array4<E>) -> Result<Array2<E>> {
        let d = self.encode_infer(x)?;
        self.recognize_infer(&d)
    }

    /// Runs the denoising sub-head: restoration chain on the feature map,
    /// skip correction on the noisy image, summed into the denoised image.
    pub fn denoise(
        &mut self,
        x: &Array4<E>,
        noisy: &Array4<E>,
    ) -> Result<(DenoiseOutput<E>, DenoiseCache<E>)> {
        self.check_feature(x)?;
        let (n, c, h, w) = x.dim();
        let (nn, ci, ih, iw) = noisy.dim();
        let (sh, sw) = self.cfg.first_upsample_scale;
        if c % (sh * sw) != 0 {
            return Err(Error::Divisibility(format!(
                "feature channels {c} not divisible by first shuffle factor {}",
                sh * sw
            )));
        }
        if nn != n || ci != 3 || ih != h * sh * 8 || iw != w * sw * 8 {
            return Err(Error::ShapeMismatch(format!(
                "noisy image {nn}x{ci}x{ih}x{iw} inconsistent with feature {n}x{c}x{h}x{w} at scale {sh}x{sw}"
            )));
        }
        self.denoise_calls += 1;
        let (restored, rc) = self.restore.forward(x);
        let (skip, sc) = self.skip.forward(noisy);
        let denoised = &restored + &skip;
        Ok((
            DenoiseOutput { denoised, restored, skip },
            DenoiseCache { restore: rc, skip: sc },
        ))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            cfg: self.cfg,
            encode: self.encode.zeros_like(),
            recognize: self.recognize.zeros_like(),
            restore: self.restore.zeros_like(),
            skip: self.skip.zeros_like(),
            denoise_calls: 0,
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[E])) {
        self.encode.conv1.visit(&mut |n, s| f(&format!("encode.conv1.{n}"), s));
        self.encode.bn1.visit(&mut |n, s| f(&format!("encode.bn1.{n}"), s));
        self.encode.conv2.visit(&mut |n, s| f(&format!("encode.conv2.{n}"), s));
        self.encode.bn2.visit(&mut |n, s| f(&format!("encode.bn2.{n}"), s));
        self.recognize.bn0.visit(&mut |n, s| f(&format!("recognize.bn0.{n}"), s));
        self.recognize.fc1.visit(&mut |n, s| f(&format!("recognize.fc1.{n}"), s));
        self.recognize.bn1.visit(&mut |n, s| f(&format!("recognize.bn1.{n}"), s));
        self.recognize.fc2.visit(&mut |n, s| f(&format!("recognize.fc2.{n}"), s));
        for (i, m) in self.restore.modules.iter().enumerate() {
            m.conv.visit(&mut |n, s| f(&format!("restore.m{}.conv.{n}", i + 1), s));
        }
        self.skip.conv1.visit(&mut |n, s| f(&format!("skip.conv1.{n}"), s));
        self.skip.conv2.visit(&mut |n, s| f(&format!("skip.conv2.{n}"), s));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        self.encode.conv1.visit_mut(&mut |n, s| f(&format!("encode.conv1.{n}"), s));
        self.encode.bn1.visit_mut(&mut |n, s| f(&format!("encode.bn1.{n}"), s));
        self.encode.conv2.visit_mut(&mut |n, s| f(&format!("encode.conv2.{n}"), s));
        self.encode.bn2.visit_mut(&mut |n, s| f(&format!("encode.bn2.{n}"), s));
        self.recognize.bn0.visit_mut(&mut |n, s| f(&format!("recognize.bn0.{n}"), s));
        self.recognize.fc1.visit_mut(&mut |n, s| f(&format!("recognize.fc1.{n}"), s));
        self.recognize.bn1.visit_mut(&mut |n, s| f(&format!("recognize.bn1.{n}"), s));
        self.recognize.fc2.visit_mut(&mut |n, s| f(&format!("recognize.fc2.{n}"), s));
        for (i, m) in self.restore.modules.iter_mut().enumerate() {
            m.conv.visit_mut(&mut |n, s| f(&format!("restore.m{}.conv.{n}", i + 1), s));
        }
        self.skip.conv1.visit_mut(&mut |n, s| f(&format!("skip.conv1.{n}"), s));
        self.skip.conv2.visit_mut(&mut |n, s| f(&format!("skip.conv2.{n}"), s));
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[E])) {
        for (name, bn) in [("encode.bn1", &self.encode.bn1), ("encode.bn2", &self.encode.bn2)] {
            f(&format!("{name}.running_mean"), bn.running_mean.as_slice().unwrap());
            f(&format!("{name}.running_var"), bn.running_var.as_slice().unwrap());
        }
        for (name, bn) in [("recognize.bn0", &self.recognize.bn0), ("recognize.bn1", &self.recognize.bn1)] {
            f(&format!("{name}.running_mean"), bn.running_mean.as_slice().unwrap());
            f(&format!("{name}.running_var"), bn.running_var.as_slice().unwrap());
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E])) {
        for (name, bn) in [
            ("encode.bn1", &mut self.encode.bn1),
            ("encode.bn2", &mut self.encode.bn2),
        ] {
            f(&format!("{name}.running_mean"), bn.running_mean.as_slice_mut().unwrap());
            f(&format!("{name}.running_var"), bn.running_var.as_slice_mut().unwrap());
        }
        for (name, bn) in [
            ("recognize.bn0", &mut self.recognize.bn0),
            ("recognize.bn1", &mut self.recognize.bn1),
        ] {
            f(&format!("{name}.running_mean"), bn.running_mean.as_slice_mut().unwrap());
            f(&format!("{name}.running_var"), bn.running_var.as_slice_mut().unwrap());
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, s| n += s.len());
        n
    }
}

/// The three head loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy)]
pub struct DrhLoss<E: Element> {
    pub rec: E,
    pub mse: E,
    pub den_softmax: E,
    pub total: E,
}

/// Computes `L_rec + L_mse + L_den_softmax` for a batch: cross-entropy of the
/// head score, mean squared error of the denoised image against the clean
/// image, and cross-entropy of the re-forwarded denoised score.
pub fn drh_loss<E: Element>(
    p: &Array2<E>,
    denoised: &Array4<E>,
    p_den: &Array2<E>,
    clean: &Array4<E>,
    labels: &[usize],
) -> Result<DrhLoss<E>> {
    if p.dim() != p_den.dim() {
        return Err(Error::ShapeMismatch(format!(
            "score dims {:?} vs {:?}",
            p.dim(),
            p_den.dim()
        )));
    }
    if denoised.dim() != clean.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image dims {:?} vs {:?}",
            denoised.dim(),
            clean.dim()
        )));
    }
    let n_classes = p.dim().1;
    for &g in labels {
        if g >= n_classes {
            return Err(Error::LabelOutOfRange { label: g, num_classes: n_classes });
        }
    }
    let (rec, _) = softmax_cross_entropy(p, labels);
    let m = mse(denoised, clean);
    let (den, _) = softmax_cross_entropy(p_den, labels);
    Ok(DrhLoss { rec, mse: m, den_softmax: den, total: rec + m + den })
}
