//! AugMix training with a Jensen-Shannon consistency term and test-time
//! batch-norm statistics adaptation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{
    train_with_loss, BatchLoss, MultiExitModel, StepContext, StepOutput, TrainConfig, TrainLog,
};
use crate::seed;
use crate::tensor::{softmax_cross_entropy_batch, softmax_rows, Tensor};

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Autocontrast,
    Equalize,
    Rotate,
    Solarize,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Posterize,
    Identity,
}

impl AugOp {
    /// The standard operation set. None of these overlap with the evaluation
    /// corruptions.
    pub const STANDARD: [AugOp; 9] = [
        AugOp::Autocontrast,
        AugOp::Equalize,
        AugOp::Rotate,
        AugOp::Solarize,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Posterize,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugMixConfig {
    /// Number of augmentation chains mixed together.
    pub width: usize,
    /// Fixed chain depth; `None` draws it uniformly from 1..=3.
    pub depth: Option<usize>,
    pub alpha: f64,
    pub severity: u32,
    /// Weight of the consistency term.
    pub jsd_lambda: f64,
    pub ops: Vec<AugOp>,
}

impl Default for AugMixConfig {
    fn default() -> Self {
        Self {
            width: 3,
            depth: None,
            alpha: 1.0,
            severity: 3,
            jsd_lambda: 12.0,
            ops: AugOp::STANDARD.to_vec(),
        }
    }
}

impl AugMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.ops.is_empty() {
            return Err(Error::invalid("augmix needs a positive width and at least one op"));
        }
        if self.depth == Some(0) {
            return Err(Error::invalid("augmix depth must be positive"));
        }
        if !(self.alpha > 0.0) || !(1..=10).contains(&self.severity) {
            return Err(Error::invalid("augmix alpha must be positive and severity in 1..=10"));
        }
        if !(self.jsd_lambda >= 0.0) {
            return Err(Error::invalid("jsd_lambda must be non-negative"));
        }
        Ok(())
    }
}

fn int_level(level: f64, max: f64) -> f64 {
    (level * max / 10.0).floor()
}

fn float_level(level: f64, max: f64) -> f64 {
    level * max / 10.0
}

fn signed(v: f64, rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.5) {
        -v
    } else {
        v
    }
}

/// Resample every channel through an output-to-input coordinate map with
/// bilinear interpolation and zero fill.
fn remap(image: &[f32], [c, h, w]: [usize; 3], map: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
    let mut out = vec![0f32; image.len()];
    let at = |plane: &[f32], y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let plane = &image[ch * h * w..(ch + 1) * h * w];
                let v = (1.0 - fy) * ((1.0 - fx) * at(plane, y0, x0) + fx * at(plane, y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(plane, y0 + 1, x0) + fx * at(plane, y0 + 1, x0 + 1));
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    out
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn equalize_plane(plane: &mut [f32]) {
    let mut hist = [0usize; 256];
    for v in plane.iter() {
        hist[to_byte(*v) as usize] += 1;
    }
    let last = hist.iter().rev().find(|c| **c > 0).copied().unwrap_or(0);
    let step = (plane.len() - last) / 255;
    if step == 0 {
        return;
    }
    let mut lut = [0u8; 256];
    let mut n = step / 2;
    for (i, c) in hist.iter().enumerate() {
        lut[i] = (n / step).min(255) as u8;
        n += c;
    }
    for v in plane.iter_mut() {
        *v = lut[to_byte(*v) as usize] as f32 / 255.0;
    }
}

/// Apply one operation at a level drawn from `[0.1, severity]`.
pub fn apply_op(op: AugOp, image: &[f32], shape: [usize; 3], severity: u32, rng: &mut impl Rng) -> Vec<f32> {
    let [_, h, w] = shape;
    let level = rng.random_range(0.1..=severity as f64);
    let plane = h * w;
    match op {
        AugOp::Identity => image.to_vec(),
        AugOp::Autocontrast => {
            let mut out = image.to_vec();
            for p in out.chunks_mut(plane) {
                let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi > lo {
                    p.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }
            out
        }
        AugOp::Equalize => {
            let mut out = image.to_vec();
            out.chunks_mut(plane).for_each(equalize_plane);
            out
        }
        AugOp::Posterize => {
            let bits = 4 - int_level(level, 4.0) as u32;
            let mask = !((1u16 << (8 - bits)) - 1) as u8;
            image
                .iter()
                .map(|v| (to_byte(*v) & mask) as f32 / 255.0)
                .collect()
        }
        AugOp::Solarize => {
            let threshold = 256.0 - int_level(level, 256.0);
            image
                .iter()
                .map(|v| if to_byte(*v) as f64 >= threshold { 1.0 - v } else { *v })
                .collect()
        }
        AugOp::Rotate => {
            let theta = signed(int_level(level, 30.0), rng).to_radians();
            let (s, c) = theta.sin_cos();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            remap(image, shape, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (c * dx + s * dy + cx, -s * dx + c * dy + cy)
            })
        }
        AugOp::ShearX => {
            let k = signed(float_level(level, 0.3), rng);
            remap(image, shape, |x, y| (x + k * y, y))
        }
        AugOp::ShearY => {
            let k = signed(float_level(level, 0.3), rng);
            remap(image, shape, |x, y| (x, y + k * x))
        }
        AugOp::TranslateX => {
            let t = signed(int_level(level, w as f64 / 3.0), rng);
            remap(image, shape, |x, y| (x + t, y))
        }
        AugOp::TranslateY => {
            let t = signed(int_level(level, h as f64 / 3.0), rng);
            remap(image, shape, |x, y| (x, y + t))
        }
    }
}

/// Symmetric Dirichlet sample via normalised Gamma draws.
fn dirichlet(alpha: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive alpha");
    let mut w: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|v| *v /= sum);
    } else {
        w.iter_mut().for_each(|v| *v = 1.0 / n as f64);
    }
    w
}

/// One AugMix view: `width` random op chains mixed with Dirichlet weights,
/// then blended with the original by a Beta-distributed factor.
pub fn augmix_sample(image: &[f32], shape: [usize; 3], config: &AugMixConfig, rng: &mut impl Rng) -> Vec<f32> {
    let ws = dirichlet(config.alpha, config.width, rng);
    let m = Beta::new(config.alpha, config.alpha)
        .expect("positive alpha")
        .sample(rng);
    let mut mix = vec![0f64; image.len()];
    for w in ws {
        let depth = config.depth.unwrap_or_else(|| rng.random_range(1..=3));
        let mut aug = image.to_vec();
        for _ in 0..depth {
            let op = config.ops[rng.random_range(0..config.ops.len())];
            aug = apply_op(op, &aug, shape, config.severity, rng);
        }
        for (a, v) in mix.iter_mut().zip(&aug) {
            *a += w * *v as f64;
        }
    }
    image
        .iter()
        .zip(&mix)
        .map(|(x, a)| ((1.0 - m) * *x as f64 + m * a).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Jensen-Shannon divergence of several distributions: the mean KL
/// divergence of each from their mixture. Log arguments are clamped at
/// 1e-12.
pub fn jsd(dists: &[&[f64]]) -> f64 {
    let Some(first) = dists.first() else {
        return 0.0;
    };
    let n = dists.len() as f64;
    let mut total = 0.0;
    for c in 0..first.len() {
        let m = dists.iter().map(|p| p[c]).sum::<f64>() / n;
        let lm = m.max(LOG_CLAMP).ln();
        for p in dists {
            total += p[c] * (p[c].max(LOG_CLAMP).ln() - lm);
        }
    }
    total / n
}

/// Batch-mean Jensen-Shannon divergence between the softmax distributions
/// of several `[N, K]` logit tensors, with the gradient for each.
pub fn jsd_loss(logits: &[&Tensor<f32>]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let first = logits
        .first()
        .ok_or_else(|| Error::invalid("jsd needs at least one distribution"))?;
    let [n, k] = first.shape() else {
        return Err(Error::shape("jsd logits", "[N, K]", first.shape()));
    };
    let (n, k) = (*n, *k);
    if let Some(bad) = logits.iter().find(|l| l.shape() != first.shape()) {
        return Err(Error::shape("jsd logits", first.shape(), bad.shape()));
    }
    let views = logits.len() as f64;
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|l| {
            softmax_rows(&l.cast::<f64>())
                .map(|p| p.into_data())
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f32>> = vec![vec![0f32; n * k]; logits.len()];
    for row in 0..n {
        let span = row * k..(row + 1) * k;
        let log_m: Vec<f64> = (0..k)
            .map(|c| {
                let m = probs.iter().map(|p| p[span.start + c]).sum::<f64>() / views;
                m.max(LOG_CLAMP).ln()
            })
            .collect();
        for (p, g) in probs.iter().zip(grads.iter_mut()) {
            let p = &p[span.clone()];
            let dp: Vec<f64> = p
                .iter()
                .zip(&log_m)
                .map(|(pc, lm)| (pc.max(LOG_CLAMP).ln() - lm) / views)
                .collect();
            loss += p.iter().zip(&dp).map(|(pc, d)| pc * d).sum::<f64>();
            let dot: f64 = p.iter().zip(&dp).map(|(pc, d)| pc * d).sum();
            for (c, (pc, d)) in p.iter().zip(&dp).enumerate() {
                g[span.start + c] = (pc * (d - dot) / n as f64) as f32;
            }
        }
    }
    let grads = grads
        .into_iter()
        .map(|g| Tensor::new(vec![n, k], g))
        .collect::<Result<_>>()?;
    Ok((loss / n as f64, grads))
}

/// Cross-entropy on the clean view plus `λ·JSD` across the clean view and
/// two AugMix views, at every exit.
pub struct AugMixLoss {
    pub config: AugMixConfig,
    pub shape: [usize; 3],
}

impl AugMixLoss {
    fn views(&self, images: &Tensor<f32>, ctx: StepContext) -> Result<[Tensor<f32>; 2]> {
        let per: usize = self.shape.iter().product();
        let make = |view: u64| -> Result<Tensor<f32>> {
            let data: Vec<f32> = images
                .data()
                .par_chunks(per)
                .enumerate()
                .flat_map_iter(|(i, img)| {
                    let mut rng: ChaCha8Rng = seed::rng(
                        ctx.seed,
                        &[
                            "augmix".into(),
                            ctx.epoch.into(),
                            ctx.batch.into(),
                            i.into(),
                            view.into(),
                        ],
                    );
                    augmix_sample(img, self.shape, &self.config, &mut rng)
                })
                .collect();
            Tensor::new(images.shape().to_vec(), data)
        };
        Ok([make(1)?, make(2)?])
    }
}

impl BatchLoss for AugMixLoss {
    fn step(
        &mut self,
        model: &mut MultiExitModel<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
        weights: &[f64],
        ctx: StepContext,
    ) -> Result<StepOutput> {
        let [aug1, aug2] = self.views(images, ctx)?;
        let (clean, c0) = model.forward_train(images)?;
        let (out1, c1) = model.forward_train(&aug1)?;
        let (out2, c2) = model.forward_train(&aug2)?;
        let mut loss = 0.0;
        let n_exits = model.num_exits();
        let mut g0 = Vec::with_capacity(n_exits);
        let mut g1 = Vec::with_capacity(n_exits);
        let mut g2 = Vec::with_capacity(n_exits);
        let lambda = self.config.jsd_lambda;
        for e in 0..n_exits {
            let w = weights[e];
            let (ce, _, mut gc) = softmax_cross_entropy_batch(&clean.logits[e], labels)?;
            let (jsd, mut gj) = jsd_loss(&[&clean.logits[e], &out1.logits[e], &out2.logits[e]])?;
            loss += w * (ce as f64 + lambda * jsd);
            let (wf, wl) = (w as f32, (w * lambda) as f32);
            for (a, b) in gc.data_mut().iter_mut().zip(gj[0].data()) {
                *a = wf * *a + wl * b;
            }
            for g in gj.iter_mut().skip(1) {
                g.data_mut().iter_mut().for_each(|v| *v *= wl);
            }
            g0.push(gc);
            g2.push(gj.pop().expect("three views"));
            g1.push(gj.pop().expect("three views"));
        }
        let (_, mut grads) = model.backward(&c0, &g0)?;
        for (cache, g) in [(&c1, &g1), (&c2, &g2)] {
            let (_, more) = model.backward(cache, g)?;
            for (a, b) in grads.iter_mut().zip(&more) {
                a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
        }
        Ok(StepOutput {
            loss,
            grads,
            logits: clean.logits,
        })
    }
}

/// Joint multi-exit training with the AugMix objective at every exit.
pub fn train_augmix(
    model: &mut MultiExitModel<f32>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    augmix: &AugMixConfig,
) -> Result<TrainLog> {
    augmix.validate()?;
    let mut loss = AugMixLoss {
        config: augmix.clone(),
        shape: train.shape(),
    };
    train_with_loss(model, train, val, config, &mut loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub batch_size: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { batch_size: 128 }
    }
}

/// Re-estimate every batch-norm layer's running statistics on `data`.
///
/// One train-mode pass is made over `data` in order. Each layer's running
/// mean becomes the average of its per-batch means and its running variance
/// the average of its unbiased per-batch variances. A trailing batch of a
/// single sample has no variance and is skipped. All learnable parameters
/// are left untouched.
pub fn adapt_batchnorm(
    model: &MultiExitModel<f32>,
    data: &Dataset,
    config: &AdaptConfig,
) -> Result<MultiExitModel<f32>> {
    if config.batch_size < 2 {
        return Err(Error::invalid("adaptation batch size must be at least 2"));
    }
    if data.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "adaptation needs at least one full batch of {} samples, got {}",
            config.batch_size,
            data.len()
        )));
    }
    if data.shape() != model.input_shape {
        return Err(Error::shape("adaptation data", model.input_shape, data.shape()));
    }
    let mut probe = model.clone();
    for bn in probe.batchnorms_mut() {
        bn.momentum = 1.0;
    }
    let mut sums: Vec<(Vec<f64>, Vec<f64>)> = probe
        .batchnorms()
        .iter()
        .map(|b| (vec![0.0; b.channels], vec![0.0; b.channels]))
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut batches = 0usize;
    for chunk in idx.chunks(config.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        probe.forward_train(&data.batch(chunk))?;
        for (bn, (m, v)) in probe.batchnorms().iter().zip(sums.iter_mut()) {
            for c in 0..bn.channels {
                m[c] += bn.running_mean[c] as f64;
                v[c] += bn.running_var[c] as f64;
            }
        }
        batches += 1;
    }
    let mut out = model.clone();
    for (bn, (m, v)) in out.batchnorms_mut().into_iter().zip(sums) {
        for c in 0..bn.channels {
            bn.running_mean[c] = (m[c] / batches as f64) as f32;
            bn.running_var[c] = (v[c] / batches as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn ramp(shape: [usize; 3]) -> Vec<f32> {
        let n: usize = shape.iter().product();
        (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()
    }

    #[test]
    fn identity_ops_leave_the_image_unchanged() {
        let shape = [3, 8, 8];
        let img = ramp(shape);
        let cfg = AugMixConfig {
            ops: vec![AugOp::Identity],
            ..AugMixConfig::default()
        };
        let out = augmix_sample(&img, shape, &cfg, &mut rng());
        for (a, b) in out.iter().zip(&img) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn every_op_stays_in_range_and_keeps_shape() {
        let shape = [3, 8, 8];
        let img = ramp(shape);
        for op in AugOp::STANDARD {
            for _ in 0..5 {
                let out = apply_op(op, &img, shape, 3, &mut rng());
                assert_eq!(out.len(), img.len());
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{op:?}");
            }
        }
    }

    #[test]
    fn disjoint_one_hots_reach_ln3() {
        let (a, b, c) = ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!((jsd(&[&a, &b, &c]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn jsd_of_identical_views_is_zero() {
        let l = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 0.0, 3.0]).unwrap();
        let (loss, grads) = jsd_loss(&[&l, &l, &l]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grads.iter().flat_map(|g| g.data()).all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn jsd_gradient_matches_finite_differences() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.1, -1.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.2, 0.4, -0.5, 2.0, -1.0, 0.0]).unwrap();
        let c = Tensor::new(vec![2, 3], vec![-1.0, 0.0, 1.5, 0.0, 0.5, 0.5]).unwrap();
        let (_, grads) = jsd_loss(&[&a, &b, &c]).unwrap();
        let h = 1e-3f32;
        for (v, base) in [&a, &b, &c].into_iter().enumerate() {
            for i in 0..6 {
                let mut up = base.clone();
                up.data_mut()[i] += h;
                let mut dn = base.clone();
                dn.data_mut()[i] -= h;
                let eval = |t: &Tensor<f32>| {
                    let mut views = vec![&a, &b, &c];
                    views[v] = t;
                    jsd_loss(&views).unwrap().0
                };
                let numeric = (eval(&up) - eval(&dn)) / (2.0 * h as f64);
                let analytic = grads[v].data()[i] as f64;
                assert!((numeric - analytic).abs() < 1e-4, "view {v} idx {i}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = AugMixConfig::default();
        c.validate().unwrap();
        c.width = 0;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<AugMixConfig>(r#"{"widht": 3}"#).is_err());
    }
}
