//! Training objectives with analytic gradients.
//!
//! Every loss treats the vectors it is handed as free variables: features,
//! class weights and prototypes are expected to be unit-norm on entry, and
//! the gradients are taken with respect to those vectors directly. Chaining
//! through normalization or the feature extractor is the engine's job.
//!
//! Batch losses are means over pixels. Pixels are processed in fixed-size
//! chunks whose partial sums are merged with compensated summation, so the
//! result does not depend on whether chunks run in parallel.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureGrid, BACKGROUND};
use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, log_sum_exp, softmax, CompensatedSum};
use crate::par::Execution;
use crate::prototype::PrototypeBank;

const CHUNK: usize = 256;

/// Cosine classifier scale.
pub const DEFAULT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Dispersion (pixel-prototype contrastive) weight.
    pub lambda1: f64,
    /// Compaction weight.
    pub lambda2: f64,
    /// Inheritance weight.
    pub lambda3: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.02,
            lambda3: 0.0075,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .all(|l| *l >= 0.0 && l.is_finite())
            && self.tau > 0.0
            && self.tau.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "loss weights must be non-negative and tau positive".into(),
            ))
        }
    }
}

/// The classifier as seen by a loss: foreground class heads plus the
/// background sub-heads of the bank. Logit 0 is background, logit `j + 1`
/// belongs to `class_ids[j]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a> {
    pub class_ids: &'a [u32],
    pub weights: &'a [Vec<f64>],
    pub bank: &'a PrototypeBank,
    pub scale: f64,
}

impl<'a> HeadView<'a> {
    pub fn num_logits(&self) -> usize {
        1 + self.weights.len()
    }

    pub fn logit_index(&self, label: u32) -> Result<usize> {
        if label == BACKGROUND {
            return Ok(0);
        }
        self.class_ids
            .iter()
            .position(|&c| c == label)
            .map(|j| j + 1)
            .ok_or(Error::UnknownLabel(label))
    }

    /// Scaled cosine logits and the background sub-head that won the max.
    pub fn logits(&self, feature: &[f64]) -> (Vec<f64>, usize) {
        let (slot, bg) = self
            .bank
            .best_active(feature)
            .expect("bank has an active prototype");
        let mut out = Vec::with_capacity(self.num_logits());
        out.push(self.scale * bg);
        out.extend(self.weights.iter().map(|w| self.scale * dot(feature, w)));
        (out, slot)
    }

    /// Arg-max logit (background first on ties) mapped back to a class id.
    pub fn predict(&self, feature: &[f64]) -> u32 {
        let (logits, _) = self.logits(feature);
        let mut best = 0;
        for (j, l) in logits.iter().enumerate().skip(1) {
            if *l > logits[best] {
                best = j;
            }
        }
        if best == 0 {
            BACKGROUND
        } else {
            self.class_ids[best - 1]
        }
    }

    fn ensure_background(&self) -> Result<()> {
        if self.bank.active_count() == 0 {
            return Err(Error::InsufficientPrototypes {
                needed: 1,
                available: 0,
            });
        }
        Ok(())
    }

    /// The positive target of a pixel for the embedding losses: its class
    /// head, or the best active sub-head for background pixels.
    fn target(&self, feature: &[f64], label: u32) -> Result<Target> {
        match self.logit_index(label)? {
            0 => Ok(Target::Prototype(
                self.bank.best_active(feature).expect("active prototype").0,
            )),
            j => Ok(Target::Class(j - 1)),
        }
    }

    fn target_vector(&self, t: Target) -> &[f64] {
        match t {
            Target::Class(j) => &self.weights[j],
            Target::Prototype(k) => self.bank.prototype(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Class(usize),
    Prototype(usize),
}

/// Pixels (unit features) and labels entering a loss.
#[derive(Debug, Clone, Default)]
pub struct PixelBatch<'a> {
    pub features: Vec<&'a [f64]>,
    pub labels: Vec<u32>,
}

impl<'a> PixelBatch<'a> {
    pub fn from_grid(grid: &'a FeatureGrid) -> Self {
        let mut b = Self::default();
        b.push_grid(grid);
        b
    }

    pub fn push_grid(&mut self, grid: &'a FeatureGrid) {
        self.features.extend(grid.pixel_features());
        self.labels.extend_from_slice(grid.labels());
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Loss value with gradients w.r.t. every pixel feature (flat, `len x dim`),
/// every bank slot and every class head.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub dim: usize,
    pub grad_features: Vec<f64>,
    pub grad_prototypes: Vec<Vec<f64>>,
    pub grad_weights: Vec<Vec<f64>>,
}

impl LossOutput {
    pub fn zeros(pixels: usize, dim: usize, prototypes: usize, weights: usize) -> Self {
        Self {
            value: 0.0,
            dim,
            grad_features: vec![0.0; pixels * dim],
            grad_prototypes: vec![vec![0.0; dim]; prototypes],
            grad_weights: vec![vec![0.0; dim]; weights],
        }
    }

    pub fn grad_feature(&self, pixel: usize) -> &[f64] {
        &self.grad_features[pixel * self.dim..(pixel + 1) * self.dim]
    }

    /// `self += scale * other`, value and gradients alike.
    pub fn add_scaled(&mut self, other: &LossOutput, scale: f64) {
        assert_eq!(self.grad_features.len(), other.grad_features.len());
        assert_eq!(self.grad_prototypes.len(), other.grad_prototypes.len());
        assert_eq!(self.grad_weights.len(), other.grad_weights.len());
        self.value += scale * other.value;
        axpy(scale, &other.grad_features, &mut self.grad_features);
        for (a, b) in self.grad_prototypes.iter_mut().zip(&other.grad_prototypes) {
            axpy(scale, b, a);
        }
        for (a, b) in self.grad_weights.iter_mut().zip(&other.grad_weights) {
            axpy(scale, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_features.iter().all(|x| x.is_finite())
            && self.grad_prototypes.iter().flatten().all(|x| x.is_finite())
            && self.grad_weights.iter().flatten().all(|x| x.is_finite())
    }
}

/// Per-chunk scratch handed to pixel kernels.
struct Scratch {
    grad_weights: Vec<f64>,
    grad_prototypes: Vec<f64>,
    dim: usize,
}

impl Scratch {
    fn weight(&mut self, j: usize) -> &mut [f64] {
        &mut self.grad_weights[j * self.dim..(j + 1) * self.dim]
    }

    fn prototype(&mut self, k: usize) -> &mut [f64] {
        &mut self.grad_prototypes[k * self.dim..(k + 1) * self.dim]
    }
}

/// Runs `kernel` over every pixel and averages. The kernel writes the
/// pixel's feature gradient into its slice and adds parameter gradients to
/// the scratch.
fn mean_over_pixels<F>(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    exec: Execution,
    kernel: F,
) -> Result<LossOutput>
where
    F: Fn(usize, &mut [f64], &mut Scratch) -> Result<f64> + Sync + Send,
{
    let n = batch.len();
    let dim = head.bank.dim();
    let n_w = head.weights.len();
    let n_p = head.bank.len();
    let mut out = LossOutput::zeros(n, dim, n_p, n_w);
    if n == 0 {
        return Ok(out);
    }
    let chunks = n.div_ceil(CHUNK);
    let parts = exec.map_range(chunks, |c| -> Result<_> {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        let mut scratch = Scratch {
            grad_weights: vec![0.0; n_w * dim],
            grad_prototypes: vec![0.0; n_p * dim],
            dim,
        };
        let mut gf = vec![0.0; (hi - lo) * dim];
        let mut value = CompensatedSum::new();
        for i in lo..hi {
            let off = (i - lo) * dim;
            value.add(kernel(i, &mut gf[off..off + dim], &mut scratch)?);
        }
        Ok((value, gf, scratch))
    });
    let inv = 1.0 / n as f64;
    let mut value = CompensatedSum::new();
    let mut gw = vec![CompensatedSum::new(); n_w * dim];
    let mut gp = vec![CompensatedSum::new(); n_p * dim];
    for (c, part) in parts.into_iter().enumerate() {
        let (v, gf, scratch) = part?;
        value.add(v.value());
        let lo = c * CHUNK * dim;
        for (dst, src) in out.grad_features[lo..lo + gf.len()].iter_mut().zip(&gf) {
            *dst = src * inv;
        }
        for (acc, x) in gw.iter_mut().zip(&scratch.grad_weights) {
            acc.add(*x);
        }
        for (acc, x) in gp.iter_mut().zip(&scratch.grad_prototypes) {
            acc.add(*x);
        }
    }
    out.value = value.value() * inv;
    for (j, w) in out.grad_weights.iter_mut().enumerate() {
        for (d, x) in w.iter_mut().enumerate() {
            *x = gw[j * dim + d].value() * inv;
        }
    }
    for (k, p) in out.grad_prototypes.iter_mut().enumerate() {
        for (d, x) in p.iter_mut().enumerate() {
            *x = gp[k * dim + d].value() * inv;
        }
    }
    Ok(out)
}

/// Backpropagates `dlogits` through the cosine logits of one pixel.
fn logit_backward(
    head: &HeadView<'_>,
    feature: &[f64],
    slot: usize,
    dlogits: &[f64],
    grad_feature: &mut [f64],
    scratch: &mut Scratch,
) {
    let s = head.scale;
    axpy(s * dlogits[0], head.bank.prototype(slot), grad_feature);
    axpy(s * dlogits[0], feature, scratch.prototype(slot));
    for (j, w) in head.weights.iter().enumerate() {
        let g = s * dlogits[j + 1];
        axpy(g, w, grad_feature);
        axpy(g, feature, scratch.weight(j));
    }
}

/// Mean per-pixel softmax cross-entropy over cosine logits. The background
/// logit is the best active sub-head.
pub fn cross_entropy(batch: &PixelBatch<'_>, head: &HeadView<'_>) -> Result<LossOutput> {
    cross_entropy_with(batch, head, Execution::Sequential)
}

pub fn cross_entropy_with(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    exec: Execution,
) -> Result<LossOutput> {
    head.ensure_background()?;
    mean_over_pixels(batch, head, exec, |i, gf, scratch| {
        let f = batch.features[i];
        let y = head.logit_index(batch.labels[i])?;
        let (logits, slot) = head.logits(f);
        let value = log_sum_exp(&logits) - logits[y];
        let mut d = softmax(&logits, 1.0);
        d[y] -= 1.0;
        logit_backward(head, f, slot, &d, gf, scratch);
        Ok(value)
    })
}

/// Single-pixel contrastive term against one positive and a set of negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastTerm {
    pub value: f64,
    pub grad_pixel: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `-log(exp(i.p/tau) / (exp(i.p/tau) + sum exp(i.n/tau)))`
pub fn dsp_pixel(pixel: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> ContrastTerm {
    let mut scores = Vec::with_capacity(1 + negatives.len());
    scores.push(dot(pixel, positive) / tau);
    scores.extend(negatives.iter().map(|n| dot(pixel, n) / tau));
    let value = log_sum_exp(&scores) - scores[0];
    let mut g = softmax(&scores, 1.0);
    g[0] -= 1.0;
    let dim = pixel.len();
    let mut grad_pixel = vec![0.0; dim];
    axpy(g[0] / tau, positive, &mut grad_pixel);
    for (n, gj) in negatives.iter().zip(&g[1..]) {
        axpy(gj / tau, n, &mut grad_pixel);
    }
    ContrastTerm {
        value,
        grad_pixel,
        grad_positive: pixel.iter().map(|x| x * g[0] / tau).collect(),
        grad_negatives: g[1..]
            .iter()
            .map(|gj| pixel.iter().map(|x| x * gj / tau).collect())
            .collect(),
    }
}

/// Mean dispersion loss: each pixel against its target head, with every
/// other class head and active sub-head as negatives.
pub fn dsp_loss(batch: &PixelBatch<'_>, head: &HeadView<'_>, tau: f64) -> Result<LossOutput> {
    dsp_loss_with(batch, head, tau, Execution::Sequential)
}

pub fn dsp_loss_with(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    tau: f64,
    exec: Execution,
) -> Result<LossOutput> {
    head.ensure_background()?;
    let mut candidates: Vec<Target> = (0..head.weights.len()).map(Target::Class).collect();
    candidates.extend(head.bank.active().into_iter().map(Target::Prototype));
    mean_over_pixels(batch, head, exec, |i, gf, scratch| {
        let f = batch.features[i];
        let target = head.target(f, batch.labels[i])?;
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&c| dot(f, head.target_vector(c)) / tau)
            .collect();
        let pos = candidates
            .iter()
            .position(|&c| c == target)
            .expect("target is a candidate");
        let value = log_sum_exp(&scores) - scores[pos];
        let mut g = softmax(&scores, 1.0);
        g[pos] -= 1.0;
        for (&c, gj) in candidates.iter().zip(&g) {
            let gj = gj / tau;
            axpy(gj, head.target_vector(c), gf);
            match c {
                Target::Class(j) => axpy(gj, f, scratch.weight(j)),
                Target::Prototype(k) => axpy(gj, f, scratch.prototype(k)),
            }
        }
        Ok(value)
    })
}

/// `(1 - i.p)^2` with gradients `(d/di, d/dp)`.
pub fn cmp_pixel(pixel: &[f64], prototype: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let r = 1.0 - dot(pixel, prototype);
    (
        r * r,
        prototype.iter().map(|p| -2.0 * r * p).collect(),
        pixel.iter().map(|x| -2.0 * r * x).collect(),
    )
}

/// Mean compaction loss toward each pixel's target head.
pub fn cmp_loss(batch: &PixelBatch<'_>, head: &HeadView<'_>) -> Result<LossOutput> {
    cmp_loss_with(batch, head, Execution::Sequential)
}

pub fn cmp_loss_with(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    exec: Execution,
) -> Result<LossOutput> {
    head.ensure_background()?;
    mean_over_pixels(batch, head, exec, |i, gf, scratch| {
        let f = batch.features[i];
        let target = head.target(f, batch.labels[i])?;
        let p = head.target_vector(target);
        let r = 1.0 - dot(f, p);
        axpy(-2.0 * r, p, gf);
        let dst = match target {
            Target::Class(j) => scratch.weight(j),
            Target::Prototype(k) => scratch.prototype(k),
        };
        axpy(-2.0 * r, f, dst);
        Ok(r * r)
    })
}

/// `||w - target||^2` and its gradient w.r.t. `w`; the target is fixed.
pub fn iht_loss(novel_weight: &[f64], selected_mean: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = novel_weight
        .iter()
        .zip(selected_mean)
        .map(|(w, p)| w - p)
        .collect();
    let value = dot(&diff, &diff);
    (value, diff.into_iter().map(|d| 2.0 * d).collect())
}

/// `CE + lambda1 * DSP + lambda2 * CMP`.
pub fn base_loss(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    weights: &LossWeights,
    exec: Execution,
) -> Result<LossOutput> {
    let mut total = cross_entropy_with(batch, head, exec)?;
    if weights.lambda1 != 0.0 {
        total.add_scaled(
            &dsp_loss_with(batch, head, weights.tau, exec)?,
            weights.lambda1,
        );
    }
    if weights.lambda2 != 0.0 {
        total.add_scaled(&cmp_loss_with(batch, head, exec)?, weights.lambda2);
    }
    Ok(total)
}

/// Forgetting regularizer acting on logits. `teacher` holds the frozen
/// previous model's logits (background first, then every old class); the
/// student's logits start with the same entries and append the new classes.
pub trait LogitRegularizer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Loss of one pixel; writes `d loss / d student` into `grad`.
    fn pixel_loss(&self, teacher: &[f64], student: &[f64], grad: &mut [f64]) -> f64;
}

/// KL divergence from the teacher's distribution to the student's, where
/// the student's background probability absorbs every new class
/// (the teacher saw new-class pixels as background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnbiasedDistillation {
    pub weight: f64,
}

impl Default for UnbiasedDistillation {
    fn default() -> Self {
        Self { weight: 1.0 }
    }
}

impl LogitRegularizer for UnbiasedDistillation {
    fn name(&self) -> &'static str {
        "unbiased-kd"
    }

    fn pixel_loss(&self, teacher: &[f64], student: &[f64], grad: &mut [f64]) -> f64 {
        let m = teacher.len();
        debug_assert!(student.len() >= m);
        let q = softmax(teacher, 1.0);
        let p = softmax(student, 1.0);
        let lse = log_sum_exp(student);
        let merged: Vec<f64> = std::iter::once(student[0])
            .chain(student[m..].iter().copied())
            .collect();
        let lse_merged = log_sum_exp(&merged);
        let log_bg = lse_merged - lse;
        let mut value = 0.0;
        for c in 0..m {
            if q[c] == 0.0 {
                continue;
            }
            let log_p = if c == 0 { log_bg } else { student[c] - lse };
            value += q[c] * (q[c].ln() - log_p);
        }
        for j in 0..student.len() {
            let absorbed = j == 0 || j >= m;
            let mut g = p[j];
            if absorbed {
                g -= q[0] * (student[j] - lse_merged).exp();
            } else {
                g -= q[j];
            }
            grad[j] = self.weight * g;
        }
        self.weight * value
    }
}

/// Mean regularizer over the batch, backpropagated to features and heads.
pub fn regularizer_loss(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    teacher_logits: &[Vec<f64>],
    regularizer: &dyn LogitRegularizer,
    exec: Execution,
) -> Result<LossOutput> {
    head.ensure_background()?;
    assert_eq!(teacher_logits.len(), batch.len());
    mean_over_pixels(batch, head, exec, |i, gf, scratch| {
        let f = batch.features[i];
        let (logits, slot) = head.logits(f);
        let mut d = vec![0.0; logits.len()];
        let value = regularizer.pixel_loss(&teacher_logits[i], &logits, &mut d);
        logit_backward(head, f, slot, &d, gf, scratch);
        Ok(value)
    })
}

/// Inheritance target of one novel head.
#[derive(Debug, Clone, Copy)]
pub struct InheritanceTerm<'a> {
    /// Index into `HeadView::weights`.
    pub weight_index: usize,
    pub selected_mean: &'a [f64],
}

/// Forgetting regularizer input for the incremental objective.
pub struct Distillation<'a> {
    pub teacher_logits: &'a [Vec<f64>],
    pub regularizer: &'a dyn LogitRegularizer,
}

/// `regularizer + CE + lambda3 * sum IHT`.
pub fn novel_loss(
    batch: &PixelBatch<'_>,
    head: &HeadView<'_>,
    distillation: Option<Distillation<'_>>,
    inheritance: &[InheritanceTerm<'_>],
    lambda3: f64,
    exec: Execution,
) -> Result<LossOutput> {
    let mut total = cross_entropy_with(batch, head, exec)?;
    if let Some(d) = distillation {
        total.add_scaled(
            &regularizer_loss(batch, head, d.teacher_logits, d.regularizer, exec)?,
            1.0,
        );
    }
    if lambda3 != 0.0 {
        for term in inheritance {
            let (v, g) = iht_loss(&head.weights[term.weight_index], term.selected_mean);
            total.value += lambda3 * v;
            axpy(lambda3, &g, &mut total.grad_weights[term.weight_index]);
        }
    }
    Ok(total)
}
