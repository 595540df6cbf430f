//! Training protocol: base training on step 0, then incremental steps that
//! select background prototypes for each novel class, imprint its head and
//! fine-tune the imprint gates.
//!
//! Within one iteration all loss evaluation fans out over pixel chunks, while
//! parameter updates run serially in a fixed order. Runs with the same seed
//! are bit-identical in either execution mode.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_model, encode_model, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{poly_lr, Sgd};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureGrid, StepDataset, BACKGROUND};
use crate::error::{Error, Result};
use crate::imprint::{
    attention_readout, imprint, imprint_backward, mean_novel_feature, selected_mean, GateGrads,
    ImprintParams,
};
use crate::losses::{
    base_loss, novel_loss, Distillation, HeadView, InheritanceTerm, LossOutput, LossWeights,
    PixelBatch, UnbiasedDistillation, DEFAULT_SCALE,
};
use crate::matching::{select_n_rounds, AssignmentPlan, NovelSupport, DEFAULT_MASK_THRESHOLD};
use crate::numeric::{dot, l2_normalize, norm, normalize_in_place, sum_vectors, Mat};
use crate::par::Execution;
use crate::prototype::{
    initial_bank, momentum_update, respawn_prototype, warm_start_cluster_with, PrototypeBank,
};

const CHUNK: usize = 256;
/// RNG stream used for base-training batch order.
pub const BASE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Features are used as given, only normalized.
    Identity,
    /// A trainable pixel-wise linear map, initialized to the identity.
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Identity { dim: usize },
    Linear(Mat),
}

impl Extractor {
    pub fn new(kind: ExtractorKind, dim: usize) -> Self {
        match kind {
            ExtractorKind::Identity => Extractor::Identity { dim },
            ExtractorKind::Linear => Extractor::Linear(Mat::identity(dim)),
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Extractor::Identity { .. } => ExtractorKind::Identity,
            Extractor::Linear(_) => ExtractorKind::Linear,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Extractor::Identity { dim } => *dim,
            Extractor::Linear(a) => a.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Extractor::Identity { dim } => *dim,
            Extractor::Linear(a) => a.rows(),
        }
    }

    /// Unit embedding of one raw pixel.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Extractor::Identity { .. } => l2_normalize(x),
            Extractor::Linear(a) => l2_normalize(&a.matvec(x)),
        }
    }

    /// Embeds every pixel of `grid`, keeping its labels.
    pub fn embed_grid(&self, grid: &FeatureGrid, exec: Execution) -> Result<FeatureGrid> {
        if grid.dim() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: grid.dim(),
            });
        }
        let n = grid.num_pixels();
        let chunks = exec.map_range(n.div_ceil(CHUNK), |c| {
            let mut out = Vec::with_capacity(CHUNK * self.output_dim());
            for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                out.extend(self.embed(grid.feature(p))?);
            }
            Ok::<_, Error>(out)
        });
        let mut features = Vec::with_capacity(n * self.output_dim());
        for c in chunks {
            features.extend(c?);
        }
        grid.with_features(self.output_dim(), features)
    }

    /// Gradient w.r.t. the linear map given gradients at the unit embeddings
    /// of `raw` pixels. `None` for the identity extractor.
    fn backward(&self, raw: &[&[f64]], out: &LossOutput, exec: Execution) -> Option<Mat> {
        let Extractor::Linear(a) = self else {
            return None;
        };
        let n = raw.len();
        let parts = exec.map_range(n.div_ceil(CHUNK), |c| {
            let mut g = Mat::zeros(a.rows(), a.cols());
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let y = a.matvec(raw[i]);
                let len = norm(&y);
                let gu = out.grad_feature(i);
                let proj = dot(&y, gu) / len;
                let gy: Vec<f64> = gu
                    .iter()
                    .zip(&y)
                    .map(|(g, yi)| (g - proj * yi / len) / len)
                    .collect();
                g.add_outer(1.0, &gy, raw[i]);
            }
            g
        });
        let mut total = Mat::zeros(a.rows(), a.cols());
        for p in parts {
            for (t, v) in total.values_mut().iter_mut().zip(p.values()) {
                *t += v;
            }
        }
        Some(total)
    }
}

/// Foreground class heads. Background scores come from the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub class_ids: Vec<u32>,
    /// Step at which each class was added.
    pub introduced: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub scale: f64,
}

impl ClassifierHead {
    /// Classes learned in step 0.
    pub fn base_classes(&self) -> Vec<u32> {
        self.classes_where(|s| s == 0)
    }

    pub fn novel_classes(&self) -> Vec<u32> {
        self.classes_where(|s| s > 0)
    }

    fn classes_where(&self, keep: impl Fn(usize) -> bool) -> Vec<u32> {
        self.class_ids
            .iter()
            .zip(&self.introduced)
            .filter(|(_, &s)| keep(s))
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn view<'a>(&'a self, bank: &'a PrototypeBank) -> HeadView<'a> {
        HeadView {
            class_ids: &self.class_ids,
            weights: &self.weights,
            bank,
            scale: self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: Extractor,
    pub head: ClassifierHead,
    pub bank: PrototypeBank,
    pub gates: ImprintParams,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn embed_grid(&self, grid: &FeatureGrid, exec: Execution) -> Result<FeatureGrid> {
        self.extractor.embed_grid(grid, exec)
    }

    /// Arg-max class per pixel.
    pub fn predict_grid(&self, grid: &FeatureGrid, exec: Execution) -> Result<Vec<u32>> {
        let embedded = self.embed_grid(grid, exec)?;
        let view = self.head.view(&self.bank);
        Ok(embedded.pixel_features().map(|f| view.predict(f)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_epochs: usize,
    /// Grids per base-training iteration.
    pub batch_size: usize,
    pub incremental_iters: usize,
    /// Base-training learning rate.
    pub lr_init: f64,
    pub lr_incremental: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Prototype momentum coefficient.
    pub mu: f64,
    /// Number of background prototypes.
    pub k: usize,
    /// Prototypes inherited per novel class.
    pub n: usize,
    pub loss_weights: LossWeights,
    pub mask_threshold: f64,
    pub seed: u64,
    /// Prototype selection, imprinting from inherited prototypes and the
    /// inheritance loss. When off, novel heads are imprinted from the mean
    /// support feature alone.
    pub inheritance: bool,
    /// Distill the previous model's logits during incremental steps.
    pub distillation: bool,
    /// Also train the extractor and earlier heads during incremental steps.
    pub unfreeze: bool,
    pub extractor: ExtractorKind,
    pub scale: f64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 30,
            batch_size: 10,
            incremental_iters: 200,
            lr_init: 1e-2,
            lr_incremental: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            mu: 0.999,
            k: 10,
            n: 1,
            loss_weights: LossWeights::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            seed: 0,
            inheritance: true,
            distillation: true,
            unfreeze: false,
            extractor: ExtractorKind::default(),
            scale: DEFAULT_SCALE,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.k == 0 || self.n == 0 {
            return fail("batch_size, k and n must be positive");
        }
        if !(self.lr_init >= 0.0 && self.lr_incremental >= 0.0)
            || !self.lr_init.is_finite()
            || !self.lr_incremental.is_finite()
        {
            return fail("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must be in [0, 1) and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return fail("mu must be in [0, 1]");
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold <= 1.0) {
            return fail("mask_threshold must be in (0, 1]");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return fail("scale must be positive");
        }
        self.loss_weights.validate()
    }

    fn sgd(&self) -> Sgd {
        Sgd {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Per-iteration loss values of a training phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub plan: Option<AssignmentPlan>,
    pub losses: Vec<f64>,
    pub respawned: Vec<usize>,
}

fn step_params(
    sgd: &Sgd,
    lr: f64,
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    what: &'static str,
) -> Result<()> {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        sgd.step(lr, p, g, v);
        if !normalize_in_place(p) {
            return Err(Error::NonFinite(what));
        }
    }
    Ok(())
}

fn background_pixels<'a>(batch: &PixelBatch<'a>) -> Vec<&'a [f64]> {
    batch
        .features
        .iter()
        .zip(&batch.labels)
        .filter(|(_, &l)| l == BACKGROUND)
        .map(|(f, _)| *f)
        .collect()
}

fn check_finite(out: &LossOutput, what: &'static str) -> Result<()> {
    if out.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Initial model for step 0: class heads at their mean embedding, bank from
/// farthest-point seeded clustering of the background embeddings.
pub fn init_model(data: &StepDataset, config: &TrainConfig) -> Result<Model> {
    config.validate()?;
    let dim = data
        .dim()
        .ok_or_else(|| Error::Config("base dataset has no grids".into()))?;
    let exec = config.execution;
    let extractor = Extractor::new(config.extractor, dim);
    let embedded = data
        .grids
        .iter()
        .map(|g| extractor.embed_grid(g, exec))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureGrid> = embedded.iter().collect();
    let class_ids: Vec<u32> = data
        .visible_classes
        .iter()
        .copied()
        .filter(|&c| c != BACKGROUND)
        .collect();
    let weights = class_ids
        .iter()
        .map(|&c| mean_novel_feature(&refs, c))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = PixelBatch::default();
    for g in &embedded {
        batch.push_grid(g);
    }
    let bank = initial_bank(&background_pixels(&batch), config.k, exec)?;
    Ok(Model {
        head: ClassifierHead {
            introduced: vec![0; class_ids.len()],
            class_ids,
            weights,
            scale: config.scale,
        },
        gates: ImprintParams::new(extractor.output_dim()),
        extractor,
        bank,
    })
}

/// Step-0 training of extractor, class heads and prototypes.
///
/// Each iteration takes a gradient step on the base objective, re-normalizes
/// heads and prototypes, then clusters the batch's background embeddings and
/// blends the cluster means into the bank.
pub fn train_base(data: &StepDataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    if data.step != 0 {
        return Err(Error::Config(format!(
            "base training needs step 0, got {}",
            data.step
        )));
    }
    let mut model = init_model(data, config)?;
    let mut log = TrainLog::default();
    if config.base_epochs == 0 {
        return Ok((model, log));
    }
    let exec = config.execution;
    let sgd = config.sgd();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BASE_STREAM);

    let per_epoch = data.grids.len().div_ceil(config.batch_size);
    let total = config.base_epochs * per_epoch;
    let mut v_ext = Vec::new();
    let mut v_w = vec![Vec::new(); model.head.weights.len()];
    let mut v_p = vec![Vec::new(); model.bank.len()];
    let mut order: Vec<usize> = (0..data.grids.len()).collect();
    let mut iter = 0;
    for _ in 0..config.base_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = poly_lr(config.lr_init, iter, total);
            let embedded = chunk
                .iter()
                .map(|&i| model.embed_grid(&data.grids[i], exec))
                .collect::<Result<Vec<_>>>()?;
            let mut batch = PixelBatch::default();
            for g in &embedded {
                batch.push_grid(g);
            }
            let out = base_loss(
                &batch,
                &model.head.view(&model.bank),
                &config.loss_weights,
                exec,
            )?;
            check_finite(&out, "base loss")?;
            log.losses.push(out.value);

            let raw: Vec<&[f64]> = chunk
                .iter()
                .flat_map(|&i| data.grids[i].pixel_features())
                .collect();
            if let Some(g) = model.extractor.backward(&raw, &out, exec) {
                if let Extractor::Linear(a) = &mut model.extractor {
                    sgd.step(lr, a.values_mut(), g.values(), &mut v_ext);
                    if !a.is_finite() {
                        return Err(Error::NonFinite("extractor"));
                    }
                }
            }
            step_params(
                &sgd,
                lr,
                &mut model.head.weights,
                &out.grad_weights,
                &mut v_w,
                "class head",
            )?;
            step_params(
                &sgd,
                lr,
                model.bank.prototypes_mut(),
                &out.grad_prototypes,
                &mut v_p,
                "prototype",
            )?;
            model.bank.renormalize();

            let bg = background_pixels(&batch);
            if !bg.is_empty() {
                let clustering = warm_start_cluster_with(&bg, &model.bank, exec)?;
                momentum_update(&mut model.bank, &clustering, config.mu);
            }
            iter += 1;
        }
    }
    Ok((model, log))
}

/// Fixed inputs of one imprinted novel head.
struct ImprintInputs {
    f_bar: Vec<f64>,
    z: Vec<f64>,
    p_bar: Vec<f64>,
}

fn reimprint(model: &mut Model, first: usize, inputs: &[ImprintInputs]) -> Result<()> {
    for (i, inp) in inputs.iter().enumerate() {
        model.head.weights[first + i] = imprint(&model.gates, &inp.f_bar, &inp.z, &inp.p_bar)?;
    }
    Ok(())
}

/// One incremental step: select prototypes, imprint novel heads, fine-tune,
/// then refill the consumed prototype slots.
pub fn train_incremental(
    previous: &Model,
    data: &StepDataset,
    config: &TrainConfig,
) -> Result<(Model, StepLog)> {
    config.validate()?;
    if data.step == 0 {
        return Err(Error::Config(
            "incremental training needs a step >= 1".into(),
        ));
    }
    if let Some(&c) = data
        .new_classes
        .iter()
        .find(|c| previous.head.class_ids.contains(c) || **c == BACKGROUND)
    {
        return Err(Error::Config(format!("class {c} is already known")));
    }
    let exec = config.execution;
    let teacher = previous;
    let mut model = previous.clone();
    let mut log = StepLog {
        step: data.step,
        ..StepLog::default()
    };

    let mut support = data
        .grids
        .iter()
        .map(|g| model.embed_grid(g, exec))
        .collect::<Result<Vec<_>>>()?;
    let grids_with = |support: &[FeatureGrid], c: u32| -> Vec<usize> {
        (0..support.len())
            .filter(|&i| support[i].contains_label(c))
            .collect()
    };
    let f_bars = data
        .new_classes
        .iter()
        .map(|&c| {
            let gs: Vec<&FeatureGrid> = grids_with(&support, c)
                .into_iter()
                .map(|i| &support[i])
                .collect();
            mean_novel_feature(&gs, c)
        })
        .collect::<Result<Vec<_>>>()?;

    let first = model.head.weights.len();
    let mut inputs = Vec::new();
    if config.inheritance {
        let needed = config.n * data.new_classes.len();
        let available = model.bank.active_count();
        // At least one prototype must stay behind as a background sub-head.
        if available <= needed {
            return Err(Error::InsufficientPrototypes {
                needed: needed + 1,
                available,
            });
        }
        let supports: Vec<NovelSupport<'_>> = data
            .new_classes
            .iter()
            .map(|&c| NovelSupport {
                class_id: c,
                grids: grids_with(&support, c)
                    .into_iter()
                    .map(|i| &support[i])
                    .collect(),
            })
            .collect();
        let plan = select_n_rounds(
            &supports,
            &model.bank,
            config.n,
            config.mask_threshold,
            exec,
        )?;
        for (&c, f_bar) in data.new_classes.iter().zip(&f_bars) {
            let p_bar = selected_mean(&plan, &model.bank, c)?;
            let sel = plan.for_class(c).ok_or(Error::NoSelection(c))?;
            let keys: Vec<&[f64]> = model
                .head
                .weights
                .iter()
                .map(Vec::as_slice)
                .chain(sel.slots.iter().map(|&k| model.bank.prototype(k)))
                .collect();
            let z = attention_readout(f_bar, &keys, model.gates.attention_temperature);
            inputs.push(ImprintInputs {
                f_bar: f_bar.clone(),
                z,
                p_bar,
            });
        }
        for slot in plan.all_slots() {
            model.bank.mark_consumed(slot);
        }
        model.head.weights.extend(vec![Vec::new(); inputs.len()]);
        reimprint(&mut model, first, &inputs)?;
        log.plan = Some(plan);
    } else {
        model.head.weights.extend(f_bars.iter().cloned());
    }
    model
        .head
        .class_ids
        .extend(data.new_classes.iter().copied());
    model
        .head
        .introduced
        .extend(data.new_classes.iter().map(|_| data.step));

    let sgd = config.sgd();
    let teacher_view = teacher.head.view(&teacher.bank);
    let teacher_logits = |support: &[FeatureGrid]| -> Vec<Vec<f64>> {
        let feats: Vec<&[f64]> = support.iter().flat_map(|g| g.pixel_features()).collect();
        exec.map(&feats, |f| teacher_view.logits(f).0)
    };
    let mut t_logits = teacher_logits(&support);
    let regularizer = UnbiasedDistillation::default();
    let raw: Vec<&[f64]> = data.grids.iter().flat_map(|g| g.pixel_features()).collect();
    let novel = first..model.head.weights.len();
    let mut v_gates = [Vec::new(), Vec::new(), Vec::new()];
    let mut v_novel = vec![Vec::new(); novel.len()];
    let mut v_old = vec![Vec::new(); first];
    let mut v_ext = Vec::new();

    for it in 0..config.incremental_iters {
        let lr = poly_lr(config.lr_incremental, it, config.incremental_iters);
        if config.unfreeze && it > 0 {
            support = data
                .grids
                .iter()
                .map(|g| model.embed_grid(g, exec))
                .collect::<Result<Vec<_>>>()?;
            t_logits = teacher_logits(&support);
        }
        let mut batch = PixelBatch::default();
        for g in &support {
            batch.push_grid(g);
        }
        let terms: Vec<InheritanceTerm<'_>> = if config.inheritance {
            inputs
                .iter()
                .enumerate()
                .map(|(i, inp)| InheritanceTerm {
                    weight_index: first + i,
                    selected_mean: &inp.p_bar,
                })
                .collect()
        } else {
            Vec::new()
        };
        let distill = config.distillation.then_some(Distillation {
            teacher_logits: &t_logits,
            regularizer: &regularizer,
        });
        let out = novel_loss(
            &batch,
            &model.head.view(&model.bank),
            distill,
            &terms,
            config.loss_weights.lambda3,
            exec,
        )?;
        check_finite(&out, "novel loss")?;
        log.losses.push(out.value);

        if config.inheritance {
            let mut gg = GateGrads::zeros(model.dim());
            for (i, inp) in inputs.iter().enumerate() {
                gg.accumulate(&imprint_backward(
                    &model.gates,
                    &inp.f_bar,
                    &inp.z,
                    &inp.p_bar,
                    &out.grad_weights[first + i],
                )?);
            }
            let [vf, va, vp] = &mut v_gates;
            sgd.step(lr, &mut model.gates.w_f, &gg.w_f, vf);
            sgd.step(lr, &mut model.gates.w_att, &gg.w_att, va);
            sgd.step(lr, &mut model.gates.w_p, &gg.w_p, vp);
            reimprint(&mut model, first, &inputs)?;
        } else {
            step_params(
                &sgd,
                lr,
                &mut model.head.weights[novel.clone()],
                &out.grad_weights[novel.clone()],
                &mut v_novel,
                "novel head",
            )?;
        }
        if config.unfreeze {
            step_params(
                &sgd,
                lr,
                &mut model.head.weights[..first],
                &out.grad_weights[..first],
                &mut v_old,
                "class head",
            )?;
            if let Some(g) = model.extractor.backward(&raw, &out, exec) {
                if let Extractor::Linear(a) = &mut model.extractor {
                    sgd.step(lr, a.values_mut(), g.values(), &mut v_ext);
                }
            }
        }
        let bg = background_pixels(&batch);
        if !bg.is_empty() {
            let clustering = warm_start_cluster_with(&bg, &model.bank, exec)?;
            momentum_update(&mut model.bank, &clustering, config.mu);
        }
    }

    if let Some(plan) = &log.plan {
        if config.unfreeze {
            support = data
                .grids
                .iter()
                .map(|g| model.embed_grid(g, exec))
                .collect::<Result<Vec<_>>>()?;
        }
        let view = model.head.view(&model.bank);
        let mut bg = Vec::new();
        let mut predicted_bg = Vec::new();
        for g in &support {
            for (f, &l) in g.pixel_features().zip(g.labels()) {
                if l == BACKGROUND {
                    bg.push(f);
                    if view.predict(f) == BACKGROUND {
                        predicted_bg.push(f);
                    }
                }
            }
        }
        let pixels = if predicted_bg.is_empty() {
            bg
        } else {
            predicted_bg
        };
        let mut bank = model.bank.clone();
        for slot in plan.all_slots() {
            respawn_prototype(&mut bank, slot, &pixels)?;
            log.respawned.push(slot);
        }
        model.bank = bank;
    }
    Ok((model, log))
}

/// Mean unit embedding of the pixels of `class` under `model`.
pub fn class_centroid(
    model: &Model,
    grids: &[FeatureGrid],
    class: u32,
    exec: Execution,
) -> Result<Vec<f64>> {
    let embedded = grids
        .iter()
        .map(|g| model.embed_grid(g, exec))
        .collect::<Result<Vec<_>>>()?;
    let feats = embedded.iter().flat_map(|g| {
        g.pixel_features()
            .zip(g.labels())
            .filter(move |(_, &l)| l == class)
            .map(|(f, _)| f)
    });
    let mean = sum_vectors(model.dim(), feats);
    l2_normalize(&mean).map_err(|_| Error::NoPixels(class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_world, WorldParams};
    use crate::numeric::{fd_check, is_unit};
    use rand::Rng;

    fn small_world() -> Vec<StepDataset> {
        let params = WorldParams {
            base_grids: 20,
            eval_grids: 4,
            ..WorldParams::default()
        };
        generate_world(&params.build().unwrap()).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            base_epochs: 2,
            incremental_iters: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let world = small_world();
        let cfg = TrainConfig {
            base_epochs: 0,
            ..TrainConfig::default()
        };
        let (model, log) = train_base(&world[0], &cfg).unwrap();
        assert_eq!(model, init_model(&world[0], &cfg).unwrap());
        assert!(log.losses.is_empty());
    }

    #[test]
    fn base_training_keeps_unit_heads() {
        let world = small_world();
        let (model, log) = train_base(&world[0], &quick_config()).unwrap();
        assert_eq!(log.losses.len(), 4);
        assert!(model.head.weights.iter().all(|w| is_unit(w)));
        assert!(model.bank.prototypes().iter().all(|p| is_unit(p)));
        assert_eq!(model.head.class_ids, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn incremental_freezes_base_heads_and_extractor() {
        let world = small_world();
        let cfg = quick_config();
        let (base, _) = train_base(&world[0], &cfg).unwrap();
        let (next, log) = train_incremental(&base, &world[1], &cfg).unwrap();
        assert_eq!(next.head.weights[..5], base.head.weights[..]);
        assert_eq!(next.extractor, base.extractor);
        assert_eq!(next.head.class_ids, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(log.losses.len(), 5);
        assert_eq!(log.respawned, log.plan.unwrap().all_slots());
        assert_eq!(next.bank.active_count(), next.bank.len());
    }

    #[test]
    fn zero_iterations_gives_pure_imprint() {
        let world = small_world();
        let cfg = TrainConfig {
            incremental_iters: 0,
            ..quick_config()
        };
        let (base, _) = train_base(&world[0], &cfg).unwrap();
        let (next, log) = train_incremental(&base, &world[1], &cfg).unwrap();
        assert!(log.losses.is_empty());
        assert_eq!(next.gates, base.gates);
        let plan = log.plan.unwrap();
        let support: Vec<FeatureGrid> = world[1]
            .grids
            .iter()
            .map(|g| base.embed_grid(g, Execution::Sequential).unwrap())
            .collect();
        let refs: Vec<&FeatureGrid> = support.iter().collect();
        let f = mean_novel_feature(&refs, 6).unwrap();
        let p = selected_mean(&plan, &base.bank, 6).unwrap();
        let mut keys: Vec<&[f64]> = base.head.weights.iter().map(Vec::as_slice).collect();
        keys.push(base.bank.prototype(plan.selections[0].slots[0]));
        let z = attention_readout(&f, &keys, 0.1);
        assert_eq!(
            next.head.weights[5],
            imprint(&base.gates, &f, &z, &p).unwrap()
        );
    }

    #[test]
    fn too_many_rounds_is_insufficient() {
        let world = small_world();
        let cfg = TrainConfig {
            k: 3,
            n: 3,
            ..quick_config()
        };
        let (base, _) = train_base(&world[0], &cfg).unwrap();
        assert!(matches!(
            train_incremental(&base, &world[1], &cfg),
            Err(Error::InsufficientPrototypes { .. })
        ));
    }

    #[test]
    fn rejects_wrong_steps() {
        let world = small_world();
        let cfg = quick_config();
        assert!(matches!(train_base(&world[1], &cfg), Err(Error::Config(_))));
        let (base, _) = train_base(&world[0], &cfg).unwrap();
        assert!(matches!(
            train_incremental(&base, &world[0], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let world = small_world();
        let run = |execution| {
            let cfg = TrainConfig {
                execution,
                ..quick_config()
            };
            let (base, _) = train_base(&world[0], &cfg).unwrap();
            train_incremental(&base, &world[1], &cfg).unwrap().0
        };
        assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
    }

    #[test]
    fn extractor_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = 4;
        let a0: Vec<f64> = (0..dim * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let target: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let loss = |a: &[f64]| {
            let ext = Extractor::Linear(Mat::from_vec(dim, dim, a.to_vec()).unwrap());
            dot(&ext.embed(&x).unwrap(), &target)
        };
        let grad = |a: &[f64]| {
            let ext = Extractor::Linear(Mat::from_vec(dim, dim, a.to_vec()).unwrap());
            let mut out = LossOutput::zeros(1, dim, 0, 0);
            out.grad_features.copy_from_slice(&target);
            ext.backward(&[&x], &out, Execution::Sequential)
                .unwrap()
                .values()
                .to_vec()
        };
        assert!(fd_check(loss, grad, &a0, 1e-6) < 1e-4);
    }

    #[test]
    fn dim_mismatch_on_embed() {
        let ext = Extractor::new(ExtractorKind::Linear, 3);
        let g = FeatureGrid::new(1, 1, 2, vec![1.0, 0.0], vec![0]).unwrap();
        assert!(matches!(
            ext.embed_grid(&g, Execution::Sequential),
            Err(Error::DimMismatch {
                expected: 3,
                found: 2
            })
        ));
    }
}
