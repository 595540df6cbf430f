//! Central-difference checks of every analytic loss gradient over random
//! configurations. Shared by the core integration tests and the acceptance
//! target.

use protoreg::imprint::{imprint, imprint_backward, ImprintParams};
use protoreg::losses::{
    cmp_loss, cross_entropy, dsp_loss, iht_loss, regularizer_loss, HeadView, LossOutput,
    PixelBatch, UnbiasedDistillation,
};
use protoreg::numeric::{dot, fd_check, l2_normalize};
use protoreg::prototype::PrototypeBank;
use protoreg::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const LOSSES: [&str; 6] = ["ce", "dsp", "cmp", "iht", "kd", "gate"];

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&v).unwrap()
}

/// Pixels, class heads and prototypes drawn at random.
pub struct Config {
    pub dim: usize,
    pub feats: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub ids: Vec<u32>,
    pub weights: Vec<Vec<f64>>,
    pub protos: Vec<Vec<f64>>,
    pub teacher: Vec<Vec<f64>>,
    pub tau: f64,
}

impl Config {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let dim = rng.random_range(4..=10);
        let classes = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let pixels = rng.random_range(1..=8);
        let ids: Vec<u32> = (1..=classes as u32).collect();
        let teacher_len = classes;
        Self {
            dim,
            feats: (0..pixels).map(|_| unit(rng, dim)).collect(),
            labels: (0..pixels)
                .map(|_| rng.random_range(0..=classes as u32))
                .collect(),
            ids,
            weights: (0..classes).map(|_| unit(rng, dim)).collect(),
            protos: (0..k).map(|_| unit(rng, dim)).collect(),
            teacher: (0..pixels)
                .map(|_| {
                    (0..teacher_len)
                        .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
            tau: rng.random_range(0.05..1.0),
        }
    }

    fn pack(&self) -> Vec<f64> {
        self.feats
            .iter()
            .chain(&self.weights)
            .chain(&self.protos)
            .flatten()
            .copied()
            .collect()
    }

    fn unpack(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, PrototypeBank) {
        let mut rows = x.chunks(self.dim).map(<[f64]>::to_vec);
        let feats = rows.by_ref().take(self.feats.len()).collect();
        let weights = rows.by_ref().take(self.weights.len()).collect();
        let bank = PrototypeBank::new(rows.collect()).unwrap();
        (feats, weights, bank)
    }

    /// Worst relative error of `loss` w.r.t. pixels, class heads and
    /// prototypes. The bank normalizes its inputs, so prototype gradients are
    /// compared after projection onto the tangent space.
    pub fn check<L>(&self, loss: L) -> f64
    where
        L: Fn(&PixelBatch<'_>, &HeadView<'_>) -> LossOutput,
    {
        let eval = |x: &[f64]| {
            let (feats, weights, bank) = self.unpack(x);
            let batch = PixelBatch {
                features: feats.iter().map(Vec::as_slice).collect(),
                labels: self.labels.clone(),
            };
            let head = HeadView {
                class_ids: &self.ids,
                weights: &weights,
                bank: &bank,
                scale: 10.0,
            };
            loss(&batch, &head)
        };
        let grad = |x: &[f64]| {
            let out = eval(x);
            let mut g = out.grad_features.clone();
            g.extend(out.grad_weights.iter().flatten());
            for (p, gp) in self.protos.iter().zip(&out.grad_prototypes) {
                let along = dot(p, gp);
                g.extend(gp.iter().zip(p).map(|(a, b)| a - along * b));
            }
            g
        };
        fd_check(|x| eval(x).value, grad, &self.pack(), STEP)
    }
}

fn gate_path(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = Config::random(rng);
    let dim = cfg.dim;
    let novel = cfg.weights.len() - 1;
    let (f, z, p) = (unit(rng, dim), unit(rng, dim), unit(rng, dim));
    let params_of = |g: &[f64]| ImprintParams {
        w_f: g[..dim].to_vec(),
        w_att: g[dim..2 * dim].to_vec(),
        w_p: g[2 * dim..].to_vec(),
        attention_temperature: 0.1,
    };
    let bank = PrototypeBank::new(cfg.protos.clone()).unwrap();
    let batch = PixelBatch {
        features: cfg.feats.iter().map(Vec::as_slice).collect(),
        labels: cfg.labels.clone(),
    };
    let loss = |g: &[f64]| {
        let mut weights = cfg.weights.clone();
        weights[novel] = imprint(&params_of(g), &f, &z, &p).unwrap();
        let head = HeadView {
            class_ids: &cfg.ids,
            weights: &weights,
            bank: &bank,
            scale: 10.0,
        };
        cross_entropy(&batch, &head).unwrap()
    };
    let grad = |g: &[f64]| {
        let out = loss(g);
        let gg = imprint_backward(&params_of(g), &f, &z, &p, &out.grad_weights[novel]).unwrap();
        [gg.w_f, gg.w_att, gg.w_p].concat()
    };
    let gates: Vec<f64> = (0..3 * dim).map(|_| rng.random_range(0.05..1.0)).collect();
    fd_check(|g| loss(g).value, grad, &gates, STEP)
}

fn iht(rng: &mut ChaCha8Rng) -> f64 {
    let dim = rng.random_range(4..=10);
    let p = unit(rng, dim);
    let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    fd_check(|w| iht_loss(w, &p).0, |w| iht_loss(w, &p).1, &w, STEP)
}

/// Worst error per loss over `configs` random configurations.
pub fn run(configs: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0_f64; 6];
    let kd = UnbiasedDistillation::default();
    for _ in 0..configs {
        let cfg = Config::random(&mut rng);
        let errs = [
            cfg.check(|b, h| cross_entropy(b, h).unwrap()),
            cfg.check(|b, h| dsp_loss(b, h, cfg.tau).unwrap()),
            cfg.check(|b, h| cmp_loss(b, h).unwrap()),
            iht(&mut rng),
            cfg.check(|b, h| {
                regularizer_loss(b, h, &cfg.teacher, &kd, Execution::Sequential).unwrap()
            }),
            gate_path(&mut rng),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    LOSSES.into_iter().zip(worst).collect()
}
