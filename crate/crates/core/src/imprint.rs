//! Dynamic weight imprinting for novel class heads.
//!
//! A novel head is a gated, element-wise combination of three vectors: the
//! mean embedding of the class's support pixels, an attention readout over
//! the existing heads plus the inherited prototypes, and the mean of the
//! inherited prototypes. The result is normalized to serve as a cosine head.

use serde::{Deserialize, Serialize};

use crate::data::FeatureGrid;
use crate::error::{Error, Result};
use crate::matching::AssignmentPlan;
use crate::numeric::{dot, l2_normalize, norm, softmax, sum_vectors, NORM_FLOOR};
use crate::prototype::PrototypeBank;

/// Learnable gates of the imprint combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprintParams {
    pub w_f: Vec<f64>,
    pub w_att: Vec<f64>,
    pub w_p: Vec<f64>,
    pub attention_temperature: f64,
}

impl ImprintParams {
    pub fn new(dim: usize) -> Self {
        Self {
            w_f: vec![0.5; dim],
            w_att: vec![0.1; dim],
            w_p: vec![0.5; dim],
            attention_temperature: 0.1,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_f.len()
    }
}

/// Normalized mean of every pixel labelled `class_id` across `supports`.
pub fn mean_novel_feature(supports: &[&FeatureGrid], class_id: u32) -> Result<Vec<f64>> {
    let dim = supports.first().map(|g| g.dim()).unwrap_or(0);
    let pixels: Vec<&[f64]> = supports
        .iter()
        .flat_map(|g| {
            g.pixel_features()
                .zip(g.labels())
                .filter(|(_, &l)| l == class_id)
                .map(|(f, _)| f)
        })
        .collect();
    if pixels.is_empty() {
        return Err(Error::NoPixels(class_id));
    }
    l2_normalize(&sum_vectors(dim, pixels))
}

/// `sum_j softmax(query . key_j / temperature)_j * key_j`
pub fn attention_readout(query: &[f64], keys: &[&[f64]], temperature: f64) -> Vec<f64> {
    assert!(!keys.is_empty(), "attention needs at least one key");
    let scores: Vec<f64> = keys.iter().map(|k| dot(query, k)).collect();
    let weights = softmax(&scores, temperature);
    let mut z = vec![0.0; query.len()];
    for (k, w) in keys.iter().zip(&weights) {
        crate::numeric::axpy(*w, k, &mut z);
    }
    z
}

/// Unnormalized gated combination `w_f*f + w_att*z + w_p*p`.
pub fn imprint_raw(params: &ImprintParams, f_bar: &[f64], z: &[f64], p_bar: &[f64]) -> Vec<f64> {
    (0..params.dim())
        .map(|d| params.w_f[d] * f_bar[d] + params.w_att[d] * z[d] + params.w_p[d] * p_bar[d])
        .collect()
}

pub fn imprint(
    params: &ImprintParams,
    f_bar: &[f64],
    z: &[f64],
    p_bar: &[f64],
) -> Result<Vec<f64>> {
    l2_normalize(&imprint_raw(params, f_bar, z, p_bar))
}

/// Gradients of a loss w.r.t. the three gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub w_f: Vec<f64>,
    pub w_att: Vec<f64>,
    pub w_p: Vec<f64>,
}

impl GateGrads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_f: vec![0.0; dim],
            w_att: vec![0.0; dim],
            w_p: vec![0.0; dim],
        }
    }

    pub fn accumulate(&mut self, other: &GateGrads) {
        for (a, b) in [
            (&mut self.w_f, &other.w_f),
            (&mut self.w_att, &other.w_att),
            (&mut self.w_p, &other.w_p),
        ] {
            crate::numeric::axpy(1.0, b, a);
        }
    }
}

/// Pulls `d loss / d w_n` (w.r.t. the normalized head) back to the gates.
pub fn imprint_backward(
    params: &ImprintParams,
    f_bar: &[f64],
    z: &[f64],
    p_bar: &[f64],
    grad_head: &[f64],
) -> Result<GateGrads> {
    let raw = imprint_raw(params, f_bar, z, p_bar);
    let n = norm(&raw);
    if !(n >= NORM_FLOOR) {
        return Err(Error::ZeroVector { norm: n });
    }
    let w: Vec<f64> = raw.iter().map(|x| x / n).collect();
    let proj = dot(&w, grad_head);
    let g_raw: Vec<f64> = grad_head
        .iter()
        .zip(&w)
        .map(|(g, wi)| (g - proj * wi) / n)
        .collect();
    Ok(GateGrads {
        w_f: g_raw.iter().zip(f_bar).map(|(g, f)| g * f).collect(),
        w_att: g_raw.iter().zip(z).map(|(g, x)| g * x).collect(),
        w_p: g_raw.iter().zip(p_bar).map(|(g, p)| g * p).collect(),
    })
}

/// Arithmetic mean of the prototypes selected for `class_id`.
pub fn selected_mean(
    plan: &AssignmentPlan,
    bank: &PrototypeBank,
    class_id: u32,
) -> Result<Vec<f64>> {
    let sel = plan
        .for_class(class_id)
        .filter(|s| !s.slots.is_empty())
        .ok_or(Error::NoSelection(class_id))?;
    if sel.slots.len() == 1 {
        return Ok(bank.prototype(sel.slots[0]).to_vec());
    }
    let inv = 1.0 / sel.slots.len() as f64;
    Ok(
        sum_vectors(bank.dim(), sel.slots.iter().map(|&k| bank.prototype(k)))
            .into_iter()
            .map(|x| x * inv)
            .collect(),
    )
}
