//! Segmentation metrics from globally accumulated confusion counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureGrid, BACKGROUND};
use crate::engine::Model;
use crate::error::{Error, Result};
use crate::par::Execution;

/// `2ab / (a + b)`, or 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        a * (2.0 * b / (a + b))
    }
}

/// Value times 100 rounded to one decimal.
pub fn percent(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// Square confusion counts over an indexed class list; rows are ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    classes: Vec<u32>,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: Vec<u32>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![0; n * n],
        }
    }

    fn index(&self, c: u32) -> Result<usize> {
        self.classes
            .iter()
            .position(|&x| x == c)
            .ok_or(Error::UnknownLabel(c))
    }

    pub fn add(&mut self, truth: &[u32], predicted: &[u32]) -> Result<()> {
        assert_eq!(truth.len(), predicted.len());
        let n = self.classes.len();
        for (&t, &p) in truth.iter().zip(predicted) {
            let (i, j) = (self.index(t)?, self.index(p)?);
            self.counts[i * n + j] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: u32, predicted: u32) -> u64 {
        let n = self.classes.len();
        match (self.index(truth), self.index(predicted)) {
            (Ok(i), Ok(j)) => self.counts[i * n + j],
            _ => 0,
        }
    }

    /// `TP / (TP + FP + FN)`; `None` when the class never occurs in either.
    pub fn iou(&self, class: u32) -> Option<f64> {
        let n = self.classes.len();
        let k = self.index(class).ok()?;
        let tp = self.counts[k * n + k];
        let fn_: u64 = (0..n).map(|j| self.counts[k * n + j]).sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|i| self.counts[i * n + k]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    /// IoU per class, background included; undefined classes are absent.
    pub per_class_iou: BTreeMap<u32, f64>,
    /// Mean over background and base classes.
    pub miou_base: f64,
    pub miou_novel: f64,
    pub hm: f64,
    /// Classes absent from both prediction and ground truth.
    pub undefined_classes: Vec<u32>,
}

fn mean_defined(per_class: &BTreeMap<u32, f64>, classes: &[u32]) -> f64 {
    let vals: Vec<f64> = classes
        .iter()
        .filter_map(|c| per_class.get(c).copied())
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

impl EvalReport {
    pub fn from_confusion(conf: &Confusion, base: &[u32], novel: &[u32], step: usize) -> Self {
        let mut per_class_iou = BTreeMap::new();
        let mut undefined_classes = Vec::new();
        for &c in &conf.classes {
            match conf.iou(c) {
                Some(v) => {
                    per_class_iou.insert(c, v);
                }
                None => undefined_classes.push(c),
            }
        }
        let mut base_set = vec![BACKGROUND];
        base_set.extend(base.iter().copied().filter(|&c| c != BACKGROUND));
        let miou_base = mean_defined(&per_class_iou, &base_set);
        let miou_novel = mean_defined(&per_class_iou, novel);
        Self {
            step,
            per_class_iou,
            miou_base,
            miou_novel,
            hm: harmonic_mean(miou_base, miou_novel),
            undefined_classes,
        }
    }

    /// The report scaled by 100 and rounded to one decimal.
    pub fn to_percent(&self) -> EvalReport {
        EvalReport {
            step: self.step,
            per_class_iou: self
                .per_class_iou
                .iter()
                .map(|(&c, &v)| (c, percent(v)))
                .collect(),
            miou_base: percent(self.miou_base),
            miou_novel: percent(self.miou_novel),
            hm: percent(self.hm),
            undefined_classes: self.undefined_classes.clone(),
        }
    }
}

/// Scores predicted label maps against ground truth.
pub fn evaluate_predictions(
    truth: &[&[u32]],
    predicted: &[Vec<u32>],
    base: &[u32],
    novel: &[u32],
    step: usize,
) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut classes = vec![BACKGROUND];
    classes.extend(
        base.iter()
            .chain(novel)
            .copied()
            .filter(|&c| c != BACKGROUND),
    );
    let mut conf = Confusion::new(classes);
    for (t, p) in truth.iter().zip(predicted) {
        conf.add(t, p)?;
    }
    Ok(EvalReport::from_confusion(&conf, base, novel, step))
}

/// Evaluates `model` on labelled grids. Labels must be background, a base
/// class or a novel class.
pub fn evaluate(
    model: &Model,
    grids: &[FeatureGrid],
    base: &[u32],
    novel: &[u32],
    step: usize,
    exec: Execution,
) -> Result<EvalReport> {
    if grids.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut classes = vec![BACKGROUND];
    classes.extend(
        base.iter()
            .chain(novel)
            .copied()
            .filter(|&c| c != BACKGROUND),
    );
    for &c in &model.head.class_ids {
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    let parts = exec.map(grids, |g| -> Result<Confusion> {
        let pred = model.predict_grid(g, Execution::Sequential)?;
        let mut conf = Confusion::new(classes.clone());
        conf.add(g.labels(), &pred)?;
        Ok(conf)
    });
    let mut conf = Confusion::new(classes.clone());
    for p in parts {
        conf.merge(&p?);
    }
    Ok(EvalReport::from_confusion(&conf, base, novel, step))
}

/// Drop in mIoU-Base between two reports.
pub fn forgetting(before: &EvalReport, after: &EvalReport) -> f64 {
    before.miou_base - after.miou_base
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hm_table_rows() {
        assert_eq!(percent(harmonic_mean(0.641, 0.169)), 26.7);
        assert_eq!(percent(harmonic_mean(0.661, 0.180)), 28.3);
        assert!((harmonic_mean(64.1, 16.9) - 26.748).abs() < 0.001);
        assert!((harmonic_mean(66.1, 18.0) - 28.295).abs() < 0.001);
    }

    #[test]
    fn hm_edge_cases() {
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.7), 0.0);
        assert_eq!(harmonic_mean(0.4, 0.4), 0.4);
    }

    #[test]
    fn perfect_predictions() {
        let t: Vec<u32> = vec![0, 1, 2, 6, 6, 0];
        let r = evaluate_predictions(&[&t], std::slice::from_ref(&t), &[1, 2], &[6], 1).unwrap();
        assert_eq!(r.miou_base, 1.0);
        assert_eq!(r.miou_novel, 1.0);
        assert_eq!(r.hm, 1.0);
        assert!(r.undefined_classes.is_empty());
    }

    #[test]
    fn undefined_class_excluded() {
        let t: Vec<u32> = vec![0, 1, 1, 0];
        let p: Vec<u32> = vec![0, 1, 0, 0];
        let r = evaluate_predictions(&[&t], &[p], &[1, 2], &[], 0).unwrap();
        assert_eq!(r.undefined_classes, vec![2]);
        // background 2/3, class 1 1/2
        assert!((r.miou_base - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(r.miou_novel, 0.0);
        assert_eq!(r.hm, 0.0);
    }

    #[test]
    fn unknown_label_and_empty() {
        let t: Vec<u32> = vec![0, 9];
        assert!(matches!(
            evaluate_predictions(&[&t], &[vec![0, 0]], &[1], &[], 0),
            Err(Error::UnknownLabel(9))
        ));
        assert!(matches!(
            evaluate_predictions(&[], &[], &[1], &[], 0),
            Err(Error::EmptyEvalSet)
        ));
    }

    #[test]
    fn percent_rounds_one_decimal() {
        assert_eq!(percent(0.26748), 26.7);
        assert_eq!(percent(0.28295), 28.3);
        assert_eq!(percent(1.0), 100.0);
    }

    fn naive_iou(truth: &[Vec<u32>], pred: &[Vec<u32>], c: u32) -> Option<f64> {
        let (mut inter, mut union) = (0u64, 0u64);
        for (t, p) in truth.iter().zip(pred) {
            for (a, b) in t.iter().zip(p) {
                if *a == c && *b == c {
                    inter += 1;
                }
                if *a == c || *b == c {
                    union += 1;
                }
            }
        }
        (union > 0).then(|| inter as f64 / union as f64)
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let classes = [0u32, 1, 2, 3, 6, 7];
        let truth: Vec<Vec<u32>> = (0..5)
            .map(|_| (0..40).map(|_| classes[rng.random_range(0..6)]).collect())
            .collect();
        let pred: Vec<Vec<u32>> = (0..5)
            .map(|_| (0..40).map(|_| classes[rng.random_range(0..6)]).collect())
            .collect();
        let refs: Vec<&[u32]> = truth.iter().map(Vec::as_slice).collect();
        let r = evaluate_predictions(&refs, &pred, &[1, 2, 3], &[6, 7], 2).unwrap();
        for c in classes {
            assert_eq!(
                r.per_class_iou.get(&c).copied(),
                naive_iou(&truth, &pred, c)
            );
        }
        let base = [0, 1, 2, 3].map(|c| naive_iou(&truth, &pred, c).unwrap());
        assert!((r.miou_base - base.iter().sum::<f64>() / 4.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn hm_bounds(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let h = harmonic_mean(a, b);
            prop_assert!(h <= (a + b) / 2.0 + 1e-15);
            prop_assert!(h <= 2.0 * a.min(b) + 1e-15);
        }

        #[test]
        fn order_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth: Vec<Vec<u32>> = (0..4).map(|_| (0..16).map(|_| rng.random_range(0..4)).collect()).collect();
            let pred: Vec<Vec<u32>> = (0..4).map(|_| (0..16).map(|_| rng.random_range(0..4)).collect()).collect();
            let refs: Vec<&[u32]> = truth.iter().map(Vec::as_slice).collect();
            let a = evaluate_predictions(&refs, &pred, &[1, 2], &[3], 0).unwrap();
            let rev_t: Vec<&[u32]> = refs.iter().rev().copied().collect();
            let rev_p: Vec<Vec<u32>> = pred.iter().rev().cloned().collect();
            let b = evaluate_predictions(&rev_t, &rev_p, &[1, 2], &[3], 0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn iou_agrees_with_mask_iou(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<u32> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let p: Vec<u32> = (0..30).map(|_| rng.random_range(0..3)).collect();
            let r = evaluate_predictions(&[&t], std::slice::from_ref(&p), &[1], &[2], 0).unwrap();
            for c in 0..3u32 {
                let mt: Vec<bool> = t.iter().map(|&x| x == c).collect();
                let mp: Vec<bool> = p.iter().map(|&x| x == c).collect();
                let m = crate::matching::iou(&mt, &mp).unwrap();
                if let Some(v) = r.per_class_iou.get(&c) {
                    prop_assert!((v - m).abs() < 1e-15);
                }
            }
        }
    }
}
