//! Background sub-class prototypes.
//!
//! The bank holds `K` unit vectors that partition the background part of the
//! embedding space and double as background classifier sub-heads. They are
//! refreshed by warm-started spherical k-means followed by a momentum blend,
//! and a slot inherited by a novel class can later be refilled from whatever
//! background is left.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize, normalize_in_place, sum_vectors};
use crate::par::Execution;

pub const MAX_KMEANS_ROUNDS: usize = 20;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: Vec<Vec<f64>>,
    assigned_counts: Vec<usize>,
    consumed: Vec<bool>,
}

impl PrototypeBank {
    /// Builds a bank from (not necessarily unit) vectors; each is normalized.
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::InsufficientPrototypes {
                needed: 1,
                available: 0,
            });
        }
        let dim = vectors[0].len();
        let prototypes = vectors
            .iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        found: v.len(),
                    });
                }
                l2_normalize(v)
            })
            .collect::<Result<Vec<_>>>()?;
        let k = prototypes.len();
        Ok(Self {
            prototypes,
            assigned_counts: vec![0; k],
            consumed: vec![false; k],
        })
    }

    pub(crate) fn from_parts(prototypes: Vec<Vec<f64>>, consumed: Vec<bool>) -> Self {
        let k = prototypes.len();
        Self {
            prototypes,
            assigned_counts: vec![0; k],
            consumed,
        }
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k]
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn assigned_counts(&self) -> &[usize] {
        &self.assigned_counts
    }

    pub fn is_consumed(&self, k: usize) -> bool {
        self.consumed[k]
    }

    pub fn consumed(&self) -> &[bool] {
        &self.consumed
    }

    /// Slot indices of prototypes still acting as background sub-heads.
    pub fn active(&self) -> Vec<usize> {
        (0..self.len()).filter(|&k| !self.consumed[k]).collect()
    }

    pub fn active_count(&self) -> usize {
        self.consumed.iter().filter(|c| !**c).count()
    }

    pub fn mark_consumed(&mut self, k: usize) {
        self.consumed[k] = true;
    }

    /// Best active sub-head for a unit pixel: `(slot, cosine)`. Ties go to the lowest slot.
    pub fn best_active(&self, pixel: &[f64]) -> Option<(usize, f64)> {
        best_center(pixel, &self.prototypes, Some(&self.consumed))
    }

    /// Applies a raw parameter update (e.g. an optimizer step) and re-normalizes.
    pub(crate) fn prototypes_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.prototypes
    }

    pub(crate) fn renormalize(&mut self) {
        for p in &mut self.prototypes {
            normalize_in_place(p);
        }
    }
}

/// Output of a warm-started clustering pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Bank slot per input pixel.
    pub assignment: Vec<usize>,
    /// Normalized cluster mean per slot; previous prototype for empty or consumed slots.
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub rounds: usize,
    /// Sum of cosine distances after each assignment pass.
    pub objective: Vec<f64>,
}

/// Spherical k-means over unit `pixels`, seeded with the bank's active prototypes.
pub fn warm_start_cluster(pixels: &[&[f64]], bank: &PrototypeBank) -> Result<Clustering> {
    warm_start_cluster_with(pixels, bank, Execution::Sequential)
}

pub fn warm_start_cluster_with(
    pixels: &[&[f64]],
    bank: &PrototypeBank,
    exec: Execution,
) -> Result<Clustering> {
    if pixels.is_empty() {
        return Err(Error::NoBackground);
    }
    if bank.active_count() == 0 {
        return Err(Error::InsufficientPrototypes {
            needed: 1,
            available: 0,
        });
    }
    let run = spherical_kmeans(pixels, bank.prototypes.clone(), Some(&bank.consumed), exec);
    Ok(run)
}

fn best_center(pixel: &[f64], centers: &[Vec<f64>], skip: Option<&[bool]>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in centers.iter().enumerate() {
        if skip.is_some_and(|s| s[k]) {
            continue;
        }
        let s = dot(pixel, c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    best
}

fn spherical_kmeans(
    pixels: &[&[f64]],
    mut centers: Vec<Vec<f64>>,
    skip: Option<&[bool]>,
    exec: Execution,
) -> Clustering {
    let k = centers.len();
    let dim = centers[0].len();
    let mut objective = Vec::new();
    let mut assignment = Vec::new();
    let mut counts = vec![0; k];
    let mut rounds = 0;
    while rounds < MAX_KMEANS_ROUNDS {
        rounds += 1;
        let best: Vec<(usize, f64)> = exec.map(pixels, |p| {
            best_center(p, &centers, skip).expect("at least one active center")
        });
        let obj: f64 = crate::numeric::compensated_sum(best.iter().map(|(_, s)| 1.0 - s));
        assignment = best.into_iter().map(|(c, _)| c).collect();

        let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
        for (p, &c) in pixels.iter().zip(&assignment) {
            members[c].push(p);
        }
        counts = members.iter().map(Vec::len).collect();
        let mut shift: f64 = 0.0;
        for (c, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let mut mean = sum_vectors(dim, m.iter().copied());
            if normalize_in_place(&mut mean) {
                shift = shift.max(1.0 - dot(&mean, &centers[c]));
                centers[c] = mean;
            }
        }
        let converged = shift < 1e-12
            || objective
                .last()
                .is_some_and(|prev: &f64| (prev - obj).abs() < KMEANS_TOLERANCE);
        objective.push(obj);
        if converged {
            break;
        }
    }
    Clustering {
        assignment,
        means: centers,
        counts,
        rounds,
        objective,
    }
}

/// Blends each active prototype with its cluster mean,
/// `p <- normalize(mu * p + (1 - mu) * mean)`. Slots with no members are left alone.
pub fn momentum_update(bank: &mut PrototypeBank, clustering: &Clustering, mu: f64) {
    assert!((0.0..=1.0).contains(&mu), "momentum must lie in [0, 1]");
    bank.assigned_counts = clustering.counts.clone();
    for k in 0..bank.len() {
        if bank.consumed[k] || clustering.counts[k] == 0 {
            continue;
        }
        let mean = &clustering.means[k];
        let mut blended: Vec<f64> = bank.prototypes[k]
            .iter()
            .zip(mean)
            .map(|(p, m)| mu * p + (1.0 - mu) * m)
            .collect();
        if normalize_in_place(&mut blended) {
            bank.prototypes[k] = blended;
        }
    }
}

/// Refills a consumed slot with the background cluster farthest from the
/// remaining active prototypes.
///
/// The pixels are clustered with the active prototypes plus one extra seed,
/// the pixel worst covered by the active set. The resulting cluster whose
/// center is farthest (in cosine distance) from every original active
/// prototype becomes the new prototype.
pub fn respawn_prototype(bank: &mut PrototypeBank, slot: usize, pixels: &[&[f64]]) -> Result<()> {
    if !bank.consumed[slot] {
        return Err(Error::NotConsumed(slot));
    }
    if pixels.is_empty() {
        return Err(Error::NoBackground);
    }
    let active: Vec<Vec<f64>> = bank
        .active()
        .into_iter()
        .map(|k| bank.prototypes[k].clone())
        .collect();
    let coverage = |v: &[f64]| -> f64 {
        active
            .iter()
            .map(|p| dot(v, p))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    // Lowest coverage wins; first index on ties.
    let mut seed = 0;
    let mut worst = f64::INFINITY;
    for (i, p) in pixels.iter().enumerate() {
        let c = coverage(p);
        if c < worst {
            worst = c;
            seed = i;
        }
    }
    let mut centers = active.clone();
    centers.push(pixels[seed].to_vec());
    let run = spherical_kmeans(pixels, centers, None, Execution::Sequential);
    let mut chosen: Option<(usize, f64)> = None;
    for (c, mean) in run.means.iter().enumerate() {
        if run.counts[c] == 0 {
            continue;
        }
        let cov = coverage(mean);
        if chosen.is_none_or(|(_, b)| cov < b) {
            chosen = Some((c, cov));
        }
    }
    let (c, _) = chosen.expect("non-empty pixel set yields a non-empty cluster");
    bank.prototypes[slot] = run.means[c].clone();
    bank.consumed[slot] = false;
    bank.assigned_counts[slot] = 0;
    Ok(())
}

/// Deterministic farthest-point seeding followed by spherical k-means; used to
/// create the initial bank from background embeddings.
pub fn initial_bank(pixels: &[&[f64]], k: usize, exec: Execution) -> Result<PrototypeBank> {
    if pixels.is_empty() {
        return Err(Error::NoBackground);
    }
    if k == 0 {
        return Err(Error::InsufficientPrototypes {
            needed: 1,
            available: 0,
        });
    }
    let dim = pixels[0].len();
    let mean = sum_vectors(dim, pixels.iter().copied());
    // Start from the pixel most aligned with the global mean direction.
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, p) in pixels.iter().enumerate() {
        let s = dot(p, &mean);
        if s > best {
            best = s;
            first = i;
        }
    }
    let mut centers = vec![pixels[first].to_vec()];
    let mut coverage: Vec<f64> = pixels.iter().map(|p| dot(p, &centers[0])).collect();
    while centers.len() < k {
        let (next, _) = coverage
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &c)| if c < acc.1 { (i, c) } else { acc },
            );
        let c = pixels[next].to_vec();
        for (cov, p) in coverage.iter_mut().zip(pixels) {
            *cov = cov.max(dot(p, &c));
        }
        centers.push(c);
    }
    let run = spherical_kmeans(pixels, centers, None, exec);
    PrototypeBank::new(run.means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::is_unit;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn e(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn lobe(rng: &mut ChaCha8Rng, center: &[f64], n: usize, sigma: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = center
                    .iter()
                    .map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                l2_normalize(&v).unwrap()
            })
            .collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn fixed_point_converges_in_one_round() {
        let protos: Vec<Vec<f64>> = (0..3).map(|i| e(4, i)).collect();
        let bank = PrototypeBank::new(protos.clone()).unwrap();
        let c = warm_start_cluster(&refs(&protos), &bank).unwrap();
        assert_eq!(c.assignment, vec![0, 1, 2]);
        assert_eq!(c.means, protos);
        assert_eq!(c.rounds, 1);
    }

    #[test]
    fn empty_clusters_keep_prototype() {
        let protos: Vec<Vec<f64>> = (0..3).map(|i| e(4, i)).collect();
        let bank = PrototypeBank::new(protos.clone()).unwrap();
        let pixels = vec![e(4, 0); 5];
        let c = warm_start_cluster(&refs(&pixels), &bank).unwrap();
        assert!(c.assignment.iter().all(|&a| a == 0));
        assert_eq!(c.means[1], protos[1]);
        assert_eq!(c.means[2], protos[2]);
        assert_eq!(c.counts, vec![5, 0, 0]);
    }

    #[test]
    fn no_background_is_an_error() {
        let bank = PrototypeBank::new(vec![e(2, 0)]).unwrap();
        assert!(matches!(
            warm_start_cluster(&[], &bank),
            Err(Error::NoBackground)
        ));
    }

    #[test]
    fn clustering_matches_nearest_center_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dim = 8;
        let mut pixels = Vec::new();
        for i in 0..3 {
            pixels.extend(lobe(&mut rng, &e(dim, i), 20, 0.1));
        }
        // Warm start deliberately off-center.
        let starts = vec![
            l2_normalize(&[1.0, 0.3, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            l2_normalize(&[0.2, 1.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            l2_normalize(&[0.0, 0.3, 1.0, 0.0, 0.1, 0.0, 0.0, 0.0]).unwrap(),
        ];
        let bank = PrototypeBank::new(starts).unwrap();
        let c = warm_start_cluster(&refs(&pixels), &bank).unwrap();
        // Oracle: exhaustive nearest-center labelling against the converged means.
        for (p, &a) in pixels.iter().zip(&c.assignment) {
            let sims: Vec<f64> = c.means.iter().map(|m| dot(p, m)).collect();
            let best = (0..3).max_by(|&x, &y| sims[x].total_cmp(&sims[y])).unwrap();
            assert_eq!(a, best);
        }
        for (i, chunk) in c.assignment.chunks(20).enumerate() {
            assert!(chunk.iter().all(|&a| a == i));
        }
    }

    #[test]
    fn momentum_extremes() {
        let mut bank = PrototypeBank::new(vec![e(2, 0), e(2, 1)]).unwrap();
        let clustering = Clustering {
            assignment: vec![0, 1],
            means: vec![
                l2_normalize(&[1.0, 1.0]).unwrap(),
                l2_normalize(&[-1.0, 1.0]).unwrap(),
            ],
            counts: vec![1, 1],
            rounds: 1,
            objective: vec![0.0],
        };
        let before = bank.clone();
        momentum_update(&mut bank, &clustering, 1.0);
        assert_eq!(bank.prototypes(), before.prototypes());
        momentum_update(&mut bank, &clustering, 0.0);
        for (p, m) in bank.prototypes().iter().zip(&clustering.means) {
            for (a, b) in p.iter().zip(m) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn momentum_point_nine_nine_nine() {
        let mut bank = PrototypeBank::new(vec![e(2, 0)]).unwrap();
        let clustering = Clustering {
            assignment: vec![0],
            means: vec![e(2, 1)],
            counts: vec![1],
            rounds: 1,
            objective: vec![0.0],
        };
        momentum_update(&mut bank, &clustering, 0.999);
        // normalize([0.999, 0.001])
        let n = (0.999f64 * 0.999 + 0.001 * 0.001).sqrt();
        assert!((bank.prototype(0)[0] - 0.999 / n).abs() < 1e-15);
        assert!((bank.prototype(0)[1] - 0.001 / n).abs() < 1e-15);
    }

    #[test]
    fn momentum_skips_empty_and_consumed() {
        let mut bank = PrototypeBank::new(vec![e(2, 0), e(2, 1)]).unwrap();
        bank.mark_consumed(1);
        let clustering = Clustering {
            assignment: vec![],
            means: vec![e(2, 1), e(2, 0)],
            counts: vec![0, 3],
            rounds: 1,
            objective: vec![],
        };
        momentum_update(&mut bank, &clustering, 0.0);
        assert_eq!(bank.prototype(0), e(2, 0).as_slice());
        assert_eq!(bank.prototype(1), e(2, 1).as_slice());
    }

    #[test]
    fn respawn_restores_active_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dim = 6;
        let mut pixels = Vec::new();
        for i in 0..3 {
            pixels.extend(lobe(&mut rng, &e(dim, i), 15, 0.05));
        }
        let mut bank = PrototypeBank::new((0..3).map(|i| e(dim, i)).collect()).unwrap();
        bank.mark_consumed(1);
        assert_eq!(bank.active_count(), 2);
        respawn_prototype(&mut bank, 1, &refs(&pixels)).unwrap();
        assert_eq!(bank.active_count(), 3);
        assert!(is_unit(bank.prototype(1)));
    }

    #[test]
    fn respawn_finds_new_lobe() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = 8;
        let mut pixels = Vec::new();
        for i in 0..3 {
            pixels.extend(lobe(&mut rng, &e(dim, i), 20, 0.08));
        }
        let fresh = lobe(&mut rng, &e(dim, 5), 20, 0.08);
        pixels.extend(fresh.iter().cloned());
        let mut bank = PrototypeBank::new((0..4).map(|i| e(dim, i)).collect()).unwrap();
        bank.mark_consumed(3);
        respawn_prototype(&mut bank, 3, &refs(&pixels)).unwrap();
        // Oracle: direct mean of the held-out lobe.
        let oracle = l2_normalize(&sum_vectors(dim, fresh.iter().map(Vec::as_slice))).unwrap();
        assert!(dot(bank.prototype(3), &oracle) > 0.95);
    }

    #[test]
    fn respawn_requires_consumed_slot() {
        let mut bank = PrototypeBank::new(vec![e(2, 0)]).unwrap();
        let px = e(2, 1);
        assert!(matches!(
            respawn_prototype(&mut bank, 0, &[&px]),
            Err(Error::NotConsumed(0))
        ));
        bank.mark_consumed(0);
        assert!(matches!(
            respawn_prototype(&mut bank, 0, &[]),
            Err(Error::NoBackground)
        ));
    }

    #[test]
    fn initial_bank_covers_lobes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 10;
        let mut pixels = Vec::new();
        for i in 0..5 {
            pixels.extend(lobe(&mut rng, &e(dim, i), 30, 0.15));
        }
        let bank = initial_bank(&refs(&pixels), 5, Execution::Sequential).unwrap();
        for i in 0..5 {
            let best = bank
                .prototypes()
                .iter()
                .map(|p| dot(p, &e(dim, i)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best > 0.95, "lobe {i} uncovered: {best}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kmeans_objective_non_increasing_and_unit(seed in 0u64..10_000, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 5;
            let pixels: Vec<Vec<f64>> = (0..40)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    l2_normalize(&v).unwrap()
                })
                .collect();
            let bank = PrototypeBank::new(pixels[..k].to_vec()).unwrap();
            let c = warm_start_cluster(&refs(&pixels), &bank).unwrap();
            for w in c.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "{:?}", c.objective);
            }
            let again = warm_start_cluster(&refs(&pixels), &bank).unwrap();
            prop_assert_eq!(&c.assignment, &again.assignment);
            let mut bank = bank;
            momentum_update(&mut bank, &c, 0.7);
            for p in bank.prototypes() {
                prop_assert!(is_unit(p));
            }
        }
    }
}
