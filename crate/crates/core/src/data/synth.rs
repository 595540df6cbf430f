//! Synthetic stand-in for backbone features.
//!
//! The world has `B` base classes and `L` background lobes. Lobe `j` for
//! `j < num_novel_classes` is the latent home of novel class `B + 1 + j`:
//! during the base step its pixels are labelled background, later it is
//! revealed through a handful of support grids. The remaining lobes are pure
//! background.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{mask_to_step_visibility, FeatureGrid, StepDataset, BACKGROUND};
use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize, norm};

const STREAM_CENTERS: u64 = 0;
const STREAM_BASE: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_NOVEL: u64 = 100;

const MIN_OBJECT: usize = 3;
const MAX_OBJECT: usize = 7;

/// Serializable knobs of a synthetic world; class centers are derived from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub dim: usize,
    pub intra_class_stddev: f64,
    /// Per-region offset from the class center, shared by all pixels of one
    /// object or background band.
    pub instance_stddev: f64,
    pub background_subpopulations: usize,
    pub height: usize,
    pub width: usize,
    pub base_grids: usize,
    pub eval_grids: usize,
    pub shots: usize,
    pub novel_per_step: usize,
    /// Whether support grids may also contain (background-relabelled) base objects.
    pub base_in_shots: bool,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            num_base_classes: 5,
            num_novel_classes: 3,
            dim: 16,
            intra_class_stddev: 0.2,
            instance_stddev: 0.1,
            background_subpopulations: 10,
            height: 16,
            width: 16,
            base_grids: 200,
            eval_grids: 60,
            shots: 1,
            novel_per_step: 1,
            base_in_shots: false,
            seed: 0,
        }
    }
}

impl WorldParams {
    /// Draws class centers and validates the result.
    pub fn build(&self) -> Result<WorldSpec> {
        let n_centers = self.num_base_classes + self.background_subpopulations;
        if self.dim == 0 || n_centers == 0 {
            return Err(Error::InvalidSpec(
                "dim and class counts must be positive".into(),
            ));
        }
        let mut rng = stream(self.seed, STREAM_CENTERS);
        let class_centers = if n_centers <= self.dim {
            random_orthonormal(&mut rng, n_centers, self.dim)
        } else {
            (0..n_centers)
                .map(|_| random_unit(&mut rng, self.dim))
                .collect()
        };
        let spec = WorldSpec {
            params: self.clone(),
            class_centers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A fully specified world: knobs plus one unit center per base class
/// followed by one per background lobe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub params: WorldParams,
    pub class_centers: Vec<Vec<f64>>,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if p.num_base_classes == 0 {
            return bad("need at least one base class");
        }
        if !(p.intra_class_stddev > 0.0) || !p.intra_class_stddev.is_finite() {
            return bad("intra_class_stddev must be positive");
        }
        if !(p.instance_stddev >= 0.0) || !p.instance_stddev.is_finite() {
            return bad("instance_stddev must be non-negative");
        }
        if p.background_subpopulations < p.num_novel_classes {
            return bad("background_subpopulations must cover every novel class");
        }
        if p.background_subpopulations == p.num_novel_classes {
            return bad("need at least one pure background lobe");
        }
        if p.num_novel_classes > 0
            && (p.novel_per_step == 0 || !p.num_novel_classes.is_multiple_of(p.novel_per_step))
        {
            return bad("novel_per_step must divide num_novel_classes");
        }
        if p.num_novel_classes > 0 && p.shots == 0 {
            return bad("shots must be positive");
        }
        if p.height < MAX_OBJECT + 1 || p.width < MAX_OBJECT + 1 {
            return bad("grid too small for objects");
        }
        if p.base_grids == 0 {
            return bad("need at least one base grid");
        }
        if self.class_centers.len() != p.num_base_classes + p.background_subpopulations {
            return bad("one center per base class and background lobe required");
        }
        for (i, c) in self.class_centers.iter().enumerate() {
            if c.len() != p.dim || (norm(c) - 1.0).abs() > 1e-9 {
                return bad("class centers must be unit vectors of the world dimension");
            }
            for other in &self.class_centers[..i] {
                if dot(c, other) > 1.0 - 1e-9 {
                    return bad("class centers must be pairwise distinct");
                }
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        let p = &self.params;
        if p.num_novel_classes == 0 {
            0
        } else {
            p.num_novel_classes / p.novel_per_step
        }
    }

    pub fn base_classes(&self) -> Vec<u32> {
        (1..=self.params.num_base_classes as u32).collect()
    }

    pub fn novel_classes(&self) -> Vec<u32> {
        let b = self.params.num_base_classes as u32;
        (b + 1..=b + self.params.num_novel_classes as u32).collect()
    }

    /// Novel classes introduced at incremental step `t >= 1`.
    pub fn step_classes(&self, t: usize) -> Vec<u32> {
        let per = self.params.novel_per_step;
        self.novel_classes()[(t - 1) * per..t * per].to_vec()
    }

    pub fn num_classes(&self) -> usize {
        1 + self.params.num_base_classes + self.params.num_novel_classes
    }

    /// Ground-truth label emitted by a center: base class, novel class, or background.
    fn center_label(&self, center: usize) -> u32 {
        // Base centers and novel lobes map to `index + 1`.
        if center < self.params.num_base_classes + self.params.num_novel_classes {
            center as u32 + 1
        } else {
            BACKGROUND
        }
    }

    fn base_center(&self, class: u32) -> usize {
        class as usize - 1
    }

    fn novel_center(&self, class: u32) -> usize {
        class as usize - 1
    }

    fn lobe_center(&self, lobe: usize) -> usize {
        self.params.num_base_classes + lobe
    }

    fn pure_lobes(&self) -> Vec<usize> {
        (self.params.num_novel_classes..self.params.background_subpopulations).collect()
    }
}

/// Base step followed by every incremental step. A pure function of the spec.
pub fn generate_world(spec: &WorldSpec) -> Result<Vec<StepDataset>> {
    spec.validate()?;
    let p = &spec.params;
    let base_visible: Vec<u32> = std::iter::once(BACKGROUND)
        .chain(spec.base_classes())
        .collect();
    let all_lobes: Vec<usize> = (0..p.background_subpopulations).collect();
    let base_objects: Vec<usize> = spec
        .base_classes()
        .iter()
        .map(|&c| spec.base_center(c))
        .collect();

    let mut rng = stream(p.seed, STREAM_BASE);
    let base_grids = (0..p.base_grids)
        .map(|_| {
            let n_obj = rng.random_range(1..=2);
            let objects: Vec<usize> = (0..n_obj)
                .map(|_| base_objects[rng.random_range(0..base_objects.len())])
                .collect();
            let g = paint(spec, &mut rng, &all_lobes, &objects);
            mask_to_step_visibility(&g, &base_visible)
        })
        .collect();

    let mut steps = vec![StepDataset {
        step: 0,
        visible_classes: base_visible.clone(),
        new_classes: spec.base_classes(),
        grids: base_grids,
        shots: 0,
    }];

    let pure = spec.pure_lobes();
    let mut visible = base_visible;
    for t in 1..=spec.num_steps() {
        let new = spec.step_classes(t);
        visible.extend(&new);
        visible.sort_unstable();
        let mut keep = vec![BACKGROUND];
        keep.extend(&new);
        let mut grids = Vec::with_capacity(p.shots * new.len());
        for &class in &new {
            // One stream per class keeps k-shot supports a prefix of (k+1)-shot ones.
            let mut rng = stream(p.seed, STREAM_NOVEL + class as u64);
            for _ in 0..p.shots {
                let mut objects = Vec::new();
                if p.base_in_shots && rng.random_bool(0.5) {
                    objects.push(base_objects[rng.random_range(0..base_objects.len())]);
                }
                objects.push(spec.novel_center(class));
                let g = paint(spec, &mut rng, &pure, &objects);
                grids.push(mask_to_step_visibility(&g, &keep));
            }
        }
        steps.push(StepDataset {
            step: t,
            visible_classes: visible.clone(),
            new_classes: new,
            grids,
            shots: p.shots,
        });
    }
    Ok(steps)
}

/// Held-out grids with full ground truth over base and novel classes.
/// Every class appears, cycling through the class list for the first object.
pub fn generate_eval_grids(spec: &WorldSpec) -> Result<Vec<FeatureGrid>> {
    spec.validate()?;
    let p = &spec.params;
    let mut pool: Vec<usize> = spec
        .base_classes()
        .iter()
        .map(|&c| spec.base_center(c))
        .collect();
    pool.extend(spec.novel_classes().iter().map(|&c| spec.novel_center(c)));
    let pure = spec.pure_lobes();
    let mut rng = stream(p.seed, STREAM_EVAL);
    Ok((0..p.eval_grids)
        .map(|i| {
            let mut objects = vec![pool[i % pool.len()]];
            if rng.random_bool(0.5) {
                objects.push(pool[rng.random_range(0..pool.len())]);
            }
            paint(spec, &mut rng, &pure, &objects)
        })
        .collect())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Gram-Schmidt over Gaussian draws; requires `n <= dim`.
fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = random_unit(rng, dim);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        if norm(&v) > 1e-3 {
            basis.push(l2_normalize(&v).expect("checked norm"));
        }
    }
    basis
}

/// Paints background bands from `lobes`, then rectangular objects in order,
/// and samples one feature per pixel from its source center.
fn paint(
    spec: &WorldSpec,
    rng: &mut ChaCha8Rng,
    lobes: &[usize],
    objects: &[usize],
) -> FeatureGrid {
    let p = &spec.params;
    let (h, w) = (p.height, p.width);
    let n_bands = rng.random_range(1..=lobes.len().min(3));
    let chosen: Vec<usize> = sample(rng, lobes.len(), n_bands)
        .into_iter()
        .map(|i| lobes[i])
        .collect();
    // Each region is (center, offset); `source` maps pixels to regions.
    let mut regions: Vec<(usize, Vec<f64>)> = Vec::new();
    let offset = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..p.dim)
            .map(|_| p.instance_stddev * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    for &lobe in &chosen {
        let o = offset(rng);
        regions.push((spec.lobe_center(lobe), o));
    }
    let mut source = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            source[r * w + c] = c * n_bands / w;
        }
    }
    for &center in objects {
        let oh = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
        let ow = rng.random_range(MIN_OBJECT..=MAX_OBJECT);
        let top = rng.random_range(0..=h - oh);
        let left = rng.random_range(0..=w - ow);
        let o = offset(rng);
        regions.push((center, o));
        for r in top..top + oh {
            for c in left..left + ow {
                source[r * w + c] = regions.len() - 1;
            }
        }
    }
    let sigma = p.intra_class_stddev;
    let mut features = Vec::with_capacity(h * w * p.dim);
    for &s in &source {
        let (center, o) = &regions[s];
        for (&mu, &d) in spec.class_centers[*center].iter().zip(o) {
            let z: f64 = rng.sample(StandardNormal);
            features.push(mu + d + sigma * z);
        }
    }
    let labels = source
        .iter()
        .map(|&s| spec.center_label(regions[s].0))
        .collect();
    FeatureGrid::new(h, w, p.dim, features, labels).expect("painted grid has consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_feature_grids;

    fn small(seed: u64) -> WorldParams {
        WorldParams {
            num_base_classes: 3,
            num_novel_classes: 2,
            background_subpopulations: 4,
            base_grids: 12,
            eval_grids: 6,
            seed,
            ..WorldParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(7).build().unwrap();
        let a = generate_world(&spec).unwrap();
        let b = generate_world(&small(7).build().unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(
                encode_feature_grids(&x.grids),
                encode_feature_grids(&y.grids)
            );
        }
        assert_eq!(a, b);
        let c = generate_world(&small(8).build().unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn instance_offset_is_shared_within_an_object() {
        let mut p = small(4);
        p.intra_class_stddev = 1e-300;
        p.instance_stddev = 0.3;
        let spec = p.build().unwrap();
        let steps = generate_world(&spec).unwrap();
        let mut offsets = 0;
        for g in steps.iter().flat_map(|s| &s.grids) {
            let labels = g.labels();
            let regions: std::collections::BTreeSet<Vec<u64>> = g
                .pixel_features()
                .map(|f| f.iter().map(|x| x.to_bits()).collect())
                .collect();
            assert!(regions.len() <= 3 + 4, "{} distinct pixel values", regions.len());
            for (px, &l) in g.pixel_features().zip(labels) {
                if l != BACKGROUND && l <= p.num_base_classes as u32 {
                    let c = &spec.class_centers[spec.base_center(l)];
                    if px != c.as_slice() {
                        offsets += 1;
                    }
                }
            }
        }
        assert!(offsets > 0);
    }

    #[test]
    fn vanishing_noise_reproduces_centers() {
        let mut p = small(3);
        p.intra_class_stddev = 1e-300;
        p.instance_stddev = 0.0;
        let spec = p.build().unwrap();
        let steps = generate_world(&spec).unwrap();
        for step in &steps[1..] {
            for g in &step.grids {
                for (px, &l) in g.pixel_features().zip(g.labels()) {
                    if l != BACKGROUND {
                        assert_eq!(px, spec.class_centers[spec.novel_center(l)].as_slice());
                    }
                }
            }
        }
        for g in &steps[0].grids {
            for (px, &l) in g.pixel_features().zip(g.labels()) {
                if l != BACKGROUND {
                    assert_eq!(px, spec.class_centers[spec.base_center(l)].as_slice());
                }
            }
        }
    }

    #[test]
    fn voc_like_schedule_shape() {
        let p = WorldParams {
            num_base_classes: 15,
            num_novel_classes: 5,
            background_subpopulations: 6,
            dim: 32,
            novel_per_step: 1,
            base_grids: 20,
            ..WorldParams::default()
        };
        let steps = generate_world(&p.build().unwrap()).unwrap();
        assert_eq!(steps.len(), 6);
        assert_eq!(steps[0].visible_classes.len(), 16);
        for (t, s) in steps.iter().enumerate().skip(1) {
            assert_eq!(s.new_classes, vec![15 + t as u32]);
            assert_eq!(s.grids.len(), 1);
            assert_eq!(s.visible_classes.len(), 16 + t);
        }
    }

    #[test]
    fn few_shot_steps_hide_base_classes() {
        let mut p = small(11);
        p.base_in_shots = true;
        p.shots = 5;
        let spec = p.build().unwrap();
        let steps = generate_world(&spec).unwrap();
        for s in &steps[1..] {
            assert_eq!(s.grids.len(), s.shots * s.new_classes.len());
            for g in &s.grids {
                assert!(g
                    .labels()
                    .iter()
                    .all(|l| *l == 0 || s.new_classes.contains(l)));
                assert!(s.new_classes.iter().any(|c| g.contains_label(*c)));
            }
        }
        for g in &steps[0].grids {
            assert!(g.labels().iter().all(|&l| l as usize <= p.num_base_classes));
        }
    }

    #[test]
    fn every_grid_has_background() {
        let spec = small(5).build().unwrap();
        let steps = generate_world(&spec).unwrap();
        let eval = generate_eval_grids(&spec).unwrap();
        for g in steps.iter().flat_map(|s| &s.grids).chain(&eval) {
            assert!(g.labels().contains(&BACKGROUND));
        }
    }

    #[test]
    fn shot_sets_are_nested() {
        let mut p = small(2);
        let one = generate_world(&p.build().unwrap()).unwrap();
        p.shots = 5;
        let five = generate_world(&p.build().unwrap()).unwrap();
        assert_eq!(one[0], five[0]);
        assert_eq!(one[1].grids[0], five[1].grids[0]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut p = small(1);
        p.background_subpopulations = 1;
        assert!(matches!(p.build(), Err(Error::InvalidSpec(_))));
        let mut p = small(1);
        p.intra_class_stddev = 0.0;
        assert!(p.build().is_err());
        let mut p = small(1);
        p.novel_per_step = 3;
        assert!(p.build().is_err());
        let mut spec = small(1).build().unwrap();
        spec.class_centers[1] = spec.class_centers[0].clone();
        assert!(generate_world(&spec).is_err());
    }
}
