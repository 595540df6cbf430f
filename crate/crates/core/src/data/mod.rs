//! Feature grids, step datasets and their sources: a synthetic world
//! generator and a binary feature-file format.

mod file;
mod synth;

pub(crate) use file::ByteReader;
pub use file::{
    decode_feature_grids, encode_feature_grids, load_feature_file, save_feature_file,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{generate_eval_grids, generate_world, WorldParams, WorldSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class id reserved for background.
pub const BACKGROUND: u32 = 0;

/// An `height x width` grid of `dim`-dimensional pixel embeddings with a
/// label per pixel. Features are stored row-major, pixel after pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let pixels = height * width;
        if labels.len() != pixels {
            return Err(Error::DimMismatch {
                expected: pixels,
                found: labels.len(),
            });
        }
        if features.len() != pixels * dim {
            return Err(Error::DimMismatch {
                expected: pixels * dim,
                found: features.len(),
            });
        }
        Ok(Self {
            height,
            width,
            dim,
            features,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn feature(&self, pixel: usize) -> &[f64] {
        &self.features[pixel * self.dim..(pixel + 1) * self.dim]
    }

    pub fn pixel_features(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim.max(1))
    }

    /// Same labels, new features (e.g. after an embedding map).
    pub fn with_features(&self, dim: usize, features: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, dim, features, self.labels.clone())
    }

    pub fn contains_label(&self, class: u32) -> bool {
        self.labels.contains(&class)
    }
}

/// Relabels every class outside `visible` as background. Features are untouched.
pub fn mask_to_step_visibility(grid: &FeatureGrid, visible: &[u32]) -> FeatureGrid {
    let mut out = grid.clone();
    for l in &mut out.labels {
        if !visible.contains(l) {
            *l = BACKGROUND;
        }
    }
    out
}

/// Training data of one learning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDataset {
    pub step: usize,
    /// Every class known after this step, background included, sorted.
    pub visible_classes: Vec<u32>,
    /// Classes introduced by this step.
    pub new_classes: Vec<u32>,
    pub grids: Vec<FeatureGrid>,
    /// Support images per new class; 0 for the full base dataset.
    pub shots: usize,
}

impl StepDataset {
    pub fn dim(&self) -> Option<usize> {
        self.grids.first().map(FeatureGrid::dim)
    }
}
