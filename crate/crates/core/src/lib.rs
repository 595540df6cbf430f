//! Incremental few-shot segmentation on pixel embeddings, with background
//! sub-class prototypes that novel classes inherit.
//!
//! The crate works on precomputed or synthetic per-pixel features:
//!
//! * [`data`] generates and stores feature grids.
//! * [`prototype`] maintains the background prototype bank.
//! * [`losses`] holds the training objectives with analytic gradients.
//! * [`matching`] assigns prototypes to novel classes.
//! * [`imprint`] builds novel class heads.
//! * [`engine`] runs base and incremental training.
//! * [`metrics`] scores segmentations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
pub mod error;
pub mod imprint;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod numeric;
pub mod par;
pub mod prototype;

pub use error::{Error, Result};
pub use par::Execution;
