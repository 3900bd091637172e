//! Actionness-regularized video summarization.
//!
//! Per-frame features are segmented into shots with kernel temporal
//! segmentation, encoded by a bidirectional GRU and scored by three heads: a
//! DPP diversity feature, a per-frame quality and an actionness classifier.
//! Training minimizes the DPP negative log-likelihood of the annotated
//! keyframes plus a weighted actionness cross-entropy. Summaries are built by
//! a 0/1 knapsack over shot-averaged quality scores.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod labels;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod segmentation;
pub mod summary;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
