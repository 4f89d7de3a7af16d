//! Retrieval-augmented transformer for click-through-rate prediction.
//!
//! The pipeline has four stages:
//!
//! 1. [`data`] ingests categorical CSV logs, sorts them chronologically and
//!    builds per-field vocabularies from the training slice.
//! 2. [`retrieval`] indexes a reference pool and returns, for every target
//!    record, the top-K most similar records under a field-match BM25 score,
//!    restricted to strictly earlier records during training.
//! 3. [`model`] stacks the target and its neighbors into a
//!    `(K+1) x (F+1) x D` token grid and runs transformer blocks that attend
//!    along the field axis (within a sample) and along the sample axis
//!    (across samples), in one of several block layouts.
//! 4. [`training`] fits the model with Adam on logloss and reports AUC and
//!    logloss, including the per-variant ablation table.
//!
//! [`tensor`] is the small reverse-mode autodiff engine everything above runs on.

mod binio;
pub mod data;
mod error;
pub mod model;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
