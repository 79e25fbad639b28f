//! Metric-learning speaker diarization toolkit.
//!
//! The pipeline: precomputed per-segment feature matrices are embedded onto
//! the unit sphere by a small trainable model, the embedding space is shaped
//! with triplet or quadruplet losses under configurable negative-sampling
//! strategies and margin schedules, and conversations are diarized by
//! estimating the speaker count with x-means and clustering with k-means.
//! Scoring uses the diarization error rate with collar trimming, overlap
//! exclusion, and optimal speaker mapping.
//!
//! Modules:
//! - [`features`]: feature matrices, the FMAT codec, corpus manifests
//! - [`embedder`]: mean-pool MLP and single-head attention embedders with
//!   analytic gradients
//! - [`losses`]: triplet/quadruplet hinges, fixed and adaptive margins
//! - [`sampling`]: PK batches and random / semi-hard / distance-weighted
//!   negative mining
//! - [`trainer`]: the training loop and the configuration-grid runner
//! - [`clustering`]: k-means++, BIC, x-means
//! - [`der`]: scoring regions, optimal mapping, DER, RTTM
//! - [`synth`]: seeded synthetic corpora
//! - [`pipeline`]: embed -> cluster -> score glue

pub mod clustering;
pub mod der;
pub mod embedder;
pub mod error;
pub mod features;
pub mod losses;
pub mod mat;
pub mod pipeline;
pub mod sampling;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
