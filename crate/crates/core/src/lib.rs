//! Grid-mobility trajectory modeling on a 500x500 cell grid.
//!
//! The pipeline: ingest (or synthesize) per-user mobility pings, linearize
//! 8-day trajectory windows into token sequences, train a small decoder-only
//! transformer on next-token prediction, then generate future days under
//! signature- and candidate-constrained decoding and score the predictions
//! with DTW and GEO-BLEU.
//!
//! Crate layout mirrors the pipeline stages:
//!
//! - [`data`] — ping records, user histories, CSV ingestion, splits, and
//!   exploratory statistics.
//! - [`vocab`] / [`linearize`] — the 1021-token vocabulary and the
//!   trajectory <-> token mappings.
//! - [`tensor`] — a minimal dense-tensor reverse-mode autodiff substrate.
//! - [`model`] — the transformer, AdamW, LR schedule, and checkpoints.
//! - [`train`] — window construction and the training / fine-tuning loops.
//! - [`generate`] — constrained autoregressive decoding.
//! - [`metrics`] — DTW and GEO-BLEU scoring plus generation-parameter sweeps.
//! - [`synth`] — a deterministic synthetic mobility generator.
//!
//! With the default `parallel` feature, per-user work and the hot tensor
//! kernels run on rayon; without it everything falls back to equivalent
//! sequential code paths. Both paths produce bit-identical results.

pub mod data;
pub mod generate;
pub mod linearize;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

/// Grid cells per axis.
pub const GRID_SIZE: u32 = 500;
/// Half-hour slots per day.
pub const SLOTS_PER_DAY: u32 = 48;
/// Days covered by a dataset.
pub const DATASET_DAYS: u32 = 75;
/// Days in one linearized training window (7 context + 1 target).
pub const WINDOW_DAYS: u32 = 8;
/// Default boundary between observed history and the prediction period.
pub const DEFAULT_HORIZON_DAY: u32 = 60;
