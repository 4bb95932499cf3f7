//! Latent world model for lithium-ion state-of-health (SOH) prognosis.
//!
//! Per-cycle voltage/current/temperature series are encoded by a shared 1-D
//! CNN, a window of cycle embeddings is summarised by a patch transformer into
//! a latent degradation state, and a residual transition rolls that state
//! forward to produce an SOH trajectory through one shared decoder head.
//!
//! Module map:
//! - [`data`]: ingestion, SOH normalisation, aging stages, windows, splits, sampling weights
//! - [`synth`]: synthetic LFP-like fleet generator obeying the resistance power law
//! - [`net`]: cycle encoder, patch encoder, dynamics, heads, LSTM baseline, checkpoints
//! - [`loss`]: data, monotonicity, resistance and voltage consistency terms, EWC
//! - [`train`]: joint and batch-staged training loops
//! - [`eval`]: per-stage/per-horizon metrics, latent PCA, report files
//! - [`cli`]: the `sohwm` command line

// Negated comparisons double as NaN rejection in input validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod net;
pub mod parallel;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Parallelism;
