//! Retrieval-evaluation and metric-learning kernel engine for person
//! re-identification embeddings.
//!
//! The crate operates on pre-extracted embedding sets: it computes pairwise
//! distance matrices, evaluates retrieval quality (CMC, mAP, mINP),
//! refines rankings with k-reciprocal re-ranking, and provides exact
//! forward/gradient implementations of the loss, pooling and attention
//! kernels used by the AGW baseline family, all checkable against central
//! finite differences.

pub mod distances;
pub mod embedio;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod report;
pub mod rerank;
pub mod sampler;
pub mod schedule;
pub mod synth;

pub use error::{Error, Result};
