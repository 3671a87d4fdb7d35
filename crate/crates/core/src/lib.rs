//! Long-tailed multi-task question answering.
//!
//! The crate covers the whole training system: Zipf-curated task manifests,
//! an instance-level meta-prompt pool, retrieve-then-rerank knowledge mining
//! over hints produced by a pluggable language-model oracle, and two-stage
//! distillation with performance-gated mutual KD.

pub mod autodiff;
pub mod config;
pub mod distill;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod miner;
pub mod oracle;
pub mod params;
pub mod prompt_pool;
pub mod qa_model;
pub mod report;
pub mod synthetic;
pub mod task_registry;
pub mod text;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
