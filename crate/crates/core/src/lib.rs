//! Perturbation-constrained KV-cache selection.
//!
//! Given a head's attention weights and projected value rows, pick which
//! cache entries to keep under a budget so that the change in the attention
//! output stays small. The crate covers the attention primitives, the
//! perturbation bounds, the two-stage selector, an observation-window
//! eviction pipeline, a synthetic head generator, the HeadDump file format
//! and the `kvtriage` CLI.

pub mod cli;
pub mod error;
pub mod eviction;
pub mod io;
pub mod perturbation;
pub mod selection;
pub mod synthetic;
pub mod tensor;
pub mod validation;

pub use error::{Error, Result};
pub use eviction::{
    evict_head, evict_layer, Allocation, Budget, EvictionConfig, HeadSnapshot, LogitScale, Selector,
};
pub use perturbation::{Metric, SelectionMask};
pub use selection::{select_attention_only, select_perturbation_constrained, SelectionConfig, StagedSelection};
pub use tensor::Matrix;
