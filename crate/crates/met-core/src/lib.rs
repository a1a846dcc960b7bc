//! Multiple-exit adapter tuning for a vision-transformer backbone.
//!
//! The crate provides the full pipeline at desk scale: a reverse-mode
//! differentiation engine (`tape`), the frozen ViT backbone (`vit`),
//! exit-specific adapters with partially shared projections (`multi_exit`),
//! similarity-graph regularization (`graph`), joint training (`train`), and
//! an early-exit inference engine with exact compute accounting (`infer`).
//! Dataset, checkpoint, and metrics file formats live in `data`,
//! `checkpoint`, and `metrics`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod infer;
pub mod metrics;
pub mod multi_exit;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{MetError, Result};
pub use tape::{Tape, TensorId};
pub use tensor::{cosine_sim, Parameter, Tensor};
