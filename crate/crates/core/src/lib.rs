//! Patch-based transformer for week-long actigraphy: masked-autoencoder
//! pretraining, binary classification, attention importance maps and a
//! size-graded benchmark harness, all on a small CPU autodiff engine.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod finetune;
pub mod model;
pub mod pretrain;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointKind};
pub use error::{PatError, Result};
