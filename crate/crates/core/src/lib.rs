//! Knowledge editing for tiny transformer language models.
//!
//! The pipeline captures hidden states and output gradients at each editable
//! MLP matrix, refines them with a shared low-rank hypernetwork, turns them
//! into per-token residuals, orthogonalizes the residuals across adjacent
//! layers, and solves a ridge problem per layer for the weight update.

pub mod checkpoint;
pub mod edit_math;
pub mod error;
pub mod eval;
pub mod hypernet;
pub mod model;
pub mod par;
pub mod pipeline;

pub use error::{EditError, Result};
pub use model::{init_model, Instance, Model, ModelConfig};
