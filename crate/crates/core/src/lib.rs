//! Event-centric question answering with contrastive event alignment.
//!
//! The crate bundles a small reverse-mode autograd engine, a transformer
//! encoder-decoder, the invertible event transform, training objectives,
//! dataset handling and evaluation metrics.

pub mod autograd;
pub mod checks;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod text;
pub mod transform;

pub use data::{QAInstance, RelationType, Span};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Setting, Tagging};
