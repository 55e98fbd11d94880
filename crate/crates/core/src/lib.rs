//! Missing-modality robust multimodal learning over precomputed text and
//! frame embeddings: a small autodiff kernel, the model and its contrastive
//! semantic matching objective, training, evaluation and a CLI.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numkernel;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
