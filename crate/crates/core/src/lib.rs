//! Modality-gap quantification and mixture-guided adaptive training for
//! two-modality late-fusion classifiers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gap;
pub mod loss;
pub mod mixture;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
