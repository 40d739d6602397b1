//! Multimodal forgery detection with identity references: synthetic corpora,
//! tape-based autodiff, encoders, progressive fusion, contrastive and
//! classification objectives, training, evaluation and a CLI.

pub mod autograd;
pub mod cli;
pub mod container;
pub mod data_model;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reference;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
