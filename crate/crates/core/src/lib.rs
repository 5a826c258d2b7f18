//! Collaborative filtering with bias-aware angular-margin contrastive
//! training.
//!
//! The crate covers the full pipeline: interaction logs and splits
//! ([`dataset`]), MF / LightGCN encoders ([`encoders`]), the popularity bias
//! extractor ([`bias_extractor`]), training objectives with analytic gradients
//! ([`losses`]), Adam-based training with early stopping ([`trainer`]),
//! all-ranking evaluation ([`evaluator`]), geometric diagnostics
//! ([`diagnostics`]) and a long-tail synthetic data generator ([`synth`]).

pub mod bias_extractor;
pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod linalg;
pub mod losses;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
