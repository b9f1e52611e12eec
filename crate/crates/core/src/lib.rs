//! Contextual late-fusion workbench.
//!
//! Two convolutional feature streams, one tuned on object appearance and one
//! on scene context, are fused by a linear head whose weight rows are split
//! into a foreground and a background block. The crate provides the autodiff
//! core, the models, a synthetic object-on-context dataset generator, blur and
//! FGSM attacks, the α-regularized fusion objective, adversarial retraining,
//! and the analysis tools (PCA shift, weight statistics, robustness curves).

pub mod analysis;
pub mod cli;
pub mod attacks;
pub mod error;
pub mod data;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
