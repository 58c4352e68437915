//! Multitask label-attention network with a recalibrated aggregation module
//! for automated medical code prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tensors with reverse-mode differentiation.
//! * [`text`]: preprocessing, vocabulary, embeddings, label spaces, synthetic corpora.
//! * [`model`]: BiGRU encoder, recalibrated aggregation module, label attention heads.
//! * [`objectives`]: focal loss, binary cross-entropy and the joint multitask loss.
//! * [`trainer`]: batching, Adam, early stopping, checkpoints.
//! * [`metrics`] and [`analysis`]: evaluation and diagnostics.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{MarnError, Result};
pub use tensor::{Real, Tensor};
