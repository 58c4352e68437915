//! Batching, optimization, early stopping, and checkpoints.

pub mod adam;
pub mod batch;
pub mod checkpoint;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use batch::{pad_and_batch, Batch};
pub use checkpoint::Checkpoint;
pub use train::{
    predict_documents, truth_matrix, Ablation, EarlyStopping, EpochRecord, FitOutcome, TrainConfig, Trainer,
    Validation,
};
