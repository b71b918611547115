//! Dataset formatting, batching and the staged training loop.

mod batching;
mod format;
mod stage;
pub mod synthetic;

pub use batching::{apply_context_drop, cluster_batches, cluster_by_length, dummy_sequence, BatchError, PackedBatch};
pub use format::*;
pub use stage::{dataset_loss, run_progressive, run_stage, StageResult, StepMetrics, TrainError, TrainHyper};
