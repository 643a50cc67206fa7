//! Global-local consistency: image partitioning, batch assembly, count
//! losses, the optimizer and the training loop.

mod adam;
mod batch;
mod loss;
mod partition;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use batch::{assemble_batch, TrainingBatch};
pub use loss::{glc_loss, gt_sum_loss, regression_loss, total_loss, LocalLoss, LossBundle};
pub use partition::{partition_image, reassemble, resize_bilinear, PartitionGrid};
pub use train::{train, train_with_state, EpochRecord, History, TrainConfig, TrainOutcome};
