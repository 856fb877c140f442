//! Losses, analytic gradients, optimization and checkpoints.

mod adam;
mod checkpoint;
mod config;
mod gradcheck;
mod losses;
mod objective;
mod params;
mod resample;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, MAGIC as CHECKPOINT_MAGIC,
};
pub use config::{GradMode, TrainConfig};
pub use gradcheck::{finite_difference_check, relative_error, Discrepancy, GradCheck, FD_STEP, FD_TOLERANCE};
pub use losses::{dice_loss, focal_loss_binary, focal_loss_map, PROB_EPS};
pub use objective::{loss_dasl, loss_oasl, LossOutput, LossTerms, TrainingSample};
pub use params::{AdapterGrads, AdapterParams, TENSOR_NAMES};
pub use resample::{upsample, Upsampler};
pub use trainer::{train, train_with_report, TrainReport, Trainer, DASL_TENSORS, OASL_TENSORS};
