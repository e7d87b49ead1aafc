//! Teacher-forced supervised training.

mod checkpoint;
mod fit;
mod loss;
mod optim;

pub use checkpoint::{
    config_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use fit::{batch_gradients, evaluate_loss, fit, log_to_csv, lr_at, write_log_csv, LogRow, TrainConfig, TrainReport};
pub use loss::sequence_loss;
pub use optim::{adam_step, AdamConfig, OptimizerState};
