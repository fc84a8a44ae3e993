//! Training, checkpointing, configuration, inference and report emission.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{section_of, Checkpoint, TensorEntry, FORMAT_VERSION};
pub use config::{DataSource, TrainConfig};
pub use train::{
    emit_report, grad_norm, load_model, theta_to_array, LossBreakdown, Model, Trainer,
};
