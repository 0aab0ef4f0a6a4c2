//! Direct, end-to-end and joint training, checkpoints, evaluation and
//! strategy comparison.

mod checkpoint;
mod compare;
mod config;
mod data;
mod evaluate;
mod model;
pub mod synth;
mod train;

pub use checkpoint::{CheckpointMeta, BLOB_FILE, CONFIG_FILE, LOG_FILE, META_FILE};
pub use compare::{check_experiments, compare_strategies, CompareConfig, CompareReport, CompareRow, StrategyMean};
pub use config::{DataPaths, ExperimentConfig, Precision, Strategy, SEED_ENV};
pub use data::{epoch_batches, Batch, Dataset, Sample};
pub use evaluate::{evaluate_model, image_results};
pub use model::Model;
pub use train::{
    detection_gradients, joint_gradients, load_training_data, train, train_direct, train_end_to_end, train_joint,
    Checkpoint, EpochRecord, Phase,
};
