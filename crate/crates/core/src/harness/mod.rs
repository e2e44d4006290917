//! Training, checkpoints, evaluation, visualization and export — the
//! pieces the command-line tool is built from.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;
pub mod visualize;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate, evaluate_model, random_map_baseline, EvalMode};
pub use model::{Batch, Model};
pub use train::{train, train_with, EpochLog, TrainOptions, TrainOutcome, Trainer};
pub use visualize::{export_embeddings, visualize};
