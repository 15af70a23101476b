//! Training and evaluation orchestration behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod dump;
pub mod eval;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{build_config, RunConfig, SolverSpec};
pub use eval::{evaluate, EvalReport, RunSummary};
pub use train::{train, TrainResult};
