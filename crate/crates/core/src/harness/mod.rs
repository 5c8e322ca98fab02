//! Configuration, checkpoints, pipelines, reports and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, save_checkpoint_with, Checkpointed};
pub use cli::cli_dispatch;
pub use config::ExperimentConfig;
pub use pipeline::CorpusData;
