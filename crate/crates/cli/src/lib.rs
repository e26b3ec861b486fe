//! Operator surface for the deraining toolkit: dataset generation, training,
//! evaluation, gradient verification, and visualization. Every command is a
//! pure function of its resolved configuration and seed; each run writes
//! `resolved_config.json` so it can be replayed byte for byte.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod pngio;

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, cmd_visualize, GenSummary, TrainSummary,
};
pub use config::RunConfig;
