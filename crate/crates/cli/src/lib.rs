//! Run-configuration handling and subcommands of the `ticket` binary.

pub mod commands;
pub mod config;
pub mod data;

pub use commands::{
    cmd_ablate, cmd_analyze, cmd_cluster, cmd_export_masks, cmd_imp, cmd_synth, cmd_train, AnalyzeOptions,
    ImpOptions, Observable,
};
pub use config::RunConfig;
