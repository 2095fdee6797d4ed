//! Library surface of the seqdiff command-line tool: experiment
//! configuration (files and built-in presets) and the pipeline commands.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_oracle, cmd_plot, cmd_prepare, cmd_train_codec,
    cmd_train_score, Layout,
};
pub use config::{preset, preset_names, resolve_config, ExperimentConfig};
