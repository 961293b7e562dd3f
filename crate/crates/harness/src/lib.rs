//! Experiment driver for the analog MoE simulator: synthetic workloads,
//! noise sweeps, ablations, the plan oracle and the `romer-sim` CLI.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod generate;
pub mod oracle;
pub mod pipeline;
pub mod selftest;
pub mod toylm;
pub mod trial;

pub use cli::cli_main;
