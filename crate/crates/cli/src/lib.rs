//! Command-line harness: dataset generation, training, evaluation, ablations
//! and the verification suites.

pub mod commands;
pub mod config;
pub mod experiments;
