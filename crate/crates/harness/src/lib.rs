//! Experiment harness: configs, datasets, checkpoints, the method
//! comparison pipeline and its reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;
