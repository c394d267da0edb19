//! Experiment harness for the K-FAC optimizer: built-in desk-scale problems,
//! an SGD-with-Nesterov-momentum baseline, metrics/diagnostics emission, and
//! the configuration and checkpoint file formats the `bench` CLI speaks.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diag;
pub mod experiment;
pub mod metrics;
pub mod sgd;

use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] kfac_core::CoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("numerical abort: {0}")]
    NumericalAbort(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;
