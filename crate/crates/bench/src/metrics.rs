//! Append-only per-iteration metrics CSV.
//!
//! Column order is part of the interface:
//! `iter,cases,wall_s,objective,train_error,lambda,gamma,alpha,mu,batch_size`.
//! Every row is flushed as it is written so a killed run leaves a parseable
//! file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::Result;

pub const CSV_HEADER: &str =
    "iter,cases,wall_s,objective,train_error,lambda,gamma,alpha,mu,batch_size";

#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub iter: u64,
    pub cases: u64,
    pub wall_s: f64,
    pub objective: f64,
    pub train_error: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub batch_size: usize,
}

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{}",
            row.iter,
            row.cases,
            row.wall_s,
            row.objective,
            row.train_error,
            row.lambda,
            row.gamma,
            row.alpha,
            row.mu,
            row.batch_size
        )?;
        self.out.flush()?;
        Ok(())
    }
}
