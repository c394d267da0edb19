//! Line-oriented `key = value` run configuration.
//!
//! Recognized keys: `problem`, `optimizer` (`kfac_bd` | `kfac_btd` | `sgd`),
//! `momentum` (`on` | `off`), `eta`, `lambda0`, `T1`, `T2`, `T3`, `tau1`,
//! `tau2`, `batch_schedule` (`full` | `fixed:M` | `exp:M1:to_full_at:K`),
//! `max_iters`, `max_seconds`, `seed`. Lines starting with `#` and blank
//! lines are skipped. `problem` is required; everything else has defaults.

use kfac_core::engine::BatchSchedule;
use serde::Serialize;

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerKind {
    #[serde(rename = "kfac_bd")]
    KfacBlockDiag,
    #[serde(rename = "kfac_btd")]
    KfacBlockTridiag,
    #[serde(rename = "sgd")]
    Sgd,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: String,
    pub optimizer: OptimizerKind,
    pub momentum: bool,
    pub eta: f64,
    pub lambda0: f64,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub tau1: f64,
    pub tau2: f64,
    pub schedule: BatchSchedule,
    pub max_iters: u64,
    /// 0 disables the wall-clock budget.
    pub max_seconds: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: String::new(),
            optimizer: OptimizerKind::KfacBlockTridiag,
            momentum: true,
            eta: 1e-5,
            lambda0: 150.0,
            t1: 5,
            t2: 20,
            t3: 20,
            tau1: 0.125,
            tau2: 0.25,
            schedule: BatchSchedule::Full,
            max_iters: 100,
            max_seconds: 0.0,
            seed: 0,
        }
    }
}

fn parse_schedule(value: &str) -> Result<BatchSchedule> {
    if value == "full" {
        return Ok(BatchSchedule::Full);
    }
    if let Some(m) = value.strip_prefix("fixed:") {
        let m: usize = m
            .parse()
            .map_err(|e| BenchError::Config(format!("bad fixed batch size: {e}")))?;
        if m == 0 {
            return Err(BenchError::Config("fixed batch size must be >= 1".into()));
        }
        return Ok(BatchSchedule::Fixed(m));
    }
    if let Some(rest) = value.strip_prefix("exp:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() == 3 && parts[1] == "to_full_at" {
            let m1: usize = parts[0]
                .parse()
                .map_err(|e| BenchError::Config(format!("bad exp batch size: {e}")))?;
            let full_at: u64 = parts[2]
                .parse()
                .map_err(|e| BenchError::Config(format!("bad to_full_at: {e}")))?;
            if m1 == 0 || full_at == 0 {
                return Err(BenchError::Config(
                    "exp schedule needs positive values".into(),
                ));
            }
            return Ok(BatchSchedule::ExpToFull { m1, full_at });
        }
    }
    Err(BenchError::Config(format!(
        "bad batch_schedule {value:?} (want full, fixed:M, or exp:M1:to_full_at:K)"
    )))
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut saw_problem = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            BenchError::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str, e: &dyn std::fmt::Display| {
            BenchError::Config(format!("line {}: bad {what}: {e}", lineno + 1))
        };
        match key {
            "problem" => {
                cfg.problem = value.to_string();
                saw_problem = true;
            }
            "optimizer" => {
                cfg.optimizer = match value {
                    "kfac_bd" => OptimizerKind::KfacBlockDiag,
                    "kfac_btd" => OptimizerKind::KfacBlockTridiag,
                    "sgd" => OptimizerKind::Sgd,
                    other => {
                        return Err(BenchError::Config(format!(
                            "line {}: unknown optimizer {other:?}",
                            lineno + 1
                        )))
                    }
                };
            }
            "momentum" => {
                cfg.momentum = match value {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(BenchError::Config(format!(
                            "line {}: momentum must be on/off, got {other:?}",
                            lineno + 1
                        )))
                    }
                };
            }
            "eta" => cfg.eta = value.parse().map_err(|e| bad("eta", &e))?,
            "lambda0" => cfg.lambda0 = value.parse().map_err(|e| bad("lambda0", &e))?,
            "T1" => cfg.t1 = value.parse().map_err(|e| bad("T1", &e))?,
            "T2" => cfg.t2 = value.parse().map_err(|e| bad("T2", &e))?,
            "T3" => cfg.t3 = value.parse().map_err(|e| bad("T3", &e))?,
            "tau1" => cfg.tau1 = value.parse().map_err(|e| bad("tau1", &e))?,
            "tau2" => cfg.tau2 = value.parse().map_err(|e| bad("tau2", &e))?,
            "batch_schedule" => cfg.schedule = parse_schedule(value)?,
            "max_iters" => cfg.max_iters = value.parse().map_err(|e| bad("max_iters", &e))?,
            "max_seconds" => cfg.max_seconds = value.parse().map_err(|e| bad("max_seconds", &e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad("seed", &e))?,
            other => {
                return Err(BenchError::Config(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    if !saw_problem {
        return Err(BenchError::Config("missing required key: problem".into()));
    }
    Ok(cfg)
}

/// The config echoed into the run summary.
#[derive(Debug, Serialize)]
pub struct ConfigEcho<'a> {
    pub problem: &'a str,
    pub optimizer: OptimizerKind,
    pub momentum: bool,
    pub eta: f64,
    pub lambda0: f64,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
    pub tau1: f64,
    pub tau2: f64,
    pub batch_schedule: String,
    pub max_iters: u64,
    pub max_seconds: f64,
    pub seed: u64,
}

pub fn schedule_string(s: BatchSchedule) -> String {
    match s {
        BatchSchedule::Full => "full".to_string(),
        BatchSchedule::Fixed(m) => format!("fixed:{m}"),
        BatchSchedule::ExpToFull { m1, full_at } => format!("exp:{m1}:to_full_at:{full_at}"),
    }
}

impl RunConfig {
    pub fn echo(&self) -> ConfigEcho<'_> {
        ConfigEcho {
            problem: &self.problem,
            optimizer: self.optimizer,
            momentum: self.momentum,
            eta: self.eta,
            lambda0: self.lambda0,
            t1: self.t1,
            t2: self.t2,
            t3: self.t3,
            tau1: self.tau1,
            tau2: self.tau2,
            batch_schedule: schedule_string(self.schedule),
            max_iters: self.max_iters,
            max_seconds: self.max_seconds,
            seed: self.seed,
        }
    }
}
