//! Drives one configured run end to end: problem setup, optimizer loop,
//! incremental metrics, checkpointing, and the exit summary.

use kfac_core::engine::{ApproxMode, KfacOptimizer, OptimizerConfig};
use kfac_core::net;
use nalgebra::DVector;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{OptimizerKind, RunConfig};
use crate::dataset::{self, Problem};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::sgd::{self, SgdRunner};
use crate::{checkpoint, BenchError, Result};

/// Default sparse-initialization fan-in and weight scale.
pub const INIT_FAN_IN: usize = 15;
pub const INIT_SCALE: f64 = 1.0;
const SGD_MU_MAX: f64 = 0.99;

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub problem: String,
    pub optimizer: OptimizerKind,
    pub iterations: u64,
    pub final_train_error: f64,
    pub final_objective: f64,
    pub checkpoint: String,
    /// Grid-calibrated learning rate (SGD runs only; the calibration stands
    /// in for an externally tuned rate).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sgd_learn_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    pub config: serde_json::Value,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub summary: RunSummary,
    pub summary_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn elapsed_exceeded(start: Instant, max_seconds: f64) -> bool {
    max_seconds > 0.0 && start.elapsed().as_secs_f64() >= max_seconds
}

fn kfac_config(cfg: &RunConfig, mode: ApproxMode) -> OptimizerConfig {
    let mut oc = OptimizerConfig::new(mode);
    oc.momentum = cfg.momentum;
    oc.eta = cfg.eta;
    oc.lambda0 = cfg.lambda0;
    oc.set_periods(cfg.t1, cfg.t2, cfg.t3);
    oc.tau1 = cfg.tau1;
    oc.tau2 = cfg.tau2;
    oc.schedule = cfg.schedule;
    oc.seed = cfg.seed.wrapping_add(1);
    oc
}

fn write_summary(out_dir: &Path, summary: &RunSummary) -> Result<PathBuf> {
    let path = out_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(summary)?)?;
    Ok(path)
}

impl From<serde_json::Error> for BenchError {
    fn from(e: serde_json::Error) -> Self {
        BenchError::Config(format!("summary serialization: {e}"))
    }
}

/// Runs the configured experiment, streaming metrics to
/// `<out>/metrics.csv` and finishing with `<out>/checkpoint.txt` and
/// `<out>/summary.json`. A numerical abort still writes the last good
/// checkpoint and summary, and surfaces as [`BenchError::NumericalAbort`].
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let problem = dataset::load_problem(&cfg.problem)?;
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let theta0 = net::init_sparse(&problem.arch, cfg.seed, INIT_FAN_IN, INIT_SCALE)?;
    let start = Instant::now();

    let mut cases: u64 = 0;
    let mut aborted: Option<String> = None;
    let mut sgd_learn_rate = None;
    let mut iterations = 0u64;
    let (theta_final, error_final): (DVector<f64>, f64);

    match cfg.optimizer {
        OptimizerKind::KfacBlockDiag | OptimizerKind::KfacBlockTridiag => {
            let mode = if cfg.optimizer == OptimizerKind::KfacBlockDiag {
                ApproxMode::BlockDiag
            } else {
                ApproxMode::BlockTridiag
            };
            let mut opt = KfacOptimizer::new(problem.arch.clone(), kfac_config(cfg, mode), theta0)?;
            let mut last_good = opt.theta().clone();
            while iterations < cfg.max_iters && !elapsed_exceeded(start, cfg.max_seconds) {
                last_good.copy_from(opt.theta());
                match opt.step(&problem.data) {
                    Ok(rep) => {
                        iterations += 1;
                        cases += rep.batch_size as u64;
                        let err =
                            dataset::reported_error(&problem, opt.theta(), opt.averaged_theta())?;
                        metrics.append(&MetricsRow {
                            iter: rep.iteration,
                            cases,
                            wall_s: start.elapsed().as_secs_f64(),
                            objective: rep.h,
                            train_error: err,
                            lambda: rep.lambda,
                            gamma: rep.gamma,
                            alpha: rep.alpha,
                            mu: rep.mu,
                            batch_size: rep.batch_size,
                        })?;
                    }
                    Err(e) => {
                        aborted = Some(e.to_string());
                        break;
                    }
                }
            }
            let theta = if aborted.is_some() {
                last_good
            } else {
                opt.theta().clone()
            };
            error_final = dataset::reported_error(&problem, &theta, opt.averaged_theta())?;
            theta_final = theta;
        }
        OptimizerKind::Sgd => {
            let m1 = kfac_core::engine::batch_size(cfg.schedule, 1, problem.data.len());
            let budget = (cfg.max_iters / 5).max(1);
            let lr = sgd::calibrate_learning_rate(
                &problem,
                &theta0,
                if cfg.momentum { SGD_MU_MAX } else { 0.0 },
                cfg.eta,
                m1,
                budget,
                cfg.seed.wrapping_add(2),
            )?;
            sgd_learn_rate = Some(lr);
            let mut runner = SgdRunner::new(
                theta0,
                lr,
                if cfg.momentum { SGD_MU_MAX } else { 0.0 },
                cfg.eta,
                m1,
                cfg.seed.wrapping_add(2),
            );
            let mut last_good = runner.theta.clone();
            while iterations < cfg.max_iters && !elapsed_exceeded(start, cfg.max_seconds) {
                last_good.copy_from(&runner.theta);
                match runner.step(&problem.arch, &problem.data) {
                    Ok(rep) => {
                        if !runner.theta.amax().is_finite() {
                            aborted = Some(format!(
                                "non-finite parameters at iteration {}",
                                rep.iteration
                            ));
                            break;
                        }
                        iterations += 1;
                        cases += rep.batch_size as u64;
                        let err =
                            dataset::reported_error(&problem, &runner.theta, &runner.avg_theta)?;
                        metrics.append(&MetricsRow {
                            iter: rep.iteration,
                            cases,
                            wall_s: start.elapsed().as_secs_f64(),
                            objective: rep.objective,
                            train_error: err,
                            lambda: 0.0,
                            gamma: 0.0,
                            alpha: lr,
                            mu: rep.mu,
                            batch_size: rep.batch_size,
                        })?;
                    }
                    Err(e) => {
                        aborted = Some(e.to_string());
                        break;
                    }
                }
            }
            let theta = if aborted.is_some() {
                last_good
            } else {
                runner.theta.clone()
            };
            error_final = dataset::reported_error(&problem, &theta, &runner.avg_theta)?;
            theta_final = theta;
        }
    }

    let checkpoint_name = if aborted.is_some() {
        "checkpoint_lastgood.txt"
    } else {
        "checkpoint.txt"
    };
    let checkpoint_path = out_dir.join(checkpoint_name);
    checkpoint::write(&checkpoint_path, &problem.name, &problem.arch, &theta_final)?;
    let final_objective = dataset::objective(&problem, &theta_final, cfg.eta)?;

    let summary = RunSummary {
        problem: problem.name.clone(),
        optimizer: cfg.optimizer,
        iterations,
        final_train_error: error_final,
        final_objective,
        checkpoint: checkpoint_path.display().to_string(),
        sgd_learn_rate,
        aborted: aborted.clone(),
        config: serde_json::to_value(cfg.echo())?,
    };
    let summary_path = write_summary(out_dir, &summary)?;

    if let Some(msg) = aborted {
        return Err(BenchError::NumericalAbort(format!(
            "{msg}; last good checkpoint at {}",
            checkpoint_path.display()
        )));
    }
    Ok(ExperimentOutcome {
        summary,
        summary_path,
        checkpoint_path,
    })
}

/// Resolves the problem a checkpoint was trained on and checks architecture
/// consistency.
pub fn problem_for_checkpoint(ck: &checkpoint::Checkpoint) -> Result<Problem> {
    let problem = dataset::load_problem(&ck.problem)?;
    if problem.arch != ck.arch {
        return Err(BenchError::Checkpoint(format!(
            "checkpoint architecture does not match problem {:?}",
            ck.problem
        )));
    }
    Ok(problem)
}
