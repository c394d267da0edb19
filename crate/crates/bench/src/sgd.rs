//! The baseline optimizer: SGD with Nesterov-style momentum, an increasing
//! momentum schedule, and learning-rate selection by grid search.

use kfac_core::engine::TrainSet;
use kfac_core::net::{self, Architecture};
use kfac_core::rng::{self, Prng};
use nalgebra::DVector;

use crate::dataset::{self, Problem};
use crate::Result;

/// Momentum coefficient at iteration `k` (1-based):
/// `min(1 - 2^(-1 - log2(floor(k/250) + 1)), mu_max)`.
pub fn nesterov_mu(k: u64, mu_max: f64) -> f64 {
    let x = (k / 250 + 1) as f64;
    (1.0 - 0.5 / x).min(mu_max)
}

/// One Nesterov step: `v <- mu v - lr grad(theta + mu v)`, `theta <- theta + v`.
/// The gradient includes the L2 term `eta (theta + mu v)`.
#[allow(clippy::too_many_arguments)]
pub fn sgd_nesterov_step(
    arch: &Architecture,
    theta: &mut DVector<f64>,
    velocity: &mut DVector<f64>,
    inputs: &nalgebra::DMatrix<f64>,
    targets: &net::Targets,
    learn_rate: f64,
    mu: f64,
    eta: f64,
) -> Result<()> {
    let lookahead = &*theta + &*velocity * mu;
    let mut rec = net::forward(arch, &lookahead, inputs)?;
    let mut grad = net::backward(arch, &lookahead, &mut rec, targets)?;
    if eta != 0.0 {
        grad += &lookahead * eta;
    }
    *velocity *= mu;
    *velocity -= grad * learn_rate;
    *theta += &*velocity;
    Ok(())
}

/// Exponentially decayed iterate average: `avg <- xi avg + (1 - xi) new`.
pub fn polyak_average(avg: &mut DVector<f64>, new_iterate: &DVector<f64>, xi: f64) {
    *avg *= xi;
    *avg += new_iterate * (1.0 - xi);
}

/// Mini-batch SGD-with-Nesterov runner over a fixed-size batch schedule.
pub struct SgdRunner {
    pub theta: DVector<f64>,
    pub velocity: DVector<f64>,
    pub avg_theta: DVector<f64>,
    pub learn_rate: f64,
    pub mu_max: f64,
    pub eta: f64,
    pub batch: usize,
    pub xi: f64,
    k: u64,
    rng: Prng,
}

pub struct SgdReport {
    pub iteration: u64,
    pub batch_size: usize,
    pub objective: f64,
    pub mu: f64,
}

impl SgdRunner {
    pub fn new(
        theta0: DVector<f64>,
        learn_rate: f64,
        mu_max: f64,
        eta: f64,
        batch: usize,
        seed: u64,
    ) -> SgdRunner {
        let n = theta0.len();
        SgdRunner {
            avg_theta: theta0.clone(),
            theta: theta0,
            velocity: DVector::zeros(n),
            learn_rate,
            mu_max,
            eta,
            batch,
            xi: 0.99,
            k: 1,
            rng: rng::seeded(seed),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn step(&mut self, arch: &Architecture, data: &TrainSet) -> Result<SgdReport> {
        let m = self.batch.clamp(1, data.len());
        let idx = rng::sample_indices(&mut self.rng, data.len(), m);
        let (x, y) = data.select(&idx);
        let mu = nesterov_mu(self.k, self.mu_max);
        sgd_nesterov_step(
            arch,
            &mut self.theta,
            &mut self.velocity,
            &x,
            &y,
            self.learn_rate,
            mu,
            self.eta,
        )?;
        polyak_average(&mut self.avg_theta, &self.theta, self.xi);
        let rec = net::forward(arch, &self.theta, &x)?;
        let objective =
            net::loss_value(arch, &rec, &y)? + 0.5 * self.eta * self.theta.norm_squared();
        let report = SgdReport {
            iteration: self.k,
            batch_size: m,
            objective,
            mu,
        };
        self.k += 1;
        Ok(report)
    }
}

/// Learning-rate grid used when a run does not specify one.
pub const LEARNING_RATE_GRID: &[f64] = &[0.1, 0.03, 0.01, 0.003, 0.001];

/// Picks the grid learning rate with the best reported training error after
/// `budget` iterations (20% of the run budget, by convention of the caller).
/// Diverged candidates rank last.
pub fn calibrate_learning_rate(
    problem: &Problem,
    theta0: &DVector<f64>,
    mu_max: f64,
    eta: f64,
    batch: usize,
    budget: u64,
    seed: u64,
) -> Result<f64> {
    let mut best = (
        f64::INFINITY,
        LEARNING_RATE_GRID[LEARNING_RATE_GRID.len() - 1],
    );
    for &lr in LEARNING_RATE_GRID {
        let mut runner = SgdRunner::new(theta0.clone(), lr, mu_max, eta, batch, seed);
        let mut diverged = false;
        for _ in 0..budget {
            if runner.step(&problem.arch, &problem.data).is_err() {
                diverged = true;
                break;
            }
            if !runner.theta.amax().is_finite() {
                diverged = true;
                break;
            }
        }
        if diverged {
            continue;
        }
        let err = dataset::reported_error(problem, &runner.theta, &runner.avg_theta)?;
        if err.is_finite() && err < best.0 {
            best = (err, lr);
        }
    }
    Ok(best.1)
}
