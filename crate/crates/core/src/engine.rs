//! The optimizer: structured-inverse update proposals, exact-Fisher
//! rescaling, momentum, and the damping/refresh schedules.
//!
//! Each iteration draws a mini-batch, refreshes the decayed factor estimates
//! on a random subset, proposes `Delta = -(approx F + damping)^-1 grad`
//! through the cached structured inverse, and then rescales the proposal
//! (optionally together with the previous update, which gives a momentum
//! term) by minimizing the damped quadratic model built on the *exact*
//! Fisher of a second subset. The Tikhonov strength `lambda` follows a
//! Levenberg-Marquardt rule on the reduction ratio every `T1` iterations;
//! the factor-damping strength `gamma` is re-picked greedily from three
//! candidates every `T2` iterations; the inverse cache is refreshed every
//! `T3` iterations (and on the first three).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::fisher::{self, QuadScalars};
use crate::kron::{blockdiag_apply, tridiag_apply, BlockDiagCache, TridiagCache};
use crate::math;
use crate::net::{self, Architecture, PassRecord, Targets};
use crate::rng::{self, Prng};
use crate::stats::{batch_moments, FactorMode, FactorSet};

/// Which structured inverse approximation drives the update proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproxMode {
    BlockDiag,
    BlockTridiag,
}

impl ApproxMode {
    pub fn factor_mode(self) -> FactorMode {
        match self {
            ApproxMode::BlockDiag => FactorMode::Diagonal,
            ApproxMode::BlockTridiag => FactorMode::Tridiagonal,
        }
    }
}

/// Mini-batch size schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSchedule {
    /// The whole training set every iteration.
    Full,
    /// Fixed size (clamped to the dataset).
    Fixed(usize),
    /// `m_k = min(m1 * exp((k-1)/b), n)` with `b` chosen so the schedule
    /// reaches the full set at iteration `full_at`.
    ExpToFull { m1: usize, full_at: u64 },
}

/// Mini-batch size at iteration `k` (1-based) for a dataset of `n` cases.
pub fn batch_size(schedule: BatchSchedule, k: u64, n: usize) -> usize {
    match schedule {
        BatchSchedule::Full => n,
        BatchSchedule::Fixed(m) => m.clamp(1, n),
        BatchSchedule::ExpToFull { m1, full_at } => {
            let m1 = m1.clamp(1, n);
            if m1 >= n || full_at <= 1 {
                return n;
            }
            let b = (full_at - 1) as f64 / math::ln(n as f64 / m1 as f64);
            let m = math::round(m1 as f64 * math::exp((k - 1) as f64 / b));
            (m as usize).clamp(1, n)
        }
    }
}

/// Levenberg-Marquardt adjustment of `lambda` from the reduction ratio.
pub fn adapt_lambda(lambda: f64, rho: f64, omega1: f64) -> f64 {
    let next = if rho > 0.75 {
        lambda * omega1
    } else if rho < 0.25 {
        lambda / omega1
    } else {
        lambda
    };
    next.clamp(LAMBDA_MIN, LAMBDA_MAX)
}

pub const LAMBDA_MIN: f64 = 1e-8;
pub const LAMBDA_MAX: f64 = 1e8;
const GAMMA_MIN: f64 = 1e-8;
const GAMMA_MAX: f64 = 1e8;
/// Cap on the magnitude of the rescaling coefficient.
pub const ALPHA_CLAMP: f64 = 1e4;

/// Damping-strength candidates for this iteration: `{gamma0}` off-schedule,
/// `{gamma0, omega2 gamma0, gamma0/omega2}` every `T2` iterations. The
/// current value comes first so that ties keep it.
pub fn gamma_candidates(gamma0: f64, k: u64, t2: u64, omega2: f64) -> Vec<f64> {
    if t2 == 0 || !k.is_multiple_of(t2) {
        return alloc::vec![gamma0];
    }
    alloc::vec![
        gamma0,
        (omega2 * gamma0).clamp(GAMMA_MIN, GAMMA_MAX),
        (gamma0 / omega2).clamp(GAMMA_MIN, GAMMA_MAX),
    ]
}

/// Hyper-parameters of the optimizer. Defaults follow the reference setup:
/// `lambda0 = 150`, `eta = 1e-5`, `T1 = 5`, `T2 = T3 = 20`,
/// `omega1 = (19/20)^T1`, `omega2 = (sqrt(19/20))^T2`, `tau1 = 1/8`,
/// `tau2 = 1/4`, iterate-averaging `xi = 0.99`.
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub mode: ApproxMode,
    pub momentum: bool,
    /// L2 regularization coefficient (adds `eta/2 ||theta||^2` to the
    /// objective and `eta theta` to gradients).
    pub eta: f64,
    pub lambda0: f64,
    /// `lambda` adaptation period.
    pub t1: u64,
    /// `gamma` adjustment period; must be a multiple of `t3`.
    pub t2: u64,
    /// Inverse-cache refresh period.
    pub t3: u64,
    pub omega1: f64,
    pub omega2: f64,
    /// Fraction of the mini-batch used for factor estimation.
    pub tau1: f64,
    /// Fraction of the mini-batch used for exact-Fisher scalars.
    pub tau2: f64,
    pub schedule: BatchSchedule,
    /// Decay of the averaged iterate.
    pub xi: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn new(mode: ApproxMode) -> OptimizerConfig {
        let mut cfg = OptimizerConfig {
            mode,
            momentum: true,
            eta: 1e-5,
            lambda0: 150.0,
            t1: 5,
            t2: 20,
            t3: 20,
            omega1: 0.0,
            omega2: 0.0,
            tau1: 0.125,
            tau2: 0.25,
            schedule: BatchSchedule::Full,
            xi: 0.99,
            seed: 0,
        };
        cfg.set_periods(5, 20, 20);
        cfg
    }

    /// Sets the three periods and recomputes the decay constants
    /// `omega1 = (19/20)^t1` and `omega2 = (sqrt(19/20))^t2`.
    pub fn set_periods(&mut self, t1: u64, t2: u64, t3: u64) {
        self.t1 = t1;
        self.t2 = t2;
        self.t3 = t3;
        self.omega1 = libm::pow(0.95, t1 as f64);
        self.omega2 = libm::pow(0.95, t2 as f64 / 2.0);
    }

    pub fn validate(&self) -> Result<()> {
        if self.t1 == 0 || self.t2 == 0 || self.t3 == 0 {
            return Err(CoreError::InvalidArchitecture(String::from(
                "periods must be positive",
            )));
        }
        if !self.t2.is_multiple_of(self.t3) {
            return Err(CoreError::InvalidArchitecture(format!(
                "T2 = {} must be a multiple of T3 = {}",
                self.t2, self.t3
            )));
        }
        if !(self.omega1 > 0.0 && self.omega1 < 1.0 && self.omega2 > 0.0 && self.omega2 < 1.0) {
            return Err(CoreError::InvalidArchitecture(String::from(
                "decay constants must lie in (0, 1)",
            )));
        }
        if !(self.tau1 > 0.0 && self.tau1 <= 1.0 && self.tau2 > 0.0 && self.tau2 <= 1.0) {
            return Err(CoreError::InvalidArchitecture(String::from(
                "subset fractions must lie in (0, 1]",
            )));
        }
        if self.lambda0 <= 0.0 || self.lambda0.is_nan() || self.eta < 0.0 {
            return Err(CoreError::InvalidArchitecture(String::from(
                "lambda0 must be positive and eta non-negative",
            )));
        }
        if !(self.xi >= 0.0 && self.xi < 1.0) {
            return Err(CoreError::InvalidArchitecture(String::from(
                "averaging decay must lie in [0, 1)",
            )));
        }
        Ok(())
    }
}

/// A training set held in memory: one input column per case.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub inputs: DMatrix<f64>,
    pub targets: Targets,
}

impl TrainSet {
    pub fn new(inputs: DMatrix<f64>, targets: Targets) -> Result<TrainSet> {
        if targets.batch_size() != inputs.ncols() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} targets for {} cases",
                targets.batch_size(),
                inputs.ncols()
            )));
        }
        Ok(TrainSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> (DMatrix<f64>, Targets) {
        (
            self.inputs.select_columns(idx.iter()),
            self.targets.select_cases(idx),
        )
    }
}

/// The structured inverse, refreshed every `T3` iterations.
#[derive(Debug, Clone)]
pub enum InverseCache {
    BlockDiag(BlockDiagCache),
    Tridiag(TridiagCache),
}

impl InverseCache {
    pub fn build(mode: ApproxMode, factors: &FactorSet, gamma: f64) -> Result<InverseCache> {
        match mode {
            ApproxMode::BlockDiag => Ok(InverseCache::BlockDiag(BlockDiagCache::build(
                factors, gamma,
            )?)),
            ApproxMode::BlockTridiag => {
                Ok(InverseCache::Tridiag(TridiagCache::build(factors, gamma)?))
            }
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            InverseCache::BlockDiag(c) => c.gamma,
            InverseCache::Tridiag(c) => c.gamma,
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            InverseCache::BlockDiag(c) => blockdiag_apply(c, v),
            InverseCache::Tridiag(c) => tridiag_apply(c, v),
        }
    }
}

/// Optimal 1-d rescaling of a proposal: `alpha = -grad.v / v^T(F+dI)v`.
/// Returns `(alpha, model_change)` where `model_change = M(alpha v) - h`.
pub fn rescale_alpha(qs: &QuadScalars) -> (f64, f64) {
    let denom = qs.damped_vv();
    if denom <= 0.0 {
        // Only possible for a zero direction (F is PSD and the damping
        // positive); take no step.
        return (0.0, 0.0);
    }
    let alpha = -qs.grad_dot_v / denom;
    (alpha, 0.5 * alpha * qs.grad_dot_v)
}

/// Solution of the 2x2 momentum system.
#[derive(Debug, Clone, Copy)]
pub struct MomentumSolution {
    pub alpha: f64,
    pub mu: f64,
    /// `M(alpha v + mu u) - h`
    pub model_change: f64,
    /// True when the system was singular and the plain rescale was used.
    pub fell_back: bool,
}

/// Minimizes the damped quadratic model over `alpha v + mu u`, falling back
/// to the 1-d rescale when the 2x2 system is singular (zero or collinear
/// directions).
pub fn solve_alpha_mu(qs: &QuadScalars) -> MomentumSolution {
    let a11 = qs.damped_vv();
    let a12 = qs.damped_uv();
    let a22 = qs.damped_uu();
    let fallback = |qs: &QuadScalars| {
        let (alpha, change) = rescale_alpha(qs);
        MomentumSolution {
            alpha,
            mu: 0.0,
            model_change: change,
            fell_back: true,
        }
    };
    if a11 <= 0.0 {
        return fallback(qs);
    }
    // Schur pivot of the symmetric 2x2 system.
    let schur = a22 - a12 * a12 / a11;
    if schur.is_nan() || schur <= 1e-12 * a22.max(a11) {
        return fallback(qs);
    }
    let b1 = qs.grad_dot_v;
    let b2 = qs.grad_dot_u;
    let mu = -(b2 - a12 * b1 / a11) / schur;
    let alpha = -(b1 + a12 * mu) / a11;
    // At the joint optimum M - h = 1/2 b^T z with z = (alpha, mu).
    let model_change = 0.5 * (b1 * alpha + b2 * mu);
    MomentumSolution {
        alpha,
        mu,
        model_change,
        fell_back: false,
    }
}

/// Outcome of rescaling (and optionally momentum-combining) a proposal.
#[derive(Debug, Clone)]
pub struct Update {
    pub delta: DVector<f64>,
    pub alpha: f64,
    pub mu: f64,
    /// Absolute model value `M(delta)`.
    pub m_delta: f64,
    pub alpha_clamped: bool,
}

fn clamp_alpha(alpha: f64) -> (f64, bool) {
    if alpha.abs() > ALPHA_CLAMP {
        (alpha.signum() * ALPHA_CLAMP, true)
    } else {
        (alpha, false)
    }
}

fn model_value(qs: &QuadScalars, alpha: f64, mu: f64, h_theta: f64) -> f64 {
    0.5 * (alpha * alpha * qs.damped_vv()
        + 2.0 * alpha * mu * qs.damped_uv()
        + mu * mu * qs.damped_uu())
        + alpha * qs.grad_dot_v
        + mu * qs.grad_dot_u
        + h_theta
}

/// Rescales a proposal by the optimal `alpha` under the exact-Fisher damped
/// quadratic model evaluated on `record`'s batch.
pub fn rescale(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    proposal: &DVector<f64>,
    grad: &DVector<f64>,
    lambda_eta: f64,
    h_theta: f64,
) -> Result<Update> {
    let qs = fisher::quad_scalars_single(arch, theta, record, proposal, grad, lambda_eta)?;
    let (alpha_raw, _) = rescale_alpha(&qs);
    let (alpha, alpha_clamped) = clamp_alpha(alpha_raw);
    Ok(Update {
        delta: proposal * alpha,
        alpha,
        mu: 0.0,
        m_delta: model_value(&qs, alpha, 0.0, h_theta),
        alpha_clamped,
    })
}

/// Chooses `alpha, mu` minimizing the model over `alpha Delta + mu delta0`.
/// Falls back to [`rescale`] behavior when the system is singular.
#[allow(clippy::too_many_arguments)]
pub fn momentum_solve(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    proposal: &DVector<f64>,
    delta_prev: &DVector<f64>,
    grad: &DVector<f64>,
    lambda_eta: f64,
    h_theta: f64,
) -> Result<Update> {
    let qs = fisher::quad_scalars(arch, theta, record, proposal, delta_prev, grad, lambda_eta)?;
    let sol = solve_alpha_mu(&qs);
    let (alpha, alpha_clamped) = clamp_alpha(sol.alpha);
    let mu = if sol.fell_back { 0.0 } else { sol.mu };
    Ok(Update {
        delta: proposal * alpha + delta_prev * mu,
        alpha,
        mu,
        m_delta: model_value(&qs, alpha, mu, h_theta),
        alpha_clamped,
    })
}

/// Per-iteration record emitted by [`KfacOptimizer::step`].
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub iteration: u64,
    pub batch_size: usize,
    /// Mini-batch objective at the pre-step parameters.
    pub h: f64,
    /// Model value of the accepted update.
    pub m_delta: f64,
    pub alpha: f64,
    pub mu: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Reduction ratio, on iterations where `lambda` was adapted.
    pub rho: Option<f64>,
    pub alpha_clamped: bool,
    pub delta_norm: f64,
}

/// K-FAC optimizer state bound to one architecture and parameter vector.
#[derive(Debug, Clone)]
pub struct KfacOptimizer {
    arch: Architecture,
    config: OptimizerConfig,
    theta: DVector<f64>,
    avg_theta: DVector<f64>,
    factors: FactorSet,
    cache: Option<InverseCache>,
    delta_prev: DVector<f64>,
    k: u64,
    lambda: f64,
    gamma: f64,
    prev_batch: Option<usize>,
    rng: Prng,
}

impl KfacOptimizer {
    pub fn new(arch: Architecture, config: OptimizerConfig, theta0: DVector<f64>) -> Result<Self> {
        config.validate()?;
        if theta0.len() != arch.param_len() {
            return Err(CoreError::ShapeMismatch(format!(
                "initial parameters have {} entries, expected {}",
                theta0.len(),
                arch.param_len()
            )));
        }
        let factors = FactorSet::zeros(&arch, config.mode.factor_mode());
        let lambda = config.lambda0;
        let gamma = math::sqrt(lambda + config.eta);
        let n = theta0.len();
        Ok(KfacOptimizer {
            arch,
            rng: rng::seeded(config.seed),
            config,
            avg_theta: theta0.clone(),
            theta: theta0,
            factors,
            cache: None,
            delta_prev: DVector::zeros(n),
            k: 1,
            lambda,
            gamma,
            prev_batch: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Exponentially decayed average of the iterates.
    pub fn averaged_theta(&self) -> &DVector<f64> {
        &self.avg_theta
    }

    pub fn factors(&self) -> &FactorSet {
        &self.factors
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// 1-based index of the next iteration.
    pub fn iteration(&self) -> u64 {
        self.k
    }

    /// Mini-batch objective including the L2 term.
    pub fn objective(&self, record: &PassRecord, targets: &Targets) -> Result<f64> {
        self.regularized_objective(&self.theta, record, targets)
    }

    fn regularized_objective(
        &self,
        theta: &DVector<f64>,
        record: &PassRecord,
        targets: &Targets,
    ) -> Result<f64> {
        let loss = net::loss_value(&self.arch, record, targets)?;
        Ok(loss + 0.5 * self.config.eta * theta.norm_squared())
    }

    fn build_cache(&self, gamma: f64) -> Result<InverseCache> {
        InverseCache::build(self.config.mode, &self.factors, gamma)
    }

    /// `Delta = -(approx F + damping)^-1 grad` through the current cache.
    /// Errors when the cache is missing or was built for a different `gamma`.
    pub fn propose(&self, grad: &DVector<f64>) -> Result<DVector<f64>> {
        let cache = self.cache.as_ref().ok_or(CoreError::StaleCache)?;
        if cache.gamma() != self.gamma {
            return Err(CoreError::StaleCache);
        }
        Ok(-cache.apply(grad)?)
    }

    /// Runs one iteration on `data`, returning the per-step report.
    pub fn step(&mut self, data: &TrainSet) -> Result<StepReport> {
        if data.is_empty() {
            return Err(CoreError::ShapeMismatch(String::from("empty dataset")));
        }
        let k = self.k;
        let cfg = self.config.clone();
        let m = batch_size(cfg.schedule, k, data.len());

        // A large jump in batch size invalidates the stored direction's
        // quadratic bookkeeping.
        if let Some(prev) = self.prev_batch {
            if m > 4 * prev || 4 * m < prev {
                self.delta_prev.fill(0.0);
            }
        }

        let idx = rng::sample_indices(&mut self.rng, data.len(), m);
        let (x, y) = data.select(&idx);
        let mut record = net::forward(&self.arch, &self.theta, &x)?;
        let h_theta = self.regularized_objective(&self.theta, &record, &y)?;
        if !h_theta.is_finite() {
            return Err(CoreError::NonFinite {
                what: String::from("objective"),
                iteration: k,
            });
        }
        let mut grad = net::backward(&self.arch, &self.theta, &mut record, &y)?;
        if cfg.eta != 0.0 {
            grad += &self.theta * cfg.eta;
        }
        if !grad.amax().is_finite() {
            return Err(CoreError::NonFinite {
                what: String::from("gradient"),
                iteration: k,
            });
        }

        // Factor update on the tau1 subset with sampled targets. The batch
        // index order is already random, so a prefix is a uniform subset.
        let n1 = ((cfg.tau1 * m as f64).round() as usize).clamp(1, m);
        let sub1: Vec<usize> = (0..n1).collect();
        let mut rec1 = record.select_cases(&sub1);
        let y_model = net::sample_targets(&self.arch, &rec1, &mut self.rng);
        net::backward(&self.arch, &self.theta, &mut rec1, &y_model)?;
        let increment = batch_moments(&self.arch, &rec1, cfg.mode.factor_mode())?;
        self.factors.update_running(&increment, k)?;

        // Subset for the exact-Fisher scalars.
        let n2 = ((cfg.tau2 * m as f64).round() as usize).clamp(1, m);
        let rec2 = if n2 == m {
            record.clone()
        } else {
            let sub2: Vec<usize> = (0..n2).collect();
            record.select_cases(&sub2)
        };

        let scheduled_refresh = k <= 3 || k.is_multiple_of(cfg.t3);
        let candidates = gamma_candidates(self.gamma, k, cfg.t2, cfg.omega2);
        let lambda_eta = self.lambda + cfg.eta;
        let use_momentum = cfg.momentum && self.delta_prev.amax() > 0.0;

        let mut best: Option<(Update, f64, Option<InverseCache>)> = None;
        let mut first_err: Option<CoreError> = None;
        for &gamma_c in &candidates {
            let fresh =
                if scheduled_refresh || self.cache.as_ref().map(|c| c.gamma()) != Some(gamma_c) {
                    match self.build_cache(gamma_c) {
                        Ok(c) => Some(c),
                        Err(e) => {
                            // Skip a candidate whose damping is too weak to keep
                            // the factors invertible.
                            if first_err.is_none() {
                                first_err = Some(e);
                            }
                            continue;
                        }
                    }
                } else {
                    None
                };
            let cache_ref = fresh.as_ref().or(self.cache.as_ref()).unwrap();
            let proposal = -cache_ref.apply(&grad)?;
            let update = if use_momentum {
                momentum_solve(
                    &self.arch,
                    &self.theta,
                    &rec2,
                    &proposal,
                    &self.delta_prev,
                    &grad,
                    lambda_eta,
                    h_theta,
                )?
            } else {
                rescale(
                    &self.arch,
                    &self.theta,
                    &rec2,
                    &proposal,
                    &grad,
                    lambda_eta,
                    h_theta,
                )?
            };
            let better = match &best {
                None => true,
                Some((b, _, _)) => update.m_delta < b.m_delta,
            };
            if better {
                best = Some((update, gamma_c, fresh));
            }
        }
        let (update, gamma_new, fresh_cache) = best.ok_or_else(|| {
            first_err.unwrap_or(CoreError::Singular {
                what: String::from("inverse cache"),
                layer: None,
            })
        })?;
        if let Some(c) = fresh_cache {
            self.cache = Some(c);
        }
        self.gamma = gamma_new;

        if !update.delta.amax().is_finite() || !update.m_delta.is_finite() {
            return Err(CoreError::NonFinite {
                what: String::from("update"),
                iteration: k,
            });
        }

        // Levenberg-Marquardt adaptation from the reduction ratio.
        let mut rho_report = None;
        if k.is_multiple_of(cfg.t1) {
            let theta_new = &self.theta + &update.delta;
            let rec_new = net::forward(&self.arch, &theta_new, &x)?;
            let h_new = self.regularized_objective(&theta_new, &rec_new, &y)?;
            if let Some(rho) = fisher::reduction_ratio(h_new, h_theta, update.m_delta) {
                self.lambda = adapt_lambda(self.lambda, rho, cfg.omega1);
                rho_report = Some(rho);
            }
        }

        self.theta += &update.delta;
        if !self.theta.amax().is_finite() {
            return Err(CoreError::NonFinite {
                what: String::from("parameters"),
                iteration: k,
            });
        }
        self.avg_theta *= cfg.xi;
        self.avg_theta += &self.theta * (1.0 - cfg.xi);
        let delta_norm = update.delta.norm();
        self.delta_prev = update.delta;
        self.prev_batch = Some(m);
        self.k += 1;

        Ok(StepReport {
            iteration: k,
            batch_size: m,
            h: h_theta,
            m_delta: update.m_delta,
            alpha: update.alpha,
            mu: update.mu,
            lambda: self.lambda,
            gamma: self.gamma,
            rho: rho_report,
            alpha_clamped: update.alpha_clamped,
            delta_norm,
        })
    }
}

/// Cost of a proposal evaluation, in scalar multiplications.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProposeCost {
    pub mults: u64,
}

/// Block-diagonal proposal computed from the low-rank structure of the
/// mini-batch gradient: `U_i = -(1/m) (G^-1 Gm_i)(Am_{i-1}^T Abar^-1)`, where
/// `Gm`/`Am` hold per-case columns. Equivalent to applying the cache to the
/// assembled gradient, but never multiplies two square layer-sized matrices,
/// so it is cheaper whenever `m` is below the layer dimensions. Requires the
/// gradient to carry no L2 term (that contribution is not low-rank).
pub fn lowrank_propose(
    cache: &InverseCache,
    abars: &[DMatrix<f64>],
    gs: &[DMatrix<f64>],
) -> Result<DVector<f64>> {
    lowrank_propose_counted(cache, abars, gs).map(|(v, _)| v)
}

/// [`lowrank_propose`] with its multiplication count, for cost assertions.
pub fn lowrank_propose_counted(
    cache: &InverseCache,
    abars: &[DMatrix<f64>],
    gs: &[DMatrix<f64>],
) -> Result<(DVector<f64>, ProposeCost)> {
    let bd = match cache {
        InverseCache::BlockDiag(c) => c,
        InverseCache::Tridiag(_) => {
            return Err(CoreError::UnsupportedMode(String::from(
                "the low-rank proposal exists only for the block-diagonal inverse",
            )))
        }
    };
    if abars.len() != bd.a_inv.len() || gs.len() != bd.g_inv.len() {
        return Err(CoreError::ShapeMismatch(String::from(
            "per-layer matrices do not match the cache",
        )));
    }
    let mut mults = 0u64;
    let mut blocks = Vec::with_capacity(abars.len());
    for ((abar, g), (a_inv, g_inv)) in abars.iter().zip(gs).zip(bd.a_inv.iter().zip(&bd.g_inv)) {
        let m = abar.ncols();
        if g.ncols() != m {
            return Err(CoreError::ShapeMismatch(String::from(
                "activity and gradient batches disagree",
            )));
        }
        let d = g_inv.nrows();
        let db = a_inv.nrows();
        // X = G^-1 Gm (d x m), Y = Abar^-1 Am (db x m), U = -(1/m) X Y^T
        let x = g_inv * g;
        let y = a_inv * abar;
        let u = &x * y.transpose() * (-1.0 / m as f64);
        mults += (d * d * m + db * db * m + d * m * db) as u64;
        blocks.push(u);
    }
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for b in &blocks {
        out.as_mut_slice()[off..off + b.len()].copy_from_slice(b.as_slice());
        off += b.len();
    }
    Ok((out, ProposeCost { mults }))
}

/// Multiplication count of the direct route (assemble the gradient, then two
/// square multiplications per layer) for the same shapes.
pub fn direct_propose_cost(abars: &[DMatrix<f64>], gs: &[DMatrix<f64>]) -> ProposeCost {
    let mut mults = 0u64;
    for (abar, g) in abars.iter().zip(gs) {
        let m = abar.ncols();
        let d = g.nrows();
        let db = abar.nrows();
        mults += (d * m * db + d * d * db + d * db * db) as u64;
    }
    ProposeCost { mults }
}
