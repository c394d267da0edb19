//! Estimation of the Kronecker factor second moments.
//!
//! The structured Fisher approximation is built from `Abar_{i,j} = E[abar_i abar_j^T]`
//! and `G_{i,j} = E[g_i g_j^T]`, needed for `j = i` (block-diagonal mode) and
//! additionally `j = i+1` (block-tridiagonal mode). The `g_i` must come from a
//! backward pass against targets sampled from the network's own predictive
//! distribution — using training targets would estimate a different matrix
//! (the "empirical Fisher") that lacks the Gauss-Newton equivalence.
//!
//! In the stochastic setting the moments are maintained as exponentially
//! decayed running averages with `eps = min(1 - 1/k, 0.95)`, which is
//! self-initializing at `k = 1`.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::net::{Architecture, PassRecord};

/// Which factor pairs are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMode {
    /// Only `Abar_{i,i}` and `G_{i,i}`.
    Diagonal,
    /// Additionally `Abar_{i,i+1}` and `G_{i,i+1}`.
    Tridiagonal,
}

/// Second-moment estimates of the per-layer activities and pre-activation
/// gradients.
///
/// Index convention (0-based `j`): `a_diag[j] = Abar_{j,j}` of size
/// `(d_j+1)^2` for `j = 0..ell-1`; `g_diag[j] = G_{j+1,j+1}` of size
/// `d_{j+1}^2`. In tridiagonal mode, `a_off[j] = Abar_{j,j+1}` and
/// `g_off[j] = G_{j+1,j+2}` for `j = 0..ell-2`.
#[derive(Debug, Clone)]
pub struct FactorSet {
    pub a_diag: Vec<DMatrix<f64>>,
    pub g_diag: Vec<DMatrix<f64>>,
    pub a_off: Vec<DMatrix<f64>>,
    pub g_off: Vec<DMatrix<f64>>,
    mode: FactorMode,
    /// Iteration of the last running update (0 = never updated).
    pub last_update: u64,
}

impl FactorSet {
    pub fn mode(&self) -> FactorMode {
        self.mode
    }

    pub fn ell(&self) -> usize {
        self.a_diag.len()
    }

    /// Zero-initialized factors with the shapes fixed by `arch`.
    pub fn zeros(arch: &Architecture, mode: FactorMode) -> FactorSet {
        let ell = arch.ell();
        let dims = arch.dims();
        let a_diag = (0..ell)
            .map(|j| DMatrix::zeros(dims[j] + 1, dims[j] + 1))
            .collect();
        let g_diag = (0..ell)
            .map(|j| DMatrix::zeros(dims[j + 1], dims[j + 1]))
            .collect();
        let (a_off, g_off) = match mode {
            FactorMode::Diagonal => (Vec::new(), Vec::new()),
            FactorMode::Tridiagonal => (
                (0..ell.saturating_sub(1))
                    .map(|j| DMatrix::zeros(dims[j] + 1, dims[j + 1] + 1))
                    .collect(),
                (0..ell.saturating_sub(1))
                    .map(|j| DMatrix::zeros(dims[j + 1], dims[j + 2]))
                    .collect(),
            ),
        };
        FactorSet {
            a_diag,
            g_diag,
            a_off,
            g_off,
            mode,
            last_update: 0,
        }
    }

    fn check_compatible(&self, other: &FactorSet) -> Result<()> {
        let same = self.mode == other.mode
            && self.a_diag.len() == other.a_diag.len()
            && self
                .a_diag
                .iter()
                .zip(&other.a_diag)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .g_diag
                .iter()
                .zip(&other.g_diag)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(CoreError::ShapeMismatch(format!(
                "factor sets disagree (mode {:?} vs {:?})",
                self.mode, other.mode
            )));
        }
        Ok(())
    }

    /// Decayed running update: `self <- eps * self + (1 - eps) * new` with
    /// `eps = min(1 - 1/k, 0.95)`. At `k = 1` this overwrites with `new`.
    pub fn update_running(&mut self, new: &FactorSet, k: u64) -> Result<()> {
        if k < 1 {
            return Err(CoreError::ShapeMismatch(alloc::string::String::from(
                "iteration counter must be >= 1",
            )));
        }
        self.check_compatible(new)?;
        let eps = decay_epsilon(k);
        let blend = |dst: &mut Vec<DMatrix<f64>>, src: &[DMatrix<f64>]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d *= eps;
                *d += s * (1.0 - eps);
            }
        };
        blend(&mut self.a_diag, &new.a_diag);
        blend(&mut self.g_diag, &new.g_diag);
        blend(&mut self.a_off, &new.a_off);
        blend(&mut self.g_off, &new.g_off);
        self.last_update = k;
        Ok(())
    }
}

/// The decay weight `eps = min(1 - 1/k, 0.95)`.
pub fn decay_epsilon(k: u64) -> f64 {
    (1.0 - 1.0 / k as f64).min(0.95)
}

/// Batch-mean outer products from a pass record whose `g_i` were computed
/// against sampled targets. Errors if no backward pass has filled the
/// gradients.
pub fn batch_moments(
    arch: &Architecture,
    record: &PassRecord,
    mode: FactorMode,
) -> Result<FactorSet> {
    let g = record.gradients().ok_or(CoreError::MissingGradients)?;
    let ell = arch.ell();
    let m = record.batch_size();
    if m == 0 {
        return Err(CoreError::ShapeMismatch(alloc::string::String::from(
            "empty batch",
        )));
    }
    let scale = 1.0 / m as f64;
    let mut out = FactorSet::zeros(arch, mode);
    for j in 0..ell {
        let abar = record.abar(j);
        out.a_diag[j].gemm(scale, abar, &abar.transpose(), 0.0);
        out.g_diag[j].gemm(scale, &g[j], &g[j].transpose(), 0.0);
    }
    if mode == FactorMode::Tridiagonal {
        for j in 0..ell - 1 {
            out.a_off[j].gemm(scale, record.abar(j), &record.abar(j + 1).transpose(), 0.0);
            out.g_off[j].gemm(scale, &g[j], &g[j + 1].transpose(), 0.0);
        }
    }
    Ok(out)
}
