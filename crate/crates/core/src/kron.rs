//! Structured linear algebra for the factored Fisher approximation.
//!
//! Three layers of machinery live here:
//!
//! - Kronecker-product basics: `(A ⊗ B) vec(X) = vec(B X A^T)` and the
//!   factored Tikhonov damping `(Abar + pi g I) ⊗ (G + g/pi I)` with the
//!   trace-norm choice of `pi`.
//! - The block-diagonal inverse: each layer block of the approximation is a
//!   single Kronecker product, so its inverse applies as two small
//!   triangular-solve-sized multiplications per layer.
//! - The block-tridiagonal inverse: the approximation whose *inverse* is
//!   block-tridiagonal factors as `Xi^T Lambda Xi` (the directed-graphical-
//!   model Cholesky), where `Xi` is unit upper block-bidiagonal with
//!   Kronecker-factored coefficient blocks `Psi` and `Lambda` holds inverses
//!   of conditional covariances `Sigma` that are *differences* of Kronecker
//!   products. Those are solved with an eigendecomposition method for
//!   `(A ⊗ B ± C ⊗ D) u = v` whose factorization is reusable across
//!   right-hand sides.
//!
//! Dense reference assemblies of all of these live in [`dense`]; they are the
//! oracles for the structured paths and the backing for the diagnostic dumps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{CoreError, Result};
use crate::math;
use crate::stats::{FactorMode, FactorSet};

/// `(A ⊗ B) v` computed as `vec(B V A^T)` where `v = vec(V)`.
pub fn kron_mv(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != a.ncols() * b.ncols() {
        return Err(CoreError::ShapeMismatch(format!(
            "vector length {} does not match {} * {}",
            v.len(),
            a.ncols(),
            b.ncols()
        )));
    }
    let vm = DMatrixView::from_slice(v.as_slice(), b.ncols(), a.ncols());
    let out = b * vm * a.transpose();
    Ok(DVector::from_column_slice(out.as_slice()))
}

/// Trace-norm damping split between the two factors of one layer block.
#[derive(Debug, Clone, Copy)]
pub struct PiEstimate {
    pub value: f64,
    /// True when a non-positive trace forced the fallback `pi = 1`.
    pub fell_back: bool,
}

/// `pi = sqrt( (tr(A)/dim A) / (tr(G)/dim G) )`, the ratio of average
/// eigenvalues; falls back to 1 when either trace is non-positive.
pub fn compute_pi(a: &DMatrix<f64>, g: &DMatrix<f64>) -> PiEstimate {
    let ta = a.trace() / a.nrows() as f64;
    let tg = g.trace() / g.nrows() as f64;
    if ta > 0.0 && tg > 0.0 {
        PiEstimate {
            value: math::sqrt(ta / tg),
            fell_back: false,
        }
    } else {
        PiEstimate {
            value: 1.0,
            fell_back: true,
        }
    }
}

/// Per-layer damped factors `Abar + pi_i gamma I` and `G + gamma/pi_i I`.
#[derive(Debug, Clone)]
pub struct DampedFactors {
    pub a: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub pi: Vec<PiEstimate>,
    pub gamma: f64,
}

/// Applies the factored Tikhonov modification to the diagonal factors.
/// Off-diagonal factors are never damped.
pub fn damp_factors(factors: &FactorSet, gamma: f64) -> DampedFactors {
    let ell = factors.ell();
    let mut a = Vec::with_capacity(ell);
    let mut g = Vec::with_capacity(ell);
    let mut pi = Vec::with_capacity(ell);
    for j in 0..ell {
        let p = compute_pi(&factors.a_diag[j], &factors.g_diag[j]);
        let mut aj = factors.a_diag[j].clone();
        let mut gj = factors.g_diag[j].clone();
        for i in 0..aj.nrows() {
            aj[(i, i)] += p.value * gamma;
        }
        for i in 0..gj.nrows() {
            gj[(i, i)] += gamma / p.value;
        }
        a.push(aj);
        g.push(gj);
        pi.push(p);
    }
    DampedFactors { a, g, pi, gamma }
}

/// Cholesky inverse of an SPD matrix, with a single jitter retry adding
/// `1e-10 * tr/dim * I` when numerical noise spoils positive definiteness.
fn spd_inverse(m: &DMatrix<f64>, what: &str, layer: Option<usize>) -> Result<DMatrix<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.inverse());
    }
    let jitter = 1e-10 * m.trace() / m.nrows() as f64;
    let mut retry = m.clone();
    for i in 0..retry.nrows() {
        retry[(i, i)] += jitter;
    }
    retry
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| CoreError::Singular {
            what: String::from(what),
            layer,
        })
}

/// Inverses of the damped diagonal factors, one pair per layer.
#[derive(Debug, Clone)]
pub struct BlockDiagCache {
    pub a_inv: Vec<DMatrix<f64>>,
    pub g_inv: Vec<DMatrix<f64>>,
    pub gamma: f64,
}

impl BlockDiagCache {
    pub fn build(factors: &FactorSet, gamma: f64) -> Result<BlockDiagCache> {
        let damped = damp_factors(factors, gamma);
        let mut a_inv = Vec::with_capacity(damped.a.len());
        let mut g_inv = Vec::with_capacity(damped.g.len());
        for (j, (a, g)) in damped.a.iter().zip(damped.g.iter()).enumerate() {
            a_inv.push(spd_inverse(a, "damped activity factor", Some(j + 1))?);
            g_inv.push(spd_inverse(g, "damped gradient factor", Some(j + 1))?);
        }
        Ok(BlockDiagCache {
            a_inv,
            g_inv,
            gamma,
        })
    }

    pub fn param_len(&self) -> usize {
        self.a_inv
            .iter()
            .zip(&self.g_inv)
            .map(|(a, g)| a.nrows() * g.nrows())
            .sum()
    }
}

fn check_param_len(len: usize, expected: usize) -> Result<()> {
    if len != expected {
        return Err(CoreError::ShapeMismatch(format!(
            "vector length {len} does not match cache layout {expected}"
        )));
    }
    Ok(())
}

/// `U_i = G_ii^-1 V_i Abar_ii^-1` per layer: the block-diagonal approximate
/// inverse applied to a flat vector.
pub fn blockdiag_apply(cache: &BlockDiagCache, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_param_len(v.len(), cache.param_len())?;
    let mut out = DVector::zeros(v.len());
    let mut off = 0;
    for (a_inv, g_inv) in cache.a_inv.iter().zip(&cache.g_inv) {
        let (rows, cols) = (g_inv.nrows(), a_inv.nrows());
        let vm = DMatrixView::from_slice(&v.as_slice()[off..off + rows * cols], rows, cols);
        let u = g_inv * vm * a_inv;
        out.as_mut_slice()[off..off + rows * cols].copy_from_slice(u.as_slice());
        off += rows * cols;
    }
    Ok(out)
}

/// Sign in `A ⊗ B ± C ⊗ D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteinSign {
    Plus,
    Minus,
}

/// Reusable factorization for solving `(A ⊗ B ± C ⊗ D) u = v` with SPD `A`,
/// `B` and PSD `C`, `D`.
///
/// With `K_1 = A^{-1/2} E_1`, `K_2 = B^{-1/2} E_2` from the symmetric
/// eigendecompositions of `A^{-1/2} C A^{-1/2}` and `B^{-1/2} D B^{-1/2}`,
/// the solve is `vec( K_2 [ (K_2^T V K_1) ./ (1 ± s_2 s_1^T) ] K_1^T )`.
#[derive(Debug, Clone)]
pub struct SteinDecomp {
    k1: DMatrix<f64>,
    k2: DMatrix<f64>,
    /// Element `(r, c)` holds `xi ± s2[r] * s1[c]`.
    denom: DMatrix<f64>,
}

const STEIN_PIVOT_TOL: f64 = 1e-12;

fn inv_sqrt_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.min() <= 0.0 {
        return Err(CoreError::Singular {
            what: String::from(what),
            layer: None,
        });
    }
    let mut scaled = eig.eigenvectors.clone();
    for (c, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = 1.0 / math::sqrt(math::sqrt(ev));
        scaled.column_mut(c).scale_mut(s);
    }
    // Q diag(ev^-1/2) Q^T
    Ok(&scaled * scaled.transpose())
}

fn symmetrized_eigen(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    (eig.eigenvectors, eig.eigenvalues)
}

fn build_denom(
    xi: f64,
    s1: &DVector<f64>,
    s2: &DVector<f64>,
    sign: SteinSign,
) -> Result<DMatrix<f64>> {
    let sgn = match sign {
        SteinSign::Plus => 1.0,
        SteinSign::Minus => -1.0,
    };
    let mut denom = DMatrix::zeros(s2.len(), s1.len());
    for r in 0..s2.len() {
        for c in 0..s1.len() {
            let d = xi + sgn * s2[r] * s1[c];
            if d.abs() < STEIN_PIVOT_TOL {
                return Err(CoreError::Singular {
                    what: String::from("Kronecker-sum solve pivot"),
                    layer: None,
                });
            }
            denom[(r, c)] = d;
        }
    }
    Ok(denom)
}

impl SteinDecomp {
    /// Factorization for `A ⊗ B ± C ⊗ D` with `A`, `B` positive definite.
    pub fn new(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        c: &DMatrix<f64>,
        d: &DMatrix<f64>,
        sign: SteinSign,
    ) -> Result<SteinDecomp> {
        let a_mh = inv_sqrt_spd(a, "A factor of Kronecker sum")?;
        let b_mh = inv_sqrt_spd(b, "B factor of Kronecker sum")?;
        let (e1, s1) = symmetrized_eigen(&(&a_mh * c * &a_mh));
        let (e2, s2) = symmetrized_eigen(&(&b_mh * d * &b_mh));
        let denom = build_denom(1.0, &s1, &s2, sign)?;
        Ok(SteinDecomp {
            k1: &a_mh * e1,
            k2: &b_mh * e2,
            denom,
        })
    }

    /// Factorization for `xi I ⊗ I ± C ⊗ D` (scaled-identity variant): the
    /// eigendecompositions apply to `C` and `D` directly.
    pub fn scaled(
        xi: f64,
        c: &DMatrix<f64>,
        d: &DMatrix<f64>,
        sign: SteinSign,
    ) -> Result<SteinDecomp> {
        let (e1, s1) = symmetrized_eigen(c);
        let (e2, s2) = symmetrized_eigen(d);
        let denom = build_denom(xi, &s1, &s2, sign)?;
        Ok(SteinDecomp {
            k1: e1,
            k2: e2,
            denom,
        })
    }

    /// Matrix-shaped solve: `V` has `dim(B)` rows and `dim(A)` columns.
    pub fn solve_mat(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.nrows() != self.k2.nrows() || v.ncols() != self.k1.nrows() {
            return Err(CoreError::ShapeMismatch(format!(
                "Kronecker-sum solve expects {}x{}, got {}x{}",
                self.k2.nrows(),
                self.k1.nrows(),
                v.nrows(),
                v.ncols()
            )));
        }
        let mut core = self.k2.transpose() * v * &self.k1;
        core.component_div_assign(&self.denom);
        Ok(&self.k2 * core * self.k1.transpose())
    }

    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let (rows, cols) = (self.k2.nrows(), self.k1.nrows());
        if v.len() != rows * cols {
            return Err(CoreError::ShapeMismatch(format!(
                "vector length {} does not match {rows} * {cols}",
                v.len()
            )));
        }
        let vm = DMatrixView::from_slice(v.as_slice(), rows, cols).into_owned();
        let u = self.solve_mat(&vm)?;
        Ok(DVector::from_column_slice(u.as_slice()))
    }
}

/// One-shot solve of `(A ⊗ B ± C ⊗ D) u = v`.
pub fn stein_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    sign: SteinSign,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    SteinDecomp::new(a, b, c, d, sign)?.solve(v)
}

/// One-shot solve of `(xi I ⊗ I ± C ⊗ D) u = v`.
pub fn stein_solve_scaled(
    xi: f64,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    sign: SteinSign,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    SteinDecomp::scaled(xi, c, d, sign)?.solve(v)
}

/// Cached pieces of the block-tridiagonal inverse `Xi^T Lambda Xi`.
///
/// For pair index `p` (layers `p+1`, `p+2` in 1-based terms):
/// `psi_a[p] = Abar_{p,p+1} Abar_{p+1,p+1}^-1` and
/// `psi_g[p] = G_{p+1,p+2} G_{p+2,p+2}^-1`, both built from damped diagonal
/// factors; `sigma[p]` solves with the conditional covariance
/// `Sigma = A'_p ⊗ G'_p - (psi_a A'_{p+1} psi_a^T) ⊗ (psi_g G'_{p+1} psi_g^T)`.
/// The last layer's block is a plain damped Kronecker inverse.
#[derive(Debug, Clone)]
pub struct TridiagCache {
    pub psi_a: Vec<DMatrix<f64>>,
    pub psi_g: Vec<DMatrix<f64>>,
    sigma: Vec<SteinDecomp>,
    last_a_inv: DMatrix<f64>,
    last_g_inv: DMatrix<f64>,
    /// (rows, cols) of each layer block.
    shapes: Vec<(usize, usize)>,
    pub gamma: f64,
}

impl TridiagCache {
    pub fn build(factors: &FactorSet, gamma: f64) -> Result<TridiagCache> {
        if factors.mode() != FactorMode::Tridiagonal {
            return Err(CoreError::ShapeMismatch(String::from(
                "block-tridiagonal cache needs tridiagonal factor estimates",
            )));
        }
        let ell = factors.ell();
        let damped = damp_factors(factors, gamma);
        let shapes: Vec<(usize, usize)> = (0..ell)
            .map(|j| (damped.g[j].nrows(), damped.a[j].nrows()))
            .collect();

        let mut psi_a = Vec::with_capacity(ell.saturating_sub(1));
        let mut psi_g = Vec::with_capacity(ell.saturating_sub(1));
        for p in 0..ell.saturating_sub(1) {
            let a_next_inv = spd_inverse(&damped.a[p + 1], "damped activity factor", Some(p + 2))?;
            let g_next_inv = spd_inverse(&damped.g[p + 1], "damped gradient factor", Some(p + 2))?;
            psi_a.push(&factors.a_off[p] * a_next_inv);
            psi_g.push(&factors.g_off[p] * g_next_inv);
        }

        let mut sigma = Vec::with_capacity(ell.saturating_sub(1));
        for p in 0..ell.saturating_sub(1) {
            let c = &psi_a[p] * &damped.a[p + 1] * psi_a[p].transpose();
            let d = &psi_g[p] * &damped.g[p + 1] * psi_g[p].transpose();
            let decomp = SteinDecomp::new(&damped.a[p], &damped.g[p], &c, &d, SteinSign::Minus)
                .map_err(|e| match e {
                    CoreError::Singular { what, .. } => CoreError::Singular {
                        what,
                        layer: Some(p + 1),
                    },
                    other => other,
                })?;
            sigma.push(decomp);
        }

        let last = ell - 1;
        let last_a_inv = spd_inverse(&damped.a[last], "damped activity factor", Some(ell))?;
        let last_g_inv = spd_inverse(&damped.g[last], "damped gradient factor", Some(ell))?;
        Ok(TridiagCache {
            psi_a,
            psi_g,
            sigma,
            last_a_inv,
            last_g_inv,
            shapes,
            gamma,
        })
    }

    pub fn param_len(&self) -> usize {
        self.shapes.iter().map(|&(r, c)| r * c).sum()
    }

    fn split(&self, v: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for &(r, c) in &self.shapes {
            out.push(DMatrixView::from_slice(&v.as_slice()[off..off + r * c], r, c).into_owned());
            off += r * c;
        }
        out
    }

    fn join(&self, blocks: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_len());
        let mut off = 0;
        for b in blocks {
            out.as_mut_slice()[off..off + b.len()].copy_from_slice(b.as_slice());
            off += b.len();
        }
        out
    }
}

/// Applies the block-tridiagonal approximate inverse: multiply by `Xi`, then
/// by `Lambda` (per-layer conditional-covariance solves), then by `Xi^T`.
pub fn tridiag_apply(cache: &TridiagCache, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_param_len(v.len(), cache.param_len())?;
    let ell = cache.shapes.len();
    let blocks = cache.split(v);

    // u = Xi v: U_i = V_i - Psi^G_{i,i+1} V_{i+1} Psi^A^T_{i-1,i}, U_ell = V_ell
    let mut xi_v = blocks.clone();
    for j in 0..ell.saturating_sub(1) {
        xi_v[j] -= &cache.psi_g[j] * &blocks[j + 1] * cache.psi_a[j].transpose();
    }

    // u = Lambda v: per-layer Sigma solves, plain Kronecker inverse at the top
    let mut lam_v = Vec::with_capacity(ell);
    for (j, block) in xi_v.iter().enumerate() {
        if j < ell - 1 {
            lam_v.push(cache.sigma[j].solve_mat(block)?);
        } else {
            lam_v.push(&cache.last_g_inv * block * &cache.last_a_inv);
        }
    }

    // u = Xi^T v: U_i = V_i - Psi^G^T_{i-1,i} V_{i-1} Psi^A_{i-2,i-1}, U_1 = V_1
    let mut out = lam_v.clone();
    for j in 1..ell {
        out[j] -= cache.psi_g[j - 1].transpose() * &lam_v[j - 1] * &cache.psi_a[j - 1];
    }
    Ok(cache.join(&out))
}

pub mod dense {
    //! Dense reference assemblies of the structured approximations.
    //!
    //! These materialize the same matrices the structured paths apply
    //! implicitly, using plain dense inversion throughout, and are the test
    //! oracles and the backing of the diagnostic dumps. All of them respect
    //! the [`crate::fisher::DENSE_GUARD`] parameter limit.

    use super::*;
    use crate::fisher::DENSE_GUARD;

    fn guard(factors: &FactorSet) -> Result<usize> {
        let n: usize = (0..factors.ell())
            .map(|j| factors.a_diag[j].nrows() * factors.g_diag[j].nrows())
            .sum();
        if n > DENSE_GUARD {
            return Err(CoreError::GuardExceeded {
                limit: DENSE_GUARD,
                got: n,
            });
        }
        Ok(n)
    }

    fn dense_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
        m.clone().try_inverse().ok_or_else(|| CoreError::Singular {
            what: String::from(what),
            layer: None,
        })
    }

    /// Damped diagonal blocks `(Abar + pi g I) ⊗ (G + g/pi I)`, one per layer.
    pub fn damped_diag_blocks(factors: &FactorSet, gamma: f64) -> Result<Vec<DMatrix<f64>>> {
        guard(factors)?;
        let damped = damp_factors(factors, gamma);
        Ok(damped
            .a
            .iter()
            .zip(&damped.g)
            .map(|(a, g)| a.kronecker(g))
            .collect())
    }

    fn block_offsets(blocks: &[DMatrix<f64>]) -> (usize, Vec<usize>) {
        let mut offs = Vec::with_capacity(blocks.len());
        let mut n = 0;
        for b in blocks {
            offs.push(n);
            n += b.nrows();
        }
        (n, offs)
    }

    fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (n, offs) = block_offsets(blocks);
        let mut out = DMatrix::zeros(n, n);
        for (b, &o) in blocks.iter().zip(&offs) {
            out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        }
        out
    }

    /// Dense damped block-diagonal approximation (the `F` whose inverse the
    /// block-diagonal cache applies).
    pub fn blockdiag_dense(factors: &FactorSet, gamma: f64) -> Result<DMatrix<f64>> {
        Ok(block_diagonal(&damped_diag_blocks(factors, gamma)?))
    }

    /// Dense inverse of the damped block-diagonal approximation.
    pub fn blockdiag_inverse_dense(factors: &FactorSet, gamma: f64) -> Result<DMatrix<f64>> {
        let blocks = damped_diag_blocks(factors, gamma)?
            .iter()
            .map(|b| dense_inverse(b, "dense diagonal block"))
            .collect::<Result<Vec<_>>>()?;
        Ok(block_diagonal(&blocks))
    }

    /// The damped factored approximation restricted to its tridiagonal
    /// blocks: damped Kronecker products on the diagonal, raw
    /// `Abar_{i,i+1} ⊗ G_{i,i+1}` off it. The block-tridiagonal inverse
    /// construction is defined to agree with this matrix on these blocks.
    pub fn tridiag_ftilde_dense(factors: &FactorSet, gamma: f64) -> Result<DMatrix<f64>> {
        if factors.mode() != FactorMode::Tridiagonal {
            return Err(CoreError::ShapeMismatch(String::from(
                "tridiagonal factors required",
            )));
        }
        let diag = damped_diag_blocks(factors, gamma)?;
        let (n, offs) = block_offsets(&diag);
        let mut out = DMatrix::zeros(n, n);
        for (b, &o) in diag.iter().zip(&offs) {
            out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        }
        for p in 0..factors.ell() - 1 {
            let off_block = factors.a_off[p].kronecker(&factors.g_off[p]);
            out.view_mut((offs[p], offs[p + 1]), off_block.shape())
                .copy_from(&off_block);
            out.view_mut(
                (offs[p + 1], offs[p]),
                (off_block.ncols(), off_block.nrows()),
            )
            .copy_from(&off_block.transpose());
        }
        Ok(out)
    }

    /// Dense `Xi^T Lambda Xi`: the block-tridiagonal approximate inverse,
    /// assembled with dense conditional-covariance inverses.
    pub fn tridiag_inverse_dense(factors: &FactorSet, gamma: f64) -> Result<DMatrix<f64>> {
        if factors.mode() != FactorMode::Tridiagonal {
            return Err(CoreError::ShapeMismatch(String::from(
                "tridiagonal factors required",
            )));
        }
        let n = guard(factors)?;
        let ell = factors.ell();
        let damped = damp_factors(factors, gamma);

        let mut psi: Vec<DMatrix<f64>> = Vec::with_capacity(ell.saturating_sub(1));
        let mut lambda_blocks: Vec<DMatrix<f64>> = Vec::with_capacity(ell);
        for p in 0..ell - 1 {
            let a_next_inv = dense_inverse(&damped.a[p + 1], "damped activity factor")?;
            let g_next_inv = dense_inverse(&damped.g[p + 1], "damped gradient factor")?;
            let psi_a = &factors.a_off[p] * a_next_inv;
            let psi_g = &factors.g_off[p] * g_next_inv;
            let sigma = damped.a[p].kronecker(&damped.g[p])
                - (&psi_a * &damped.a[p + 1] * psi_a.transpose())
                    .kronecker(&(&psi_g * &damped.g[p + 1] * psi_g.transpose()));
            lambda_blocks.push(dense_inverse(&sigma, "conditional covariance")?);
            psi.push(psi_a.kronecker(&psi_g));
        }
        lambda_blocks.push(dense_inverse(
            &damped.a[ell - 1].kronecker(&damped.g[ell - 1]),
            "top-layer block",
        )?);

        let lambda = block_diagonal(&lambda_blocks);
        let mut xi = DMatrix::identity(n, n);
        let (_, offs) = block_offsets(&lambda_blocks);
        for p in 0..ell - 1 {
            xi.view_mut((offs[p], offs[p + 1]), psi[p].shape())
                .copy_from(&(-&psi[p]));
        }
        Ok(xi.transpose() * lambda * xi)
    }

    /// Dense conditional covariance `Sigma_{p+1|p+2}` for one pair, exposed
    /// for positive-definiteness checks.
    pub fn sigma_dense(factors: &FactorSet, gamma: f64, p: usize) -> Result<DMatrix<f64>> {
        guard(factors)?;
        let damped = damp_factors(factors, gamma);
        let a_next_inv = dense_inverse(&damped.a[p + 1], "damped activity factor")?;
        let g_next_inv = dense_inverse(&damped.g[p + 1], "damped gradient factor")?;
        let psi_a = &factors.a_off[p] * a_next_inv;
        let psi_g = &factors.g_off[p] * g_next_inv;
        Ok(damped.a[p].kronecker(&damped.g[p])
            - (&psi_a * &damped.a[p + 1] * psi_a.transpose())
                .kronecker(&(&psi_g * &damped.g[p + 1] * psi_g.transpose())))
    }
}
