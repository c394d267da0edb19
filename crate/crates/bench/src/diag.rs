//! Dense Fisher diagnostics for small checkpoints.
//!
//! Writes the exact Fisher, the Kronecker-factored approximation, its
//! block-diagonal and block-tridiagonal-inverse variants, their damped
//! inverses, absolute-difference matrices, a per-block mean-magnitude table
//! of the factored inverse, and a summary of Frobenius-norm errors.

use kfac_core::fisher::{dense_fisher, DENSE_GUARD};
use kfac_core::kron::dense as kron_dense;
use kfac_core::net::{self, PassRecord};
use kfac_core::rng;
use kfac_core::stats::{batch_moments, FactorMode};
use kfac_core::CoreError;
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::Problem;
use crate::Result;

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut text = String::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                text.push(',');
            }
            let _ = write!(text, "{}", m[(r, c)]);
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Mean outer product `(1/m) A B^T` of two per-case column matrices.
fn cross_moment(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a * b.transpose() / a.ncols() as f64
}

/// Dense all-pairs Kronecker-factored approximation built from one record
/// whose gradients came from sampled targets. `damped_diag` substitutes the
/// factored-Tikhonov diagonal blocks.
fn dense_kron_approx(
    record: &PassRecord,
    ell: usize,
    damped_diag: Option<&[DMatrix<f64>]>,
) -> DMatrix<f64> {
    let g = record.gradients().expect("gradients present");
    let sizes: Vec<usize> = (0..ell)
        .map(|j| record.abar(j).nrows() * g[j].nrows())
        .collect();
    let offs: Vec<usize> = sizes
        .iter()
        .scan(0usize, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let n: usize = sizes.iter().sum();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..ell {
        for j in 0..ell {
            let block = if i == j {
                if let Some(d) = damped_diag {
                    d[i].clone()
                } else {
                    cross_moment(record.abar(i), record.abar(i))
                        .kronecker(&cross_moment(&g[i], &g[i]))
                }
            } else {
                cross_moment(record.abar(i), record.abar(j)).kronecker(&cross_moment(&g[i], &g[j]))
            };
            out.view_mut((offs[i], offs[j]), block.shape())
                .copy_from(&block);
        }
    }
    out
}

fn block_mean_abs(m: &DMatrix<f64>, sizes: &[usize]) -> DMatrix<f64> {
    let offs: Vec<usize> = sizes
        .iter()
        .scan(0usize, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let ell = sizes.len();
    let mut out = DMatrix::zeros(ell, ell);
    for i in 0..ell {
        for j in 0..ell {
            let block = m.view((offs[i], offs[j]), (sizes[i], sizes[j]));
            out[(i, j)] = block.iter().map(|v| v.abs()).sum::<f64>() / block.len() as f64;
        }
    }
    out
}

/// Writes the full diagnostic bundle for `theta` on the problem's dataset.
/// Only valid below the dense-assembly parameter guard.
pub fn dump_fisher_diagnostics(
    problem: &Problem,
    theta: &DVector<f64>,
    gamma: f64,
    out_dir: &Path,
    seed: u64,
) -> Result<()> {
    let arch = &problem.arch;
    let n = arch.param_len();
    if n > DENSE_GUARD {
        return Err(CoreError::GuardExceeded {
            limit: DENSE_GUARD,
            got: n,
        }
        .into());
    }
    fs::create_dir_all(out_dir)?;

    let mut record = net::forward(arch, theta, &problem.data.inputs)?;
    let mut rng = rng::seeded(seed);
    let y_model = net::sample_targets(arch, &record, &mut rng);
    net::backward(arch, theta, &mut record, &y_model)?;
    let factors = batch_moments(arch, &record, FactorMode::Tridiagonal)?;
    let ell = arch.ell();
    let sizes: Vec<usize> = (0..ell)
        .map(|j| factors.a_diag[j].nrows() * factors.g_diag[j].nrows())
        .collect();

    let fisher = dense_fisher(arch, theta, &record)?;
    let kron_raw = dense_kron_approx(&record, ell, None);
    let damped_blocks = kron_dense::damped_diag_blocks(&factors, gamma)?;
    let kron_damped = dense_kron_approx(&record, ell, Some(&damped_blocks));
    let blockdiag = kron_dense::blockdiag_dense(&factors, gamma)?;
    let inv_blockdiag = kron_dense::blockdiag_inverse_dense(&factors, gamma)?;
    let inv_tridiag = kron_dense::tridiag_inverse_dense(&factors, gamma)?;
    let tridiag = inv_tridiag
        .clone()
        .try_inverse()
        .ok_or(CoreError::Singular {
            what: "dense block-tridiagonal inverse".into(),
            layer: None,
        })?;

    let damped_fisher = &fisher + DMatrix::identity(n, n) * (gamma * gamma);
    let inv_fisher = damped_fisher.try_inverse().ok_or(CoreError::Singular {
        what: "damped exact Fisher".into(),
        layer: None,
    })?;
    let inv_kron = kron_damped
        .clone()
        .try_inverse()
        .ok_or(CoreError::Singular {
            what: "damped factored approximation".into(),
            layer: None,
        })?;

    write_matrix(&out_dir.join("fisher.csv"), &fisher)?;
    write_matrix(&out_dir.join("kron_approx.csv"), &kron_raw)?;
    write_matrix(&out_dir.join("kron_approx_damped.csv"), &kron_damped)?;
    write_matrix(&out_dir.join("blockdiag_approx.csv"), &blockdiag)?;
    write_matrix(&out_dir.join("tridiag_approx.csv"), &tridiag)?;
    write_matrix(&out_dir.join("inv_fisher.csv"), &inv_fisher)?;
    write_matrix(&out_dir.join("inv_kron_approx.csv"), &inv_kron)?;
    write_matrix(&out_dir.join("inv_blockdiag.csv"), &inv_blockdiag)?;
    write_matrix(&out_dir.join("inv_tridiag.csv"), &inv_tridiag)?;
    write_matrix(
        &out_dir.join("absdiff_kron.csv"),
        &(&fisher - &kron_raw).abs(),
    )?;
    write_matrix(
        &out_dir.join("absdiff_inv_blockdiag.csv"),
        &(&inv_kron - &inv_blockdiag).abs(),
    )?;
    write_matrix(
        &out_dir.join("absdiff_inv_tridiag.csv"),
        &(&inv_kron - &inv_tridiag).abs(),
    )?;
    write_matrix(
        &out_dir.join("block_means_inv_kron.csv"),
        &block_mean_abs(&inv_kron, &sizes),
    )?;

    let mut summary = String::from("metric,value\n");
    let _ = writeln!(summary, "params,{n}");
    let _ = writeln!(summary, "gamma,{gamma}");
    let _ = writeln!(
        summary,
        "fro_F_minus_Fkron,{}",
        (&fisher - &kron_raw).norm()
    );
    let _ = writeln!(
        summary,
        "fro_invFkron_minus_invFblockdiag,{}",
        (&inv_kron - &inv_blockdiag).norm()
    );
    let _ = writeln!(
        summary,
        "fro_invFkron_minus_invFtridiag,{}",
        (&inv_kron - &inv_tridiag).norm()
    );
    let _ = writeln!(
        summary,
        "fro_F_minus_Fblockdiag,{}",
        (&fisher - &blockdiag).norm()
    );
    let _ = writeln!(
        summary,
        "fro_F_minus_Ftridiag,{}",
        (&fisher - &tridiag).norm()
    );
    fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset;

    #[test]
    fn diagnostics_written_and_internally_consistent() {
        let problem = dataset::load_problem("blobs8").unwrap();
        let theta = net::init_sparse(&problem.arch, 5, 4, 0.6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_fisher_diagnostics(&problem, &theta, 0.3, dir.path(), 11).unwrap();

        let read = |name: &str| -> DMatrix<f64> {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            let rows: Vec<Vec<f64>> = text
                .lines()
                .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
                .collect();
            DMatrix::from_fn(rows.len(), rows[0].len(), |r, c| rows[r][c])
        };

        let kron_damped = read("kron_approx_damped.csv");
        let blockdiag = read("blockdiag_approx.csv");
        let tridiag = read("tridiag_approx.csv");
        let n = kron_damped.nrows();

        // diagnostic guard: per-layer block sizes of the blobs8 net
        let problem_sizes: Vec<usize> = {
            let dims = problem.arch.dims();
            (0..problem.arch.ell())
                .map(|j| (dims[j] + 1) * dims[j + 1])
                .collect()
        };
        assert_eq!(problem_sizes.iter().sum::<usize>(), n);
        let offs: Vec<usize> = problem_sizes
            .iter()
            .scan(0usize, |acc, s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();

        // block-diagonal approximation matches the damped approximation on
        // the diagonal blocks exactly
        for (bi, (&o, &s)) in offs.iter().zip(&problem_sizes).enumerate() {
            let a = kron_damped.view((o, o), (s, s));
            let b = blockdiag.view((o, o), (s, s));
            assert!((a - b).amax() < 1e-12, "block {bi}");
        }

        // tridiagonal construction agrees with the damped approximation on
        // all tridiagonal blocks
        let ell = problem_sizes.len();
        for bi in 0..ell {
            for bj in 0..ell {
                if bi.abs_diff(bj) <= 1 {
                    let a = kron_damped
                        .view((offs[bi], offs[bj]), (problem_sizes[bi], problem_sizes[bj]));
                    let b =
                        tridiag.view((offs[bi], offs[bj]), (problem_sizes[bi], problem_sizes[bj]));
                    let rel = (a - b).amax() / a.amax().max(1e-12);
                    assert!(rel < 1e-6, "block ({bi},{bj}) rel {rel}");
                }
            }
        }

        // summary exists and the error ordering favors the tridiagonal form
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let get = |key: &str| -> f64 {
            summary
                .lines()
                .find(|l| l.starts_with(key))
                .unwrap()
                .split(',')
                .nth(1)
                .unwrap()
                .parse()
                .unwrap()
        };
        let bd = get("fro_invFkron_minus_invFblockdiag");
        let btd = get("fro_invFkron_minus_invFtridiag");
        assert!(btd <= bd, "{btd} > {bd}");
    }

    #[test]
    fn guard_rejects_large_networks() {
        let problem = dataset::load_problem("digits16").unwrap();
        let theta = net::init_sparse(&problem.arch, 5, 4, 0.6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(dump_fisher_diagnostics(&problem, &theta, 0.3, dir.path(), 1).is_err());
    }
}
