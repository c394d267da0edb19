//! Matrix-free products with the exact Fisher information matrix.
//!
//! The Fisher of the network's conditional model is `F = E[J^T F_R J]`, with
//! `J` the Jacobian of the output (the predictive-distribution parameters)
//! with respect to the weights and `F_R` the predictive distribution's own
//! Fisher: the identity for the unit-variance Gaussian, `diag(p) - p p^T` for
//! the multinomial. Products `F v` are computed in three stages — a
//! linearized forward pass for `J v`, the cheap `F_R` product, and an
//! ordinary backward pass for `J^T`. Quadratic forms like `v^T F v` need only
//! the forward stage, which roughly halves their cost.
//!
//! Everything here operates on a [`PassRecord`] from a prior forward pass;
//! expectations are means over that batch.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};
use crate::net::{Activation, Architecture, Loss, PassRecord};

/// Scalars of the damped quadratic model evaluated on directions `v` and `u`.
///
/// `vfv`, `ufv`, `ufu` are raw (undamped) Fisher quadratic forms; the dot
/// products carry the `lambda_eta` damping separately.
#[derive(Debug, Clone, Copy)]
pub struct QuadScalars {
    pub vfv: f64,
    pub ufv: f64,
    pub ufu: f64,
    pub grad_dot_v: f64,
    pub grad_dot_u: f64,
    pub v_dot_v: f64,
    pub u_dot_v: f64,
    pub u_dot_u: f64,
    pub lambda_eta: f64,
}

impl QuadScalars {
    /// `v^T (F + (lambda+eta) I) v`
    pub fn damped_vv(&self) -> f64 {
        self.vfv + self.lambda_eta * self.v_dot_v
    }

    /// `u^T (F + (lambda+eta) I) v`
    pub fn damped_uv(&self) -> f64 {
        self.ufv + self.lambda_eta * self.u_dot_v
    }

    /// `u^T (F + (lambda+eta) I) u`
    pub fn damped_uu(&self) -> f64 {
        self.ufu + self.lambda_eta * self.u_dot_u
    }
}

fn check_direction(arch: &Architecture, v: &DVector<f64>) -> Result<()> {
    if v.len() != arch.param_len() {
        return Err(CoreError::ShapeMismatch(format!(
            "direction has {} entries, expected {}",
            v.len(),
            arch.param_len()
        )));
    }
    Ok(())
}

/// Directional derivative of the network output along `v`, per case:
/// the `J v` product realized as a linearized forward pass.
pub fn jacobian_vec(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_direction(arch, v)?;
    let ell = arch.ell();
    let m = record.batch_size();
    // Tangent of abar_j; its homogeneous row is zero.
    let mut r_abar: Option<DMatrix<f64>> = None;
    let mut tangent = DMatrix::zeros(0, 0);
    for j in 0..ell {
        let vj = arch.layer_view(v, j);
        let mut rs = vj * record.abar(j);
        if let Some(prev) = &r_abar {
            let w = arch.layer_view(theta, j);
            rs.gemm(1.0, &w, prev, 1.0);
        }
        let act = arch.activation(j);
        let mut ra = rs;
        if act != Activation::Identity {
            let dj = arch.dims()[j + 1];
            let a_vals = if j + 1 < ell {
                record.abar(j + 1).rows(0, dj).into_owned()
            } else {
                record.output().clone()
            };
            ra.zip_apply(&a_vals, |r, a| *r *= act.derivative_from_value(a));
        }
        if j + 1 < ell {
            let mut padded = DMatrix::zeros(ra.nrows() + 1, m);
            padded.view_mut((0, 0), (ra.nrows(), m)).copy_from(&ra);
            r_abar = Some(padded);
        } else {
            tangent = ra;
        }
    }
    Ok(tangent)
}

/// Applies the predictive distribution's Fisher `F_R` to per-case columns.
fn apply_fr(arch: &Architecture, record: &PassRecord, t: &DMatrix<f64>) -> DMatrix<f64> {
    match arch.loss() {
        Loss::SquaredError => t.clone(),
        Loss::SoftmaxCrossEntropy => {
            let p = crate::net::softmax_columns(record.output());
            let mut out = t.clone();
            for c in 0..t.ncols() {
                let pc = p.column(c);
                let tc = t.column(c);
                let pt = pc.dot(&tc);
                for r in 0..t.nrows() {
                    out[(r, c)] = pc[r] * (tc[r] - pt);
                }
            }
            out
        }
    }
}

/// Quadratic form `a^T F_R b` summed over cases, divided by the batch size.
fn fr_form(arch: &Architecture, record: &PassRecord, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.ncols() as f64;
    match arch.loss() {
        Loss::SquaredError => a.dot(b) / m,
        Loss::SoftmaxCrossEntropy => {
            let p = crate::net::softmax_columns(record.output());
            let mut total = 0.0;
            for c in 0..a.ncols() {
                let pc = p.column(c);
                let ac = a.column(c);
                let bc = b.column(c);
                let mut diag = 0.0;
                for r in 0..a.nrows() {
                    diag += pc[r] * ac[r] * bc[r];
                }
                total += diag - pc.dot(&ac) * pc.dot(&bc);
            }
            total / m
        }
    }
}

/// Back-propagates per-case output-space seeds down to a mean parameter
/// gradient: the `J^T` stage of the Fisher product.
fn backprop_seed(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    seed: DMatrix<f64>,
) -> DVector<f64> {
    let ell = arch.ell();
    let m = record.batch_size();
    let mut g: Vec<DMatrix<f64>> = alloc::vec![DMatrix::zeros(0, 0); ell];
    let out_act = arch.activation(ell - 1);
    g[ell - 1] = match out_act {
        Activation::Identity => seed,
        _ => {
            let mut gl = seed;
            gl.zip_apply(record.output(), |gx, a| {
                *gx *= out_act.derivative_from_value(a);
            });
            gl
        }
    };
    for j in (0..ell - 1).rev() {
        let w_next = arch.layer_view(theta, j + 1);
        let dabar = w_next.transpose() * &g[j + 1];
        let dj = arch.dims()[j + 1];
        let act = arch.activation(j);
        let mut gj = dabar.rows(0, dj).into_owned();
        let a_vals = record.abar(j + 1).rows(0, dj);
        gj.zip_apply(&a_vals, |gx, a| {
            *gx *= act.derivative_from_value(a);
        });
        g[j] = gj;
    }
    let mut grad = DVector::zeros(arch.param_len());
    let scale = 1.0 / m as f64;
    for j in 0..ell {
        let mut block = arch.layer_view_mut(&mut grad, j);
        block.gemm(scale, &g[j], &record.abar(j).transpose(), 0.0);
    }
    grad
}

/// Exact Fisher-vector product `F v`, averaged over the record's batch.
pub fn fisher_vec(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    if record.batch_size() == 0 {
        return Err(CoreError::ShapeMismatch(alloc::string::String::from(
            "empty batch",
        )));
    }
    let jv = jacobian_vec(arch, theta, record, v)?;
    let w = apply_fr(arch, record, &jv);
    Ok(backprop_seed(arch, theta, record, w))
}

/// All scalars needed by the damped quadratic model on the plane spanned by
/// `v` and `u`, from two `J`-products and no transpose pass.
pub fn quad_scalars(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    v: &DVector<f64>,
    u: &DVector<f64>,
    grad: &DVector<f64>,
    lambda_eta: f64,
) -> Result<QuadScalars> {
    let jv = jacobian_vec(arch, theta, record, v)?;
    let ju = jacobian_vec(arch, theta, record, u)?;
    Ok(QuadScalars {
        vfv: fr_form(arch, record, &jv, &jv),
        ufv: fr_form(arch, record, &ju, &jv),
        ufu: fr_form(arch, record, &ju, &ju),
        grad_dot_v: grad.dot(v),
        grad_dot_u: grad.dot(u),
        v_dot_v: v.dot(v),
        u_dot_v: u.dot(v),
        u_dot_u: u.dot(u),
        lambda_eta,
    })
}

/// Like [`quad_scalars`] with `u = 0`: one `J`-product for the 1-d rescale.
pub fn quad_scalars_single(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    v: &DVector<f64>,
    grad: &DVector<f64>,
    lambda_eta: f64,
) -> Result<QuadScalars> {
    let jv = jacobian_vec(arch, theta, record, v)?;
    Ok(QuadScalars {
        vfv: fr_form(arch, record, &jv, &jv),
        ufv: 0.0,
        ufu: 0.0,
        grad_dot_v: grad.dot(v),
        grad_dot_u: 0.0,
        v_dot_v: v.dot(v),
        u_dot_v: 0.0,
        u_dot_u: 0.0,
        lambda_eta,
    })
}

/// Guard for dense assembly.
pub const DENSE_GUARD: usize = 5000;

/// Dense Fisher matrix assembled column-by-column with [`fisher_vec`] on
/// basis vectors. Only for small problems; errors past [`DENSE_GUARD`]
/// parameters.
pub fn dense_fisher(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
) -> Result<DMatrix<f64>> {
    let n = arch.param_len();
    if n > DENSE_GUARD {
        return Err(CoreError::GuardExceeded {
            limit: DENSE_GUARD,
            got: n,
        });
    }
    let mut f = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for i in 0..n {
        e[i] = 1.0;
        let col = fisher_vec(arch, theta, record, &e)?;
        f.column_mut(i).copy_from(&col);
        e[i] = 0.0;
    }
    Ok(f)
}

/// Value of the damped quadratic model
/// `M(delta) = 1/2 delta^T (F + (lambda+eta) I) delta + grad^T delta + h(theta)`.
pub fn quad_model(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &PassRecord,
    grad: &DVector<f64>,
    delta: &DVector<f64>,
    lambda_eta: f64,
    h_theta: f64,
) -> Result<f64> {
    let jd = jacobian_vec(arch, theta, record, delta)?;
    let dfd = fr_form(arch, record, &jd, &jd);
    Ok(0.5 * (dfd + lambda_eta * delta.dot(delta)) + grad.dot(delta) + h_theta)
}

/// Reduction ratio `rho = (h_new - h_old) / (M(delta) - h_old)`: actual over
/// model-predicted objective change. Returns `None` when the predicted change
/// is too small to divide by, signalling that adaptation should be skipped.
pub fn reduction_ratio(h_new: f64, h_old: f64, m_delta: f64) -> Option<f64> {
    let predicted = m_delta - h_old;
    if predicted.abs() < 1e-300 {
        return None;
    }
    Some((h_new - h_old) / predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{self, Targets};
    use crate::rng;

    fn arch(dims: &[usize], act: Activation, loss: Loss) -> Architecture {
        Architecture::uniform(dims.to_vec(), act, Activation::Identity, loss).unwrap()
    }

    fn randn_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut r = rng::seeded(seed);
        let mut buf = alloc::vec![0.0; n];
        rng::fill_standard_normal(&mut r, &mut buf);
        DVector::from_vec(buf)
    }

    fn randn_mat(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut rg = rng::seeded(seed);
        let mut buf = alloc::vec![0.0; r * c];
        rng::fill_standard_normal(&mut rg, &mut buf);
        DMatrix::from_column_slice(r, c, &buf)
    }

    #[test]
    fn jacobian_vec_linear_net() {
        let a = arch(&[1, 1], Activation::Identity, Loss::SquaredError);
        let theta = DVector::from_vec(alloc::vec![2.0, 1.0]);
        let x = DMatrix::from_element(1, 1, 3.0);
        let rec = net::forward(&a, &theta, &x).unwrap();
        let v = DVector::from_vec(alloc::vec![1.0, 0.0]);
        let jv = jacobian_vec(&a, &theta, &rec, &v).unwrap();
        assert_eq!(jv[(0, 0)], 3.0);
        let zero = DVector::zeros(2);
        assert_eq!(jacobian_vec(&a, &theta, &rec, &zero).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn jacobian_vec_matches_finite_differences() {
        for (dims, loss) in [
            (&[3usize, 4, 2][..], Loss::SquaredError),
            (&[3usize, 4, 3][..], Loss::SoftmaxCrossEntropy),
        ] {
            let a = arch(dims, Activation::Tanh, loss);
            let theta = randn_vec(a.param_len(), 1) * 0.6;
            let x = randn_mat(dims[0], 5, 2);
            let v = randn_vec(a.param_len(), 3);
            let rec = net::forward(&a, &theta, &x).unwrap();
            let jv = jacobian_vec(&a, &theta, &rec, &v).unwrap();
            let h = 1e-5;
            let fp = net::forward(&a, &(&theta + &v * h), &x).unwrap();
            let fm = net::forward(&a, &(&theta - &v * h), &x).unwrap();
            let fd = (fp.output() - fm.output()) / (2.0 * h);
            let rel = (&jv - &fd).norm() / fd.norm();
            assert!(rel < 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn fisher_one_weight_expectation() {
        // f = w x + b on inputs {1, 2}: F = mean [[x^2, x], [x, 1]].
        let a = arch(&[1, 1], Activation::Identity, Loss::SquaredError);
        let theta = DVector::from_vec(alloc::vec![0.3, -0.2]);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let rec = net::forward(&a, &theta, &x).unwrap();
        let f = dense_fisher(&a, &theta, &rec).unwrap();
        assert!((f[(0, 0)] - 2.5).abs() < 1e-14);
        assert!((f[(0, 1)] - 1.5).abs() < 1e-14);
        assert!((f[(1, 0)] - 1.5).abs() < 1e-14);
        assert!((f[(1, 1)] - 1.0).abs() < 1e-14);
        let e_w = DVector::from_vec(alloc::vec![1.0, 0.0]);
        let fv = fisher_vec(&a, &theta, &rec, &e_w).unwrap();
        assert!((fv[0] - 2.5).abs() < 1e-14);
        let z = DVector::zeros(2);
        assert_eq!(fisher_vec(&a, &theta, &rec, &z).unwrap().amax(), 0.0);
    }

    #[test]
    fn dense_fisher_symmetric_psd() {
        for (dims, loss) in [
            (&[3usize, 4, 2][..], Loss::SquaredError),
            (&[2usize, 3, 3][..], Loss::SoftmaxCrossEntropy),
        ] {
            let a = arch(dims, Activation::Tanh, loss);
            let theta = randn_vec(a.param_len(), 5) * 0.5;
            let x = randn_mat(dims[0], 8, 6);
            let rec = net::forward(&a, &theta, &x).unwrap();
            let f = dense_fisher(&a, &theta, &rec).unwrap();
            assert!((&f - f.transpose()).amax() < 1e-12);
            let eig = f.symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-10);
        }
    }

    #[test]
    fn dense_fisher_guard() {
        let a = arch(&[100, 100], Activation::Identity, Loss::SquaredError);
        let theta = DVector::zeros(a.param_len());
        let x = DMatrix::zeros(100, 1);
        let rec = net::forward(&a, &theta, &x).unwrap();
        assert!(matches!(
            dense_fisher(&a, &theta, &rec),
            Err(CoreError::GuardExceeded { .. })
        ));
    }

    #[test]
    fn fisher_vec_linearity() {
        let a = arch(&[3, 4, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy);
        let theta = randn_vec(a.param_len(), 7) * 0.4;
        let x = randn_mat(3, 6, 8);
        let rec = net::forward(&a, &theta, &x).unwrap();
        let v = randn_vec(a.param_len(), 9);
        let u = randn_vec(a.param_len(), 10);
        let lhs = fisher_vec(&a, &theta, &rec, &(&v * 2.0 + &u * -0.7)).unwrap();
        let rhs = fisher_vec(&a, &theta, &rec, &v).unwrap() * 2.0
            + fisher_vec(&a, &theta, &rec, &u).unwrap() * -0.7;
        let rel = (&lhs - &rhs).norm() / rhs.norm();
        assert!(rel < 1e-10, "rel err {rel}");
    }

    #[test]
    fn quad_scalars_match_two_pass() {
        for (dims, loss) in [
            (&[3usize, 4, 2][..], Loss::SquaredError),
            (&[3usize, 3, 4][..], Loss::SoftmaxCrossEntropy),
        ] {
            let a = arch(dims, Activation::Tanh, loss);
            let theta = randn_vec(a.param_len(), 11) * 0.5;
            let x = randn_mat(dims[0], 7, 12);
            let rec = net::forward(&a, &theta, &x).unwrap();
            let v = randn_vec(a.param_len(), 13);
            let u = randn_vec(a.param_len(), 14);
            let grad = randn_vec(a.param_len(), 15);
            let qs = quad_scalars(&a, &theta, &rec, &v, &u, &grad, 0.25).unwrap();
            let fv = fisher_vec(&a, &theta, &rec, &v).unwrap();
            let fu = fisher_vec(&a, &theta, &rec, &u).unwrap();
            assert!((qs.vfv - v.dot(&fv)).abs() <= 1e-10 * qs.vfv.abs().max(1.0));
            assert!((qs.ufv - u.dot(&fv)).abs() <= 1e-10 * qs.ufv.abs().max(1.0));
            assert!((qs.ufv - v.dot(&fu)).abs() <= 1e-10 * qs.ufv.abs().max(1.0));
            assert!((qs.ufu - u.dot(&fu)).abs() <= 1e-10 * qs.ufu.abs().max(1.0));
            assert!(qs.vfv >= 0.0 && qs.ufu >= 0.0);
        }
    }

    #[test]
    fn quad_scalars_symmetry_and_zero() {
        let a = arch(&[2, 3, 2], Activation::Tanh, Loss::SquaredError);
        let theta = randn_vec(a.param_len(), 16) * 0.5;
        let x = randn_mat(2, 4, 17);
        let rec = net::forward(&a, &theta, &x).unwrap();
        let v = randn_vec(a.param_len(), 18);
        let grad = randn_vec(a.param_len(), 19);
        let qs = quad_scalars(&a, &theta, &rec, &v, &v, &grad, 0.0).unwrap();
        assert_eq!(qs.vfv, qs.ufu);
        assert!((qs.ufv - qs.vfv).abs() < 1e-12 * qs.vfv.max(1.0));
        let z = DVector::zeros(a.param_len());
        let qz = quad_scalars(&a, &theta, &rec, &z, &v, &grad, 0.0).unwrap();
        assert_eq!(qz.vfv, 0.0);
        assert_eq!(qz.ufv, 0.0);
        assert_eq!(qz.grad_dot_v, 0.0);
    }

    #[test]
    fn quad_model_values() {
        let a = arch(&[3, 4, 2], Activation::Tanh, Loss::SquaredError);
        let theta = randn_vec(a.param_len(), 20) * 0.5;
        let x = randn_mat(3, 5, 21);
        let rec = net::forward(&a, &theta, &x).unwrap();
        let y = Targets::Values(randn_mat(2, 5, 22));
        let mut rec2 = rec.clone();
        let grad = net::backward(&a, &theta, &mut rec2, &y).unwrap();
        let h_theta = net::loss_value(&a, &rec, &y).unwrap();
        let zero = DVector::zeros(a.param_len());
        let m0 = quad_model(&a, &theta, &rec, &grad, &zero, 0.3, h_theta).unwrap();
        assert_eq!(m0, h_theta);

        // second difference recovers the quadratic term exactly
        let delta = randn_vec(a.param_len(), 23) * 0.1;
        let le = 0.3;
        let m1 = quad_model(&a, &theta, &rec, &grad, &delta, le, h_theta).unwrap();
        let m2 = quad_model(&a, &theta, &rec, &grad, &(&delta * 2.0), le, h_theta).unwrap();
        let second_diff = m2 - 2.0 * m1 + m0;
        let qs = quad_scalars(&a, &theta, &rec, &delta, &delta, &grad, le).unwrap();
        let expect = qs.damped_vv();
        assert!(
            (second_diff - expect).abs() < 1e-10 * expect.abs().max(1.0),
            "{second_diff} vs {expect}"
        );
    }

    #[test]
    fn reduction_ratio_values() {
        assert_eq!(reduction_ratio(1.0, 2.0, 1.0), Some(1.0));
        assert_eq!(reduction_ratio(2.0, 2.0, 1.0), Some(0.0));
        assert_eq!(reduction_ratio(1.0, 2.0, 0.0), Some(0.5));
        assert_eq!(reduction_ratio(1.0, 2.0, 2.0), None);
    }

    #[test]
    fn squared_error_fisher_equals_mean_jtj() {
        // Fisher = GGN consistency for the Gaussian case: F_R = I.
        let a = arch(&[3, 4, 2], Activation::Tanh, Loss::SquaredError);
        let theta = randn_vec(a.param_len(), 30) * 0.5;
        let x = randn_mat(3, 6, 31);
        let rec = net::forward(&a, &theta, &x).unwrap();
        let n = a.param_len();
        let mut jtj = DMatrix::zeros(n, n);
        let mut cols: Vec<DMatrix<f64>> = Vec::new();
        let mut e = DVector::zeros(n);
        for i in 0..n {
            e[i] = 1.0;
            cols.push(jacobian_vec(&a, &theta, &rec, &e).unwrap());
            e[i] = 0.0;
        }
        for i in 0..n {
            for j in 0..n {
                jtj[(i, j)] = cols[i].dot(&cols[j]) / 6.0;
            }
        }
        let f = dense_fisher(&a, &theta, &rec).unwrap();
        assert!((&f - &jtj).amax() < 1e-12);
    }
}
