//! Feed-forward networks in homogeneous coordinates.
//!
//! A network maps `a_0 = x` through `s_i = W_i * abar_{i-1}`, `a_i = phi_i(s_i)`,
//! where `abar` is the activity vector with a trailing 1 appended, so the last
//! column of every `W_i` is the bias. Parameters live in a single flat vector
//! in column-stacked order, layer by layer; [`Architecture::layer_view`] gives
//! a zero-copy matrix view of one layer's block.
//!
//! Besides the usual forward/backward passes this module owns target sampling
//! from the predictive distribution, sparse initialization, and the invertible
//! layer-wise reparameterization `W_i -> Phi_i^-1 W_i Omega_{i-1}^-1` together
//! with forward/backward passes through the reparameterized network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};

use crate::error::{CoreError, Result};
use crate::math;
use crate::rng::{self, Prng};

/// Element-wise activation of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Logistic,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::Logistic => math::logistic(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation *value* `a = phi(s)`.
    #[inline]
    pub fn derivative_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Logistic => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

/// Loss kind; fixes the predictive distribution so that `L(y,z) = -log r(y|z)`.
///
/// Squared error corresponds to a unit-variance Gaussian over `y`. Softmax
/// cross-entropy treats the network output as the natural parameters of a
/// multinomial, i.e. the softmax lives inside the loss and the final
/// activation must be [`Activation::Identity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    SquaredError,
    SoftmaxCrossEntropy,
}

/// Training targets for a batch.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One column per case (regression targets, or explicit distributions for
    /// the softmax loss).
    Values(DMatrix<f64>),
    /// 0-based class indices, one per case.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn batch_size(&self) -> usize {
        match self {
            Targets::Values(m) => m.ncols(),
            Targets::Classes(c) => c.len(),
        }
    }

    /// Column subset in the given order.
    pub fn select_cases(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => Targets::Values(m.select_columns(idx.iter())),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Layer sizes, activations, and loss kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    loss: Loss,
}

impl Architecture {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>, loss: Loss) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::InvalidArchitecture(String::from(
                "need at least one layer (two dims)",
            )));
        }
        if dims.contains(&0) {
            return Err(CoreError::InvalidArchitecture(String::from(
                "all layer dims must be >= 1",
            )));
        }
        if activations.len() != dims.len() - 1 {
            return Err(CoreError::InvalidArchitecture(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        if loss == Loss::SoftmaxCrossEntropy && *activations.last().unwrap() != Activation::Identity
        {
            return Err(CoreError::InvalidArchitecture(String::from(
                "softmax cross-entropy requires an identity output layer",
            )));
        }
        Ok(Architecture {
            dims,
            activations,
            loss,
        })
    }

    /// Convenience constructor: one activation for every hidden layer and an
    /// explicit output activation.
    pub fn uniform(
        dims: Vec<usize>,
        hidden: Activation,
        output: Activation,
        loss: Loss,
    ) -> Result<Self> {
        let n = dims.len().saturating_sub(1);
        let mut acts = alloc::vec![hidden; n];
        if n > 0 {
            acts[n - 1] = output;
        }
        Architecture::new(dims, acts, loss)
    }

    /// Number of layers (weight matrices).
    pub fn ell(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    /// Activation of layer `j` (0-based).
    pub fn activation(&self, j: usize) -> Activation {
        self.activations[j]
    }

    /// Shape of `W_{j+1}`: `(d_{j+1}, d_j + 1)` for 0-based `j`.
    pub fn layer_shape(&self, j: usize) -> (usize, usize) {
        (self.dims[j + 1], self.dims[j] + 1)
    }

    pub fn layer_len(&self, j: usize) -> usize {
        let (r, c) = self.layer_shape(j);
        r * c
    }

    /// Offset of layer `j`'s block in the flat parameter vector.
    pub fn layer_offset(&self, j: usize) -> usize {
        (0..j).map(|i| self.layer_len(i)).sum()
    }

    /// Total parameter count.
    pub fn param_len(&self) -> usize {
        (0..self.ell()).map(|j| self.layer_len(j)).sum()
    }

    /// Zero-copy column-major view of layer `j` in a flat parameter vector.
    pub fn layer_view<'a>(&self, theta: &'a DVector<f64>, j: usize) -> DMatrixView<'a, f64> {
        let (r, c) = self.layer_shape(j);
        let off = self.layer_offset(j);
        DMatrixView::from_slice(&theta.as_slice()[off..off + r * c], r, c)
    }

    pub fn layer_view_mut<'a>(
        &self,
        theta: &'a mut DVector<f64>,
        j: usize,
    ) -> DMatrixViewMut<'a, f64> {
        let (r, c) = self.layer_shape(j);
        let off = self.layer_offset(j);
        DMatrixViewMut::from_slice(&mut theta.as_mut_slice()[off..off + r * c], r, c)
    }

    /// Splits a flat vector into per-layer matrices (copies).
    pub fn devec(&self, theta: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        if theta.len() != self.param_len() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                self.param_len()
            )));
        }
        Ok((0..self.ell())
            .map(|j| self.layer_view(theta, j).into_owned())
            .collect())
    }

    /// Concatenates per-layer matrices into the flat column-stacked vector.
    pub fn vec(&self, layers: &[DMatrix<f64>]) -> Result<DVector<f64>> {
        if layers.len() != self.ell() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} layer matrices, expected {}",
                layers.len(),
                self.ell()
            )));
        }
        let mut out = DVector::zeros(self.param_len());
        for (j, w) in layers.iter().enumerate() {
            if w.shape() != self.layer_shape(j) {
                return Err(CoreError::ShapeMismatch(format!(
                    "layer {} has shape {:?}, expected {:?}",
                    j + 1,
                    w.shape(),
                    self.layer_shape(j)
                )));
            }
            let off = self.layer_offset(j);
            out.as_mut_slice()[off..off + w.len()].copy_from_slice(w.as_slice());
        }
        Ok(out)
    }
}

/// Quantities recorded during a forward pass over a batch, one column per
/// case. `g` stays empty until a backward pass fills it.
#[derive(Debug, Clone)]
pub struct PassRecord {
    /// `abar[i]`, `i = 0..ell`: activity with appended 1, `(d_i + 1) x m`.
    abar: Vec<DMatrix<f64>>,
    /// `s[j]`: pre-activations of layer `j+1`, `d_{j+1} x m`.
    s: Vec<DMatrix<f64>>,
    /// Network output `a_ell`, `d_ell x m`.
    output: DMatrix<f64>,
    /// Per-case loss gradients `g_i = Ds_i` (unscaled by the batch mean).
    g: Option<Vec<DMatrix<f64>>>,
}

impl PassRecord {
    pub fn batch_size(&self) -> usize {
        self.output.ncols()
    }

    /// `abar_i` for `i = 0..ell-1`.
    pub fn abar(&self, i: usize) -> &DMatrix<f64> {
        &self.abar[i]
    }

    /// Pre-activations `s_{j+1}` for 0-based `j`.
    pub fn preactivation(&self, j: usize) -> &DMatrix<f64> {
        &self.s[j]
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    /// Per-case `g_{j+1}` for 0-based `j`, if a backward pass has run.
    pub fn gradients(&self) -> Option<&[DMatrix<f64>]> {
        self.g.as_deref()
    }

    /// Copies the record restricted to the given cases (in the given order).
    /// Gradients, if present, are dropped: they would have to be recomputed
    /// for the subset anyway.
    pub fn select_cases(&self, idx: &[usize]) -> PassRecord {
        PassRecord {
            abar: self
                .abar
                .iter()
                .map(|m| m.select_columns(idx.iter()))
                .collect(),
            s: self
                .s
                .iter()
                .map(|m| m.select_columns(idx.iter()))
                .collect(),
            output: self.output.select_columns(idx.iter()),
            g: None,
        }
    }
}

fn append_ones_row(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + 1, a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.row_mut(a.nrows()).fill(1.0);
    out
}

/// Runs the forward pass on a batch (one column per case).
pub fn forward(
    arch: &Architecture,
    theta: &DVector<f64>,
    inputs: &DMatrix<f64>,
) -> Result<PassRecord> {
    if inputs.nrows() != arch.input_dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "input dim {} does not match d0 = {}",
            inputs.nrows(),
            arch.input_dim()
        )));
    }
    if theta.len() != arch.param_len() {
        return Err(CoreError::ShapeMismatch(format!(
            "parameter vector has {} entries, expected {}",
            theta.len(),
            arch.param_len()
        )));
    }
    let ell = arch.ell();
    let mut abar = Vec::with_capacity(ell);
    let mut s = Vec::with_capacity(ell);
    abar.push(append_ones_row(inputs));
    let mut output = DMatrix::zeros(0, 0);
    for j in 0..ell {
        let w = arch.layer_view(theta, j);
        let sj = w * &abar[j];
        let act = arch.activation(j);
        let aj = sj.map(|x| act.apply(x));
        s.push(sj);
        if j + 1 < ell {
            abar.push(append_ones_row(&aj));
        } else {
            output = aj;
        }
    }
    Ok(PassRecord {
        abar,
        s,
        output,
        g: None,
    })
}

/// Column-wise softmax, numerically stabilized.
pub fn softmax_columns(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = z.clone();
    for mut col in p.column_iter_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in col.iter_mut() {
            *x = math::exp(*x - max);
            sum += *x;
        }
        for x in col.iter_mut() {
            *x /= sum;
        }
    }
    p
}

fn loss_output_gradient(
    arch: &Architecture,
    output: &DMatrix<f64>,
    targets: &Targets,
) -> Result<DMatrix<f64>> {
    let m = output.ncols();
    if targets.batch_size() != m {
        return Err(CoreError::ShapeMismatch(format!(
            "{} targets for a batch of {}",
            targets.batch_size(),
            m
        )));
    }
    match (arch.loss(), targets) {
        (Loss::SquaredError, Targets::Values(y)) => {
            if y.nrows() != output.nrows() {
                return Err(CoreError::ShapeMismatch(format!(
                    "target dim {} does not match output dim {}",
                    y.nrows(),
                    output.nrows()
                )));
            }
            Ok(output - y)
        }
        (Loss::SquaredError, Targets::Classes(_)) => Err(CoreError::ShapeMismatch(String::from(
            "squared-error loss needs value targets",
        ))),
        (Loss::SoftmaxCrossEntropy, t) => {
            let mut d = softmax_columns(output);
            match t {
                Targets::Classes(classes) => {
                    for (c, &cls) in classes.iter().enumerate() {
                        if cls >= output.nrows() {
                            return Err(CoreError::ShapeMismatch(format!(
                                "class index {cls} out of range for {} outputs",
                                output.nrows()
                            )));
                        }
                        d[(cls, c)] -= 1.0;
                    }
                }
                Targets::Values(y) => {
                    if y.nrows() != output.nrows() {
                        return Err(CoreError::ShapeMismatch(String::from(
                            "softmax value targets must match output dim",
                        )));
                    }
                    d -= y;
                }
            }
            Ok(d)
        }
    }
}

/// Mean loss over the batch (no regularization term).
pub fn loss_value(arch: &Architecture, record: &PassRecord, targets: &Targets) -> Result<f64> {
    let m = record.batch_size();
    if targets.batch_size() != m {
        return Err(CoreError::ShapeMismatch(format!(
            "{} targets for a batch of {}",
            targets.batch_size(),
            m
        )));
    }
    let z = record.output();
    match (arch.loss(), targets) {
        (Loss::SquaredError, Targets::Values(y)) => {
            let r = z - y;
            Ok(0.5 * r.iter().map(|x| x * x).sum::<f64>() / m as f64)
        }
        (Loss::SquaredError, Targets::Classes(_)) => Err(CoreError::ShapeMismatch(String::from(
            "squared-error loss needs value targets",
        ))),
        (Loss::SoftmaxCrossEntropy, t) => {
            let mut total = 0.0;
            for c in 0..m {
                let col = z.column(c);
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + math::ln(col.iter().map(|&x| math::exp(x - max)).sum::<f64>());
                match t {
                    Targets::Classes(classes) => total += lse - col[classes[c]],
                    Targets::Values(y) => {
                        let yc = y.column(c);
                        total += lse - yc.dot(&col);
                    }
                }
            }
            Ok(total / m as f64)
        }
    }
}

/// Runs the backward pass, filling the record's per-case gradients and
/// returning the mean gradient of the loss over the batch.
pub fn backward(
    arch: &Architecture,
    theta: &DVector<f64>,
    record: &mut PassRecord,
    targets: &Targets,
) -> Result<DVector<f64>> {
    let ell = arch.ell();
    let m = record.batch_size();
    let d_out = loss_output_gradient(arch, &record.output, targets)?;

    let mut g: Vec<DMatrix<f64>> = alloc::vec![DMatrix::zeros(0, 0); ell];
    let out_act = arch.activation(ell - 1);
    g[ell - 1] = match out_act {
        Activation::Identity => d_out,
        _ => {
            let mut gl = d_out;
            gl.zip_apply(&record.output, |gx, a| {
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
        let a_vals = record.abar[j + 1].rows(0, dj);
        gj.zip_apply(&a_vals, |gx, a| {
            *gx *= act.derivative_from_value(a);
        });
        g[j] = gj;
    }

    let mut grad = DVector::zeros(arch.param_len());
    let scale = 1.0 / m as f64;
    for j in 0..ell {
        let mut block = arch.layer_view_mut(&mut grad, j);
        block.gemm(scale, &g[j], &record.abar[j].transpose(), 0.0);
    }
    record.g = Some(g);
    Ok(grad)
}

/// Draws targets from the network's own predictive distribution: Gaussian
/// noise around the output for squared error, a categorical sample from the
/// softmax for cross-entropy.
pub fn sample_targets(arch: &Architecture, record: &PassRecord, rng: &mut Prng) -> Targets {
    match arch.loss() {
        Loss::SquaredError => {
            let mut noise = alloc::vec![0.0; record.output.len()];
            rng::fill_standard_normal(rng, &mut noise);
            let noise =
                DMatrix::from_column_slice(record.output.nrows(), record.output.ncols(), &noise);
            Targets::Values(&record.output + noise)
        }
        Loss::SoftmaxCrossEntropy => {
            let p = softmax_columns(&record.output);
            let classes = (0..p.ncols())
                .map(|c| rng::sample_categorical(rng, p.column(c).as_slice()))
                .collect();
            Targets::Classes(classes)
        }
    }
}

/// Sparse initialization: every unit gets exactly `min(k_in, fan_in)` nonzero
/// incoming weights drawn from `scale * N(0,1)`; biases are zero.
pub fn init_sparse(
    arch: &Architecture,
    seed: u64,
    k_in: usize,
    scale: f64,
) -> Result<DVector<f64>> {
    if k_in == 0 {
        return Err(CoreError::InvalidArchitecture(String::from(
            "sparse init needs k_in >= 1",
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut theta = DVector::zeros(arch.param_len());
    for j in 0..arch.ell() {
        let fan_in = arch.dims()[j];
        let k = k_in.min(fan_in);
        let mut w = arch.layer_view_mut(&mut theta, j);
        for r in 0..w.nrows() {
            let cols = rng::sample_indices(&mut rng, fan_in, k);
            let mut vals = alloc::vec![0.0; k];
            rng::fill_standard_normal(&mut rng, &mut vals);
            for (c, v) in cols.iter().zip(vals.iter()) {
                w[(r, *c)] = scale * v;
            }
        }
    }
    Ok(theta)
}

/// Direction of the layer-wise reparameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformDirection {
    /// `W_i -> Phi_i^-1 W_i Omega_{i-1}^-1`
    ToDagger,
    /// The inverse map `zeta`: `W_i -> Phi_i W_i Omega_{i-1}`
    FromDagger,
}

/// Invertible per-layer transform matrices: `Omega_i` of size `(d_i+1)^2` for
/// `i = 0..ell-1` (with `Omega_ell = I` implied) and `Phi_i` of size `d_i^2`
/// for `i = 1..ell`.
#[derive(Debug, Clone)]
pub struct TransformSpec {
    omega: Vec<DMatrix<f64>>,
    phi: Vec<DMatrix<f64>>,
    omega_inv: Vec<DMatrix<f64>>,
    phi_inv: Vec<DMatrix<f64>>,
}

const MAX_TRANSFORM_CONDITION: f64 = 1e12;

fn checked_inverse(m: &DMatrix<f64>, what: &str, layer: usize) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smin.is_nan() || smax / smin > MAX_TRANSFORM_CONDITION {
        return Err(CoreError::Singular {
            what: format!("transform {what}"),
            layer: Some(layer),
        });
    }
    m.clone().try_inverse().ok_or(CoreError::Singular {
        what: format!("transform {what}"),
        layer: Some(layer),
    })
}

impl TransformSpec {
    /// Validates sizes against `arch` and checks invertibility (condition
    /// number below `1e12`) of every matrix.
    pub fn new(
        arch: &Architecture,
        omega: Vec<DMatrix<f64>>,
        phi: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let ell = arch.ell();
        if omega.len() != ell || phi.len() != ell {
            return Err(CoreError::ShapeMismatch(format!(
                "need {ell} omega and phi matrices, got {} and {}",
                omega.len(),
                phi.len()
            )));
        }
        for (i, om) in omega.iter().enumerate() {
            let d = arch.dims()[i] + 1;
            if om.shape() != (d, d) {
                return Err(CoreError::ShapeMismatch(format!(
                    "omega_{i} must be {d}x{d}, got {:?}",
                    om.shape()
                )));
            }
        }
        for (j, ph) in phi.iter().enumerate() {
            let d = arch.dims()[j + 1];
            if ph.shape() != (d, d) {
                return Err(CoreError::ShapeMismatch(format!(
                    "phi_{} must be {d}x{d}, got {:?}",
                    j + 1,
                    ph.shape()
                )));
            }
        }
        let omega_inv = omega
            .iter()
            .enumerate()
            .map(|(i, m)| checked_inverse(m, "omega", i))
            .collect::<Result<Vec<_>>>()?;
        let phi_inv = phi
            .iter()
            .enumerate()
            .map(|(j, m)| checked_inverse(m, "phi", j + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformSpec {
            omega,
            phi,
            omega_inv,
            phi_inv,
        })
    }

    /// Identity transform (useful as a base case in tests).
    pub fn identity(arch: &Architecture) -> Self {
        let omega = (0..arch.ell())
            .map(|i| DMatrix::identity(arch.dims()[i] + 1, arch.dims()[i] + 1))
            .collect::<Vec<_>>();
        let phi = (0..arch.ell())
            .map(|j| DMatrix::identity(arch.dims()[j + 1], arch.dims()[j + 1]))
            .collect::<Vec<_>>();
        TransformSpec {
            omega_inv: omega.clone(),
            phi_inv: phi.clone(),
            omega,
            phi,
        }
    }

    pub fn omega(&self, i: usize) -> &DMatrix<f64> {
        &self.omega[i]
    }

    pub fn phi(&self, j: usize) -> &DMatrix<f64> {
        &self.phi[j]
    }
}

/// Applies the reparameterization map to a flat parameter vector.
pub fn transform(
    arch: &Architecture,
    theta: &DVector<f64>,
    spec: &TransformSpec,
    direction: TransformDirection,
) -> Result<DVector<f64>> {
    if theta.len() != arch.param_len() {
        return Err(CoreError::ShapeMismatch(String::from(
            "parameter vector length does not match architecture",
        )));
    }
    let mut out = DVector::zeros(theta.len());
    for j in 0..arch.ell() {
        let w = arch.layer_view(theta, j);
        let wt = match direction {
            TransformDirection::ToDagger => &spec.phi_inv[j] * w * &spec.omega_inv[j],
            TransformDirection::FromDagger => &spec.phi[j] * w * &spec.omega[j],
        };
        arch.layer_view_mut(&mut out, j).copy_from(&wt);
    }
    Ok(out)
}

/// Forward-pass record of the reparameterized network. `record` holds the
/// dagger quantities (`abar_i^dagger`, `s_i^dagger`, `a_ell^dagger`);
/// `phibar` additionally keeps the pre-`Omega` activations `phibar(Phi s)`
/// needed to evaluate activation derivatives in the backward pass.
#[derive(Debug, Clone)]
pub struct TransformedPass {
    pub record: PassRecord,
    phibar: Vec<DMatrix<f64>>,
}

/// Forward pass through the reparameterized network:
/// `s_i = W_i abar_{i-1}`, `abar_i = Omega_i phibar_i(Phi_i s_i)`,
/// with `abar_0 = Omega_0 [x; 1]`.
pub fn forward_transformed(
    arch: &Architecture,
    theta_dagger: &DVector<f64>,
    spec: &TransformSpec,
    inputs: &DMatrix<f64>,
) -> Result<TransformedPass> {
    if inputs.nrows() != arch.input_dim() {
        return Err(CoreError::ShapeMismatch(String::from(
            "input dim does not match d0",
        )));
    }
    let ell = arch.ell();
    let mut abar = Vec::with_capacity(ell);
    let mut s = Vec::with_capacity(ell);
    let mut phibar = Vec::with_capacity(ell.saturating_sub(1));
    abar.push(&spec.omega[0] * append_ones_row(inputs));
    let mut output = DMatrix::zeros(0, 0);
    for j in 0..ell {
        let w = arch.layer_view(theta_dagger, j);
        let sj = w * &abar[j];
        let act = arch.activation(j);
        let u = &spec.phi[j] * &sj;
        let aj = u.map(|x| act.apply(x));
        s.push(sj);
        if j + 1 < ell {
            let pb = append_ones_row(&aj);
            abar.push(&spec.omega[j + 1] * &pb);
            phibar.push(pb);
        } else {
            // Omega_ell = I, so the output is phi(Phi_ell s_ell) directly.
            output = aj;
        }
    }
    Ok(TransformedPass {
        record: PassRecord {
            abar,
            s,
            output,
            g: None,
        },
        phibar,
    })
}

/// Backward pass through the reparameterized network; fills the record's
/// per-case `g_i^dagger` and returns the mean gradient with respect to
/// `theta^dagger`.
pub fn backward_transformed(
    arch: &Architecture,
    theta_dagger: &DVector<f64>,
    pass: &mut TransformedPass,
    spec: &TransformSpec,
    targets: &Targets,
) -> Result<DVector<f64>> {
    let ell = arch.ell();
    let record = &mut pass.record;
    let m = record.batch_size();
    let d_out = loss_output_gradient(arch, &record.output, targets)?;

    let mut g: Vec<DMatrix<f64>> = alloc::vec![DMatrix::zeros(0, 0); ell];
    let out_act = arch.activation(ell - 1);
    let mut du = d_out;
    if out_act != Activation::Identity {
        du.zip_apply(&record.output, |gx, a| {
            *gx *= out_act.derivative_from_value(a);
        });
    }
    g[ell - 1] = spec.phi[ell - 1].transpose() * du;
    for j in (0..ell - 1).rev() {
        let w_next = arch.layer_view(theta_dagger, j + 1);
        // d(abar_j^dagger) -> d(phibar_j) -> drop the homogeneous row.
        let dabar = w_next.transpose() * &g[j + 1];
        let dphibar = spec.omega[j + 1].transpose() * dabar;
        let dj = arch.dims()[j + 1];
        let act = arch.activation(j);
        let mut du = dphibar.rows(0, dj).into_owned();
        let a_vals = pass.phibar[j].rows(0, dj);
        du.zip_apply(&a_vals, |gx, a| {
            *gx *= act.derivative_from_value(a);
        });
        g[j] = spec.phi[j].transpose() * du;
    }

    let mut grad = DVector::zeros(arch.param_len());
    let scale = 1.0 / m as f64;
    for j in 0..ell {
        let mut block = arch.layer_view_mut(&mut grad, j);
        block.gemm(scale, &g[j], &record.abar[j].transpose(), 0.0);
    }
    record.g = Some(g);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(dims: &[usize], hidden: Activation, loss: Loss) -> Architecture {
        Architecture::uniform(dims.to_vec(), hidden, Activation::Identity, loss).unwrap()
    }

    fn random_theta(arch: &Architecture, seed: u64) -> DVector<f64> {
        let mut rng = rng::seeded(seed);
        let mut buf = alloc::vec![0.0; arch.param_len()];
        rng::fill_standard_normal(&mut rng, &mut buf);
        DVector::from_vec(buf) * 0.5
    }

    fn random_inputs(d0: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::seeded(seed);
        let mut buf = alloc::vec![0.0; d0 * m];
        rng::fill_standard_normal(&mut rng, &mut buf);
        DMatrix::from_column_slice(d0, m, &buf)
    }

    #[test]
    fn architecture_validation() {
        assert!(matches!(
            Architecture::new(alloc::vec![3], alloc::vec![], Loss::SquaredError),
            Err(CoreError::InvalidArchitecture(_))
        ));
        assert!(matches!(
            Architecture::new(
                alloc::vec![3, 0, 2],
                alloc::vec![Activation::Tanh, Activation::Identity],
                Loss::SquaredError
            ),
            Err(CoreError::InvalidArchitecture(_))
        ));
        assert!(matches!(
            Architecture::new(
                alloc::vec![3, 2],
                alloc::vec![Activation::Tanh],
                Loss::SoftmaxCrossEntropy
            ),
            Err(CoreError::InvalidArchitecture(_))
        ));
        assert!(matches!(
            Architecture::new(alloc::vec![3, 2], alloc::vec![], Loss::SquaredError),
            Err(CoreError::InvalidArchitecture(_))
        ));
        assert!(init_sparse(
            &Architecture::uniform(
                alloc::vec![2, 2],
                Activation::Tanh,
                Activation::Identity,
                Loss::SquaredError
            )
            .unwrap(),
            1,
            0,
            1.0
        )
        .is_err());
    }

    #[test]
    fn forward_hand_arithmetic() {
        let arch = tiny(&[1, 1], Activation::Identity, Loss::SquaredError);
        let theta = DVector::from_vec(alloc::vec![2.0, 1.0]);
        let x = DMatrix::from_element(1, 1, 3.0);
        let rec = forward(&arch, &theta, &x).unwrap();
        assert_eq!(rec.preactivation(0)[(0, 0)], 7.0);
        assert_eq!(rec.output()[(0, 0)], 7.0);
    }

    #[test]
    fn forward_zero_input_zero_weights_gives_bias() {
        let arch = tiny(&[3, 2, 2], Activation::Identity, Loss::SquaredError);
        let mut theta = DVector::zeros(arch.param_len());
        // set biases to distinct values
        for j in 0..arch.ell() {
            let (r, c) = arch.layer_shape(j);
            let mut w = arch.layer_view_mut(&mut theta, j);
            for i in 0..r {
                w[(i, c - 1)] = (j * 10 + i) as f64 + 1.0;
            }
        }
        let x = DMatrix::zeros(3, 1);
        let rec = forward(&arch, &theta, &x).unwrap();
        assert_eq!(rec.preactivation(0)[(0, 0)], 1.0);
        assert_eq!(rec.preactivation(0)[(1, 0)], 2.0);
        // second layer: bias plus W * a_1 where a_1 = bias of layer 1
        assert!(rec.preactivation(1)[(0, 0)] != 0.0);
    }

    #[test]
    fn tanh_outputs_bounded() {
        let arch = Architecture::uniform(
            alloc::vec![4, 5, 3],
            Activation::Tanh,
            Activation::Tanh,
            Loss::SquaredError,
        )
        .unwrap();
        let theta = random_theta(&arch, 1);
        let x = random_inputs(4, 7, 2);
        let rec = forward(&arch, &theta, &x).unwrap();
        assert!(rec.output().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn homogeneous_row_is_one() {
        let arch = tiny(&[4, 3, 3, 2], Activation::Tanh, Loss::SquaredError);
        let theta = random_theta(&arch, 3);
        let x = random_inputs(4, 5, 4);
        let rec = forward(&arch, &theta, &x).unwrap();
        for i in 0..arch.ell() {
            let last = rec.abar(i).row(rec.abar(i).nrows() - 1).into_owned();
            assert!(last.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn backward_hand_arithmetic() {
        let arch = tiny(&[1, 1], Activation::Identity, Loss::SquaredError);
        let theta = DVector::from_vec(alloc::vec![2.0, 1.0]);
        let x = DMatrix::from_element(1, 1, 3.0);
        let mut rec = forward(&arch, &theta, &x).unwrap();
        let y = Targets::Values(DMatrix::zeros(1, 1));
        let grad = backward(&arch, &theta, &mut rec, &y).unwrap();
        assert_eq!(rec.gradients().unwrap()[0][(0, 0)], 7.0);
        assert_eq!(grad[0], 21.0);
        assert_eq!(grad[1], 7.0);
    }

    #[test]
    fn residual_zero_gradient_zero() {
        let arch = tiny(&[3, 2], Activation::Identity, Loss::SquaredError);
        let theta = random_theta(&arch, 5);
        let x = random_inputs(3, 4, 6);
        let mut rec = forward(&arch, &theta, &x).unwrap();
        let y = Targets::Values(rec.output().clone());
        let grad = backward(&arch, &theta, &mut rec, &y).unwrap();
        assert!(grad.amax() < 1e-15);
    }

    fn finite_diff_grad(
        arch: &Architecture,
        theta: &DVector<f64>,
        x: &DMatrix<f64>,
        y: &Targets,
        h: f64,
    ) -> DVector<f64> {
        let mut out = DVector::zeros(theta.len());
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let lp = loss_value(arch, &forward(arch, &tp, x).unwrap(), y).unwrap();
            let mut tm = theta.clone();
            tm[i] -= h;
            let lm = loss_value(arch, &forward(arch, &tm, x).unwrap(), y).unwrap();
            out[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cases: &[(&[usize], Activation, Loss)] = &[
            (&[3, 4, 2], Activation::Tanh, Loss::SquaredError),
            (&[3, 4, 2], Activation::Logistic, Loss::SquaredError),
            (&[2, 3, 3], Activation::Identity, Loss::SquaredError),
            (&[3, 4, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy),
            (&[2, 5, 4], Activation::Logistic, Loss::SoftmaxCrossEntropy),
        ];
        let mut seed = 100;
        for &(dims, act, loss) in cases {
            for _ in 0..4 {
                seed += 1;
                let arch = tiny(dims, act, loss);
                let theta = random_theta(&arch, seed);
                let x = random_inputs(dims[0], 6, seed + 1000);
                let mut rec = forward(&arch, &theta, &x).unwrap();
                let y = match loss {
                    Loss::SquaredError => {
                        Targets::Values(random_inputs(*dims.last().unwrap(), 6, seed + 2000))
                    }
                    Loss::SoftmaxCrossEntropy => {
                        let mut r = rng::seeded(seed + 3000);
                        use rand::Rng;
                        Targets::Classes(
                            (0..6)
                                .map(|_| r.random_range(0..*dims.last().unwrap()))
                                .collect(),
                        )
                    }
                };
                let grad = backward(&arch, &theta, &mut rec, &y).unwrap();
                let fd = finite_diff_grad(&arch, &theta, &x, &y, 1e-5);
                let rel = (&grad - &fd).norm() / fd.norm().max(1e-12);
                assert!(rel < 1e-6, "rel err {rel} for {dims:?} {act:?} {loss:?}");
            }
        }
    }

    #[test]
    fn sample_targets_saturated_softmax() {
        let arch = tiny(&[2, 3], Activation::Identity, Loss::SoftmaxCrossEntropy);
        let mut theta = DVector::zeros(arch.param_len());
        // bias column pushes the first logit to +40
        arch.layer_view_mut(&mut theta, 0)[(0, 2)] = 40.0;
        let x = DMatrix::zeros(2, 50);
        let rec = forward(&arch, &theta, &x).unwrap();
        let mut rng = rng::seeded(9);
        match sample_targets(&arch, &rec, &mut rng) {
            Targets::Classes(c) => assert!(c.iter().all(|&cls| cls == 0)),
            _ => panic!("expected classes"),
        }
    }

    #[test]
    fn sample_targets_gaussian_mean() {
        let arch = tiny(&[1, 1], Activation::Identity, Loss::SquaredError);
        let theta = DVector::from_vec(alloc::vec![1.0, 0.5]);
        let n = 100_000;
        let x = DMatrix::from_element(1, n, 2.0);
        let rec = forward(&arch, &theta, &x).unwrap();
        let mut rng = rng::seeded(10);
        match sample_targets(&arch, &rec, &mut rng) {
            Targets::Values(y) => {
                let mean = y.iter().sum::<f64>() / n as f64;
                let bound = 4.0 / (n as f64).sqrt();
                assert!((mean - 2.5).abs() < bound, "mean {mean}");
            }
            _ => panic!("expected values"),
        }
    }

    #[test]
    fn init_sparse_tiny_and_deterministic() {
        let arch = tiny(&[1, 1], Activation::Identity, Loss::SquaredError);
        let theta = init_sparse(&arch, 42, 1, 1.0).unwrap();
        assert!(theta[0] != 0.0);
        assert_eq!(theta[1], 0.0);
        let again = init_sparse(&arch, 42, 1, 1.0).unwrap();
        assert_eq!(theta.as_slice(), again.as_slice());
    }

    #[test]
    fn init_sparse_nonzero_counts() {
        let arch = tiny(
            &[256, 20, 20, 20, 20, 20, 10],
            Activation::Tanh,
            Loss::SoftmaxCrossEntropy,
        );
        let theta = init_sparse(&arch, 7, 15, 1.0).unwrap();
        for j in 0..arch.ell() {
            let w = arch.layer_view(&theta, j);
            let expect = 15.min(arch.dims()[j]);
            for r in 0..w.nrows() {
                let nnz = (0..w.ncols() - 1).filter(|&c| w[(r, c)] != 0.0).count();
                assert_eq!(nnz, expect, "layer {j} row {r}");
                assert_eq!(w[(r, w.ncols() - 1)], 0.0);
            }
        }
    }

    #[test]
    fn vec_devec_roundtrip() {
        let arch = tiny(&[3, 4, 2], Activation::Tanh, Loss::SquaredError);
        let theta = random_theta(&arch, 77);
        let layers = arch.devec(&theta).unwrap();
        let back = arch.vec(&layers).unwrap();
        assert_eq!(theta.as_slice(), back.as_slice());
        assert_eq!(theta.len(), arch.param_len());
    }

    fn random_transform(arch: &Architecture, seed: u64) -> TransformSpec {
        let mut rng = rng::seeded(seed);
        let mut mk = |d: usize| {
            let mut buf = alloc::vec![0.0; d * d];
            rng::fill_standard_normal(&mut rng, &mut buf);
            // Shift toward identity to keep the conditioning comfortable.
            DMatrix::identity(d, d) + DMatrix::from_column_slice(d, d, &buf) * 0.3
        };
        let omega: Vec<_> = (0..arch.ell()).map(|i| mk(arch.dims()[i] + 1)).collect();
        let phi: Vec<_> = (0..arch.ell()).map(|j| mk(arch.dims()[j + 1])).collect();
        TransformSpec::new(arch, omega, phi).unwrap()
    }

    #[test]
    fn transform_identity_is_noop() {
        let arch = tiny(&[3, 4, 2], Activation::Tanh, Loss::SquaredError);
        let theta = random_theta(&arch, 8);
        let spec = TransformSpec::identity(&arch);
        let t = transform(&arch, &theta, &spec, TransformDirection::ToDagger).unwrap();
        assert_eq!(theta.as_slice(), t.as_slice());
    }

    #[test]
    fn transform_roundtrip() {
        let arch = tiny(&[3, 4, 2], Activation::Tanh, Loss::SquaredError);
        let theta = random_theta(&arch, 8);
        let spec = random_transform(&arch, 9);
        let fwd = transform(&arch, &theta, &spec, TransformDirection::ToDagger).unwrap();
        let back = transform(&arch, &fwd, &spec, TransformDirection::FromDagger).unwrap();
        assert!((&theta - &back).amax() < 1e-12);
    }

    #[test]
    fn transform_singular_rejected() {
        let arch = tiny(&[2, 2], Activation::Tanh, Loss::SquaredError);
        let omega = alloc::vec![DMatrix::zeros(3, 3)];
        let phi = alloc::vec![DMatrix::identity(2, 2)];
        assert!(matches!(
            TransformSpec::new(&arch, omega, phi),
            Err(CoreError::Singular { .. })
        ));
    }

    #[test]
    fn transformed_forward_matches_original() {
        for (dims, loss) in [
            (alloc::vec![3usize, 4, 3, 2], Loss::SquaredError),
            (alloc::vec![3usize, 4, 3, 3], Loss::SoftmaxCrossEntropy),
        ] {
            let arch = tiny(&dims, Activation::Tanh, loss);
            let theta = random_theta(&arch, 21);
            let spec = random_transform(&arch, 22);
            let x = random_inputs(dims[0], 6, 23);
            let theta_d = transform(&arch, &theta, &spec, TransformDirection::ToDagger).unwrap();
            let rec = forward(&arch, &theta, &x).unwrap();
            let tp = forward_transformed(&arch, &theta_d, &spec, &x).unwrap();
            assert!((rec.output() - tp.record.output()).amax() < 1e-10);
            // abar_i^dagger = Omega_i abar_i and s_i^dagger = Phi_i^-1 s_i
            for i in 0..arch.ell() {
                let expect = &spec.omega[i] * rec.abar(i);
                assert!((tp.record.abar(i) - expect).amax() < 1e-10);
            }
            for j in 0..arch.ell() {
                let si = &spec.phi[j] * tp.record.preactivation(j);
                assert_relative_eq!(si, rec.preactivation(j).clone(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn transformed_gradient_matches_finite_differences() {
        let arch = tiny(&[3, 4, 2], Activation::Tanh, Loss::SquaredError);
        let theta = random_theta(&arch, 31);
        let spec = random_transform(&arch, 32);
        let x = random_inputs(3, 5, 33);
        let y = Targets::Values(random_inputs(2, 5, 34));
        let theta_d = transform(&arch, &theta, &spec, TransformDirection::ToDagger).unwrap();
        let mut tp = forward_transformed(&arch, &theta_d, &spec, &x).unwrap();
        let grad = backward_transformed(&arch, &theta_d, &mut tp, &spec, &y).unwrap();
        // finite differences through the transformed forward pass
        let mut fd = DVector::zeros(theta_d.len());
        let h = 1e-5;
        for i in 0..theta_d.len() {
            let mut tpv = theta_d.clone();
            tpv[i] += h;
            let lp = loss_value(
                &arch,
                &forward_transformed(&arch, &tpv, &spec, &x).unwrap().record,
                &y,
            )
            .unwrap();
            tpv[i] -= 2.0 * h;
            let lm = loss_value(
                &arch,
                &forward_transformed(&arch, &tpv, &spec, &x).unwrap().record,
                &y,
            )
            .unwrap();
            fd[i] = (lp - lm) / (2.0 * h);
        }
        let rel = (&grad - &fd).norm() / fd.norm();
        assert!(rel < 1e-6, "rel err {rel}");
    }
}
