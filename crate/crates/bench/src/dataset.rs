//! Built-in desk-scale problems and the raw dataset file loader.
//!
//! The built-in datasets are generated deterministically (fixed internal
//! seeds), so a problem name alone pins the data: `digits16` is a synthetic
//! 16x16 pseudo-digit 10-class set driving the standard 256-20-20-20-20-20-10
//! tanh/softmax network, `blobs8` is a tiny 3-class set whose network is
//! small enough for dense-Fisher diagnostics, and the `_ae` variants
//! reconstruct their inputs under squared error.
//!
//! User data comes in through `file:<path>` with the format
//! `rows cols targets_cols` on the first line followed by whitespace-
//! separated doubles in row-major order; `targets_cols = 0` means
//! autoencoder (targets are the inputs), `targets_cols = 1` means 0-based
//! class indices, and `targets_cols = cols` means explicit reconstruction
//! targets.

use kfac_core::engine::TrainSet;
use kfac_core::net::{self, Activation, Architecture, Loss, Targets};
use kfac_core::rng::{self, Prng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::fs;
use std::path::Path;

use crate::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Classification,
    Autoencoder,
}

/// A named experiment problem: data plus the network that trains on it.
pub struct Problem {
    pub name: String,
    pub arch: Architecture,
    pub data: TrainSet,
    pub kind: ProblemKind,
}

pub const BUILTIN_PROBLEMS: &[&str] = &["digits16", "digits16_ae", "blobs8", "blobs8_ae"];

const DIGITS_CASES: usize = 3000;
const DIGITS_CLASSES: usize = 10;
const DIGITS_SIDE: usize = 16;

fn bezier_point(p: [(f64, f64); 3], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * p[0].0 + 2.0 * u * t * p[1].0 + t * t * p[2].0,
        u * u * p[0].1 + 2.0 * u * t * p[1].1 + t * t * p[2].1,
    )
}

/// One 16x16 stroke template per class, deterministic in the class index.
fn digit_template(class: usize) -> Vec<f64> {
    let mut rng = rng::seeded(9000 + class as u64);
    let mut img = vec![0.0f64; DIGITS_SIDE * DIGITS_SIDE];
    let sigma = 1.1f64;
    for _ in 0..3 {
        let mut pts = [(0.0, 0.0); 3];
        for p in pts.iter_mut() {
            *p = (rng.random_range(2.0..14.0), rng.random_range(2.0..14.0));
        }
        for step in 0..=24 {
            let t = step as f64 / 24.0;
            let (cx, cy) = bezier_point(pts, t);
            let x0 = (cx - 3.0).max(0.0) as usize;
            let x1 = ((cx + 3.0) as usize).min(DIGITS_SIDE - 1);
            let y0 = (cy - 3.0).max(0.0) as usize;
            let y1 = ((cy + 3.0) as usize).min(DIGITS_SIDE - 1);
            for x in x0..=x1 {
                for y in y0..=y1 {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    img[y * DIGITS_SIDE + x] += (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let max = img.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for v in img.iter_mut() {
        *v /= max;
    }
    img
}

fn shifted_pixel(template: &[f64], x: i64, y: i64) -> f64 {
    if x < 0 || y < 0 || x >= DIGITS_SIDE as i64 || y >= DIGITS_SIDE as i64 {
        0.0
    } else {
        template[y as usize * DIGITS_SIDE + x as usize]
    }
}

/// The synthetic pseudo-digit set: jittered, shifted, noisy class templates.
fn digits16_data() -> (DMatrix<f64>, Vec<usize>) {
    let templates: Vec<Vec<f64>> = (0..DIGITS_CLASSES).map(digit_template).collect();
    let mut rng: Prng = rng::seeded(1234);
    let d = DIGITS_SIDE * DIGITS_SIDE;
    let mut inputs = DMatrix::zeros(d, DIGITS_CASES);
    let mut classes = Vec::with_capacity(DIGITS_CASES);
    let mut noise = vec![0.0f64; d];
    for i in 0..DIGITS_CASES {
        let class = i % DIGITS_CLASSES;
        classes.push(class);
        let dx = rng.random_range(-1i64..=1);
        let dy = rng.random_range(-1i64..=1);
        let scale = rng.random_range(0.9..1.1);
        rng::fill_standard_normal(&mut rng, &mut noise);
        for y in 0..DIGITS_SIDE {
            for x in 0..DIGITS_SIDE {
                let v = scale * shifted_pixel(&templates[class], x as i64 - dx, y as i64 - dy)
                    + 0.05 * noise[y * DIGITS_SIDE + x];
                inputs[(y * DIGITS_SIDE + x, i)] = v.clamp(0.0, 1.0);
            }
        }
    }
    (inputs, classes)
}

const BLOBS_CASES: usize = 600;
const BLOBS_CLASSES: usize = 3;
const BLOBS_DIM: usize = 8;

fn blobs8_data() -> (DMatrix<f64>, Vec<usize>) {
    let centers: Vec<DVector<f64>> = (0..BLOBS_CLASSES)
        .map(|c| {
            let mut rng = rng::seeded(8000 + c as u64);
            DVector::from_fn(BLOBS_DIM, |_, _| rng.random_range(0.1..0.9))
        })
        .collect();
    let mut rng = rng::seeded(4321);
    let mut inputs = DMatrix::zeros(BLOBS_DIM, BLOBS_CASES);
    let mut classes = Vec::with_capacity(BLOBS_CASES);
    let mut noise = vec![0.0f64; BLOBS_DIM];
    for i in 0..BLOBS_CASES {
        let class = i % BLOBS_CLASSES;
        classes.push(class);
        rng::fill_standard_normal(&mut rng, &mut noise);
        for r in 0..BLOBS_DIM {
            inputs[(r, i)] = (centers[class][r] + 0.12 * noise[r]).clamp(0.0, 1.0);
        }
    }
    (inputs, classes)
}

fn classifier_arch(input: usize, hidden: &[usize], classes: usize) -> Architecture {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(classes);
    Architecture::uniform(
        dims,
        Activation::Tanh,
        Activation::Identity,
        Loss::SoftmaxCrossEntropy,
    )
    .expect("valid architecture")
}

fn autoencoder_arch(input: usize, hidden: &[usize]) -> Architecture {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(input);
    Architecture::uniform(
        dims,
        Activation::Tanh,
        Activation::Identity,
        Loss::SquaredError,
    )
    .expect("valid architecture")
}

/// Resolves a problem name: a built-in or `file:<path>`.
pub fn load_problem(name: &str) -> Result<Problem> {
    if let Some(path) = name.strip_prefix("file:") {
        return load_file_problem(name, Path::new(path));
    }
    let (arch, inputs, targets, kind) = match name {
        "digits16" => {
            let (inputs, classes) = digits16_data();
            (
                classifier_arch(256, &[20, 20, 20, 20, 20], DIGITS_CLASSES),
                inputs,
                Targets::Classes(classes),
                ProblemKind::Classification,
            )
        }
        "digits16_ae" => {
            let (inputs, _) = digits16_data();
            (
                autoencoder_arch(256, &[40, 16, 40]),
                inputs.clone(),
                Targets::Values(inputs),
                ProblemKind::Autoencoder,
            )
        }
        "blobs8" => {
            let (inputs, classes) = blobs8_data();
            (
                classifier_arch(BLOBS_DIM, &[6, 5, 4], BLOBS_CLASSES),
                inputs,
                Targets::Classes(classes),
                ProblemKind::Classification,
            )
        }
        "blobs8_ae" => {
            let (inputs, _) = blobs8_data();
            (
                autoencoder_arch(BLOBS_DIM, &[6, 3, 6]),
                inputs.clone(),
                Targets::Values(inputs),
                ProblemKind::Autoencoder,
            )
        }
        other => {
            return Err(BenchError::Dataset(format!(
                "unknown problem {other:?}; try one of {BUILTIN_PROBLEMS:?} or file:<path>"
            )))
        }
    };
    Ok(Problem {
        name: name.to_string(),
        arch,
        data: TrainSet::new(inputs, targets)?,
        kind,
    })
}

fn load_file_problem(name: &str, path: &Path) -> Result<Problem> {
    let text = fs::read_to_string(path)
        .map_err(|e| BenchError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut tokens = text.split_whitespace();
    let mut header = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| BenchError::Dataset(format!("missing {what} in header")))?
            .parse::<usize>()
            .map_err(|e| BenchError::Dataset(format!("bad {what}: {e}")))
    };
    let rows = header("rows")?;
    let cols = header("cols")?;
    let tcols = header("targets_cols")?;
    if rows == 0 || cols == 0 {
        return Err(BenchError::Dataset("empty dataset".into()));
    }
    if tcols != 0 && tcols != 1 && tcols != cols {
        return Err(BenchError::Dataset(format!(
            "targets_cols must be 0 (autoencoder), 1 (class indices), or {cols} (reconstruction targets); got {tcols}"
        )));
    }
    let mut values = Vec::with_capacity(rows * (cols + tcols));
    for tok in tokens {
        values.push(
            tok.parse::<f64>()
                .map_err(|e| BenchError::Dataset(format!("bad value {tok:?}: {e}")))?,
        );
    }
    if values.len() != rows * (cols + tcols) {
        return Err(BenchError::Dataset(format!(
            "expected {} values, found {}",
            rows * (cols + tcols),
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(BenchError::Dataset("non-finite value in dataset".into()));
    }
    let mut inputs = DMatrix::zeros(cols, rows);
    for r in 0..rows {
        for c in 0..cols {
            inputs[(c, r)] = values[r * (cols + tcols) + c];
        }
    }
    let hidden = [20usize, 20, 20, 20, 20];
    let (arch, targets, kind) = match tcols {
        0 => (
            autoencoder_arch(cols, &hidden),
            Targets::Values(inputs.clone()),
            ProblemKind::Autoencoder,
        ),
        1 => {
            let mut classes = Vec::with_capacity(rows);
            for r in 0..rows {
                let v = values[r * (cols + 1) + cols];
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(BenchError::Dataset(format!(
                        "class index {v} is not a non-negative integer"
                    )));
                }
                classes.push(v as usize);
            }
            let nclasses = classes.iter().max().copied().unwrap_or(0) + 1;
            (
                classifier_arch(cols, &hidden, nclasses),
                Targets::Classes(classes),
                ProblemKind::Classification,
            )
        }
        _ => {
            let mut t = DMatrix::zeros(cols, rows);
            for r in 0..rows {
                for c in 0..cols {
                    t[(c, r)] = values[r * (cols + tcols) + cols + c];
                }
            }
            (
                autoencoder_arch(cols, &hidden),
                Targets::Values(t),
                ProblemKind::Autoencoder,
            )
        }
    };
    Ok(Problem {
        name: name.to_string(),
        arch,
        data: TrainSet::new(inputs, targets)?,
        kind,
    })
}

/// Training error of `theta` on the whole set: misclassification fraction
/// for classifiers, mean squared reconstruction error otherwise.
pub fn train_error(problem: &Problem, theta: &DVector<f64>) -> Result<f64> {
    let rec = net::forward(&problem.arch, theta, &problem.data.inputs)?;
    let out = rec.output();
    match (&problem.kind, &problem.data.targets) {
        (ProblemKind::Classification, Targets::Classes(classes)) => {
            let mut wrong = 0usize;
            for (c, &cls) in classes.iter().enumerate() {
                let col = out.column(c);
                let mut best = 0;
                for r in 1..col.len() {
                    if col[r] > col[best] {
                        best = r;
                    }
                }
                if best != cls {
                    wrong += 1;
                }
            }
            Ok(wrong as f64 / classes.len() as f64)
        }
        (_, Targets::Values(y)) => {
            let diff = out - y;
            Ok(diff.column_iter().map(|c| c.norm_squared()).sum::<f64>() / y.ncols() as f64)
        }
        _ => Err(BenchError::Dataset(
            "classification problem without class targets".into(),
        )),
    }
}

/// The reported training error: the minimum over the raw and averaged
/// iterates.
pub fn reported_error(
    problem: &Problem,
    theta: &DVector<f64>,
    averaged: &DVector<f64>,
) -> Result<f64> {
    Ok(train_error(problem, theta)?.min(train_error(problem, averaged)?))
}

/// The training objective (mean loss plus L2 term) at `theta`.
pub fn objective(problem: &Problem, theta: &DVector<f64>, eta: f64) -> Result<f64> {
    let rec = net::forward(&problem.arch, theta, &problem.data.inputs)?;
    let loss = net::loss_value(&problem.arch, &rec, &problem.data.targets)?;
    Ok(loss + 0.5 * eta * theta.norm_squared())
}
