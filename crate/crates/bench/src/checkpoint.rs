//! Plain-text parameter checkpoints.
//!
//! Format:
//!
//! ```text
//! kfac-checkpoint v1
//! problem <name>
//! loss <squared_error|softmax_cross_entropy>
//! activations <tanh|logistic|identity> ...
//! dims <d0> <d1> ...
//! params <count>
//! <count whitespace-separated doubles>
//! ```

use kfac_core::net::{Activation, Architecture, Loss};
use nalgebra::DVector;
use std::fs;
use std::path::Path;

use crate::{BenchError, Result};

pub struct Checkpoint {
    pub problem: String,
    pub arch: Architecture,
    pub theta: DVector<f64>,
}

fn loss_name(loss: Loss) -> &'static str {
    match loss {
        Loss::SquaredError => "squared_error",
        Loss::SoftmaxCrossEntropy => "softmax_cross_entropy",
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Logistic => "logistic",
        Activation::Identity => "identity",
    }
}

pub fn write(path: &Path, problem: &str, arch: &Architecture, theta: &DVector<f64>) -> Result<()> {
    let mut text = String::from("kfac-checkpoint v1\n");
    text.push_str(&format!("problem {problem}\n"));
    text.push_str(&format!("loss {}\n", loss_name(arch.loss())));
    text.push_str("activations");
    for j in 0..arch.ell() {
        text.push(' ');
        text.push_str(activation_name(arch.activation(j)));
    }
    text.push('\n');
    text.push_str("dims");
    for d in arch.dims() {
        text.push_str(&format!(" {d}"));
    }
    text.push('\n');
    text.push_str(&format!("params {}\n", theta.len()));
    for (i, v) in theta.iter().enumerate() {
        text.push_str(&format!("{v}"));
        text.push(if (i + 1) % 6 == 0 { '\n' } else { ' ' });
    }
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .map_err(|e| BenchError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let bad = |msg: &str| BenchError::Checkpoint(msg.to_string());
    if lines.next().map(str::trim) != Some("kfac-checkpoint v1") {
        return Err(bad("missing or unsupported header"));
    }
    let mut problem = None;
    let mut loss = None;
    let mut activations: Option<Vec<Activation>> = None;
    let mut dims: Option<Vec<usize>> = None;
    let mut count = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("problem ") {
            problem = Some(rest.to_string());
        } else if let Some(rest) = line.strip_prefix("loss ") {
            loss = Some(match rest {
                "squared_error" => Loss::SquaredError,
                "softmax_cross_entropy" => Loss::SoftmaxCrossEntropy,
                other => return Err(bad(&format!("unknown loss {other:?}"))),
            });
        } else if let Some(rest) = line.strip_prefix("activations") {
            let acts = rest
                .split_whitespace()
                .map(|t| match t {
                    "tanh" => Ok(Activation::Tanh),
                    "logistic" => Ok(Activation::Logistic),
                    "identity" => Ok(Activation::Identity),
                    other => Err(bad(&format!("unknown activation {other:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            activations = Some(acts);
        } else if let Some(rest) = line.strip_prefix("dims") {
            let d = rest
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| bad(&format!("bad dim: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            dims = Some(d);
        } else if let Some(rest) = line.strip_prefix("params ") {
            count = Some(
                rest.parse::<usize>()
                    .map_err(|e| bad(&format!("bad param count: {e}")))?,
            );
            break;
        }
    }
    let problem = problem.ok_or_else(|| bad("missing problem line"))?;
    let loss = loss.ok_or_else(|| bad("missing loss line"))?;
    let activations = activations.ok_or_else(|| bad("missing activations line"))?;
    let dims = dims.ok_or_else(|| bad("missing dims line"))?;
    let count = count.ok_or_else(|| bad("missing params line"))?;
    let arch = Architecture::new(dims, activations, loss)?;
    if arch.param_len() != count {
        return Err(bad(&format!(
            "param count {count} does not match architecture ({})",
            arch.param_len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for tok in lines.flat_map(str::split_whitespace) {
        values.push(
            tok.parse::<f64>()
                .map_err(|e| bad(&format!("bad parameter value {tok:?}: {e}")))?,
        );
    }
    if values.len() != count {
        return Err(bad(&format!(
            "expected {count} parameters, found {}",
            values.len()
        )));
    }
    Ok(Checkpoint {
        problem,
        arch,
        theta: DVector::from_vec(values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use kfac_core::net;

    #[test]
    fn roundtrip_preserves_bits() {
        let arch = Architecture::uniform(
            vec![3, 4, 2],
            Activation::Tanh,
            Activation::Identity,
            Loss::SquaredError,
        )
        .unwrap();
        let theta = net::init_sparse(&arch, 3, 2, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        write(&path, "blobs8_ae", &arch, &theta).unwrap();
        let ck = read(&path).unwrap();
        assert_eq!(ck.problem, "blobs8_ae");
        assert_eq!(ck.arch, arch);
        assert_eq!(ck.theta.as_slice(), theta.as_slice());
    }

    #[test]
    fn rejects_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(read(&path).is_err());
        std::fs::write(
            &path,
            "kfac-checkpoint v1\nproblem x\nloss squared_error\nactivations tanh\ndims 2 2\nparams 99\n1 2 3\n",
        )
        .unwrap();
        assert!(read(&path).is_err());
    }
}
