//! Dense `f64` tensors and the reverse-mode tape every trainable piece of
//! the crate is built on.

mod tape;
mod tensor;

pub use tape::{softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Floor applied inside every logarithm and the minimum admissible norm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: degenerate input ({detail})")]
    Degenerate { op: &'static str, detail: String },
}

/// Cosine similarity `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::ShapeMismatch {
            op: "cosine_sim",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < LOG_EPS || nb < LOG_EPS {
        return Err(KernelError::Degenerate {
            op: "cosine_sim",
            detail: format!("norms {na:e} and {nb:e}"),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `softmax(gamma · logits)`, stabilised by subtracting the maximum.
pub fn softmax_scaled(logits: &[f64], gamma: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&x| gamma * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (gamma * x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at the given
/// point. The result is `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, params: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut point = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + step;
        let (up, _) = f(&point);
        point[i] = orig - step;
        let (down, _) = f(&point);
        point[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
