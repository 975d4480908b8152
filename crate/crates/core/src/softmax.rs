//! Temperature softmax.

use crate::error::{Error, Result};

/// Softmax temperature. Always strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Temperature(value))
        } else {
            Err(Error::InvalidInput(format!(
                "temperature must be positive and finite, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl std::fmt::Display for Temperature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `softmax(z / T)`, stabilized by subtracting the max before exponentiating.
pub fn softmax_t(logits: &[f64], t: Temperature) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
    }
    Ok(softmax_unchecked(logits, t))
}

pub(crate) fn softmax_unchecked(logits: &[f64], t: Temperature) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / t.0).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// Jacobian of `softmax(z / T)` with respect to `z`, given its output `p`:
/// `d p_j / d z_k = p_j (δ_jk - p_k) / T`, row-major `[j][k]`.
pub(crate) fn softmax_jacobian(probs: &[f64], t: Temperature) -> Vec<f64> {
    let n = probs.len();
    let mut jac = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            let delta = if j == k { 1.0 } else { 0.0 };
            jac[j * n + k] = probs[j] * (delta - probs[k]) / t.0;
        }
    }
    jac
}

/// Cross-entropy `-Σ y_j ln p_j`, with `0 ln 0 = 0`.
pub fn cross_entropy(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &p)| -y * if p == 0.0 { f64::MIN_POSITIVE } else { p }.ln())
        .sum()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    cross_entropy(probs, probs)
}
