//! Deterministic scalar kernels shared by the losses, the label transfer and
//! the metrics: cosine similarity, a max-shifted softmax and Shannon entropy.

use crate::error::{Error, Result};

/// Floor applied to vector norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a·b / (max(‖a‖,ε)·max(‖b‖,ε))`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine_similarity: dimension mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

#[inline]
pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    cosine_with_norms(a, norm(a), b, norm(b))
}

#[inline]
pub(crate) fn cosine_with_norms(a: &[f64], norm_a: f64, b: &[f64], norm_b: f64) -> f64 {
    let denom = norm_a.max(COSINE_EPS) * norm_b.max(COSINE_EPS);
    (dot(a, b) / denom).clamp(-1.0, 1.0)
}

/// Accumulates `scale * ∂s(a,b)/∂a` into `out`, where `s` is the unclamped
/// cosine similarity with floored norms. Swap the arguments for `∂/∂b`.
#[inline]
pub(crate) fn accumulate_cosine_grad(
    a: &[f64],
    norm_a: f64,
    b: &[f64],
    norm_b: f64,
    sim: f64,
    scale: f64,
    out: &mut [f64],
) {
    let na = norm_a.max(COSINE_EPS);
    let nb = norm_b.max(COSINE_EPS);
    let along_b = scale / (na * nb);
    if norm_a > COSINE_EPS {
        // the norm of `a` only moves the result when it is above the floor
        let along_a = scale * sim / (norm_a * norm_a);
        for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
            *o += along_b * bi - along_a * ai;
        }
    } else {
        for (o, &bi) in out.iter_mut().zip(b) {
            *o += along_b * bi;
        }
    }
}

/// Softmax with the maximum logit subtracted before exponentiation.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::contract("stable_softmax: empty logit vector"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log Σ exp(z)` without overflow.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// `-Σ p log p` in nats, with `0·log 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}
