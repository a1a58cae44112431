//! Pixel-to-prototype contrastive terms (forward: target pixels against
//! source prototypes; backward: source pixels against target prototypes),
//! per-pixel cross-entropy and entropy terms, and the weighted total.
//!
//! Every term is mean-reduced over the pixels that contribute to it and
//! returns its analytical gradient. Contrastive terms differentiate through
//! both the pixel features and the prototypes; callers chain the prototype
//! gradient through [`masked_average_pool_backward`](crate::prototypes::masked_average_pool_backward).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{FeatureGrad, FeatureMap, LabelMap, ProbMap};
use crate::numerics::{accumulate_cosine_grad, cosine_with_norms, log_sum_exp, norm, shannon_entropy};
use crate::prototypes::PrototypeSet;

/// Whether a term had anything to work on this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Ok,
    /// No pixel/prototype pair existed; the term contributes zero.
    NoPairs,
    /// The term is switched off in the current configuration.
    Disabled,
}

impl PairStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PairStatus::Ok => "ok",
            PairStatus::NoPairs => "no_pairs",
            PairStatus::Disabled => "disabled",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// One gradient map per input feature map.
    pub grad_features: Vec<FeatureGrad>,
    /// `∂L/∂ρ(c)` for every class in the prototype set.
    pub grad_protos: BTreeMap<usize, Vec<f64>>,
    pub contributing: usize,
    /// Labelled pixels whose class has no prototype.
    pub skipped: usize,
    pub status: PairStatus,
}

#[derive(Debug, Clone)]
pub struct PixelLossOutput {
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits, one map per input.
    pub grad_logits: Vec<FeatureGrad>,
    pub contributing: usize,
    pub status: PairStatus,
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config("temperature", format!("must be positive and finite, got {tau}")));
    }
    Ok(())
}

fn check_pairs(features: &[FeatureMap], labels: &[LabelMap]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} feature maps vs {} label maps",
            features.len(),
            labels.len()
        )));
    }
    for (f, y) in features.iter().zip(labels) {
        if !f.same_grid(y.height(), y.width()) {
            return Err(Error::contract(format!(
                "features {}x{} vs labels {}x{}",
                f.height(),
                f.width(),
                y.height(),
                y.width()
            )));
        }
    }
    Ok(())
}

/// `−mean_p log softmax_k(s(f(p), ρ(k))/τ)[class(p)]`, the softmax running
/// over exactly the classes present in `protos`.
pub fn pixel_prototype_loss(
    features: &[FeatureMap],
    labels: &[LabelMap],
    protos: &PrototypeSet,
    tau: f64,
) -> Result<ContrastiveOutput> {
    check_temperature(tau)?;
    check_pairs(features, labels)?;
    let mut grad_features: Vec<FeatureGrad> = features
        .iter()
        .map(|f| FeatureMap::zeros(f.height(), f.width(), f.dim()))
        .collect();
    let labeled: usize = labels.iter().map(LabelMap::labeled_count).sum();

    let classes: Vec<usize> = protos.classes().collect();
    let contributing: usize = labels
        .iter()
        .map(|y| (0..y.num_pixels()).filter(|&p| y.get(p).is_some_and(|c| protos.contains(c))).count())
        .sum();
    let mut grad_protos: BTreeMap<usize, Vec<f64>> =
        classes.iter().map(|&c| (c, vec![0.0; protos.dim()])).collect();
    if contributing == 0 {
        return Ok(ContrastiveOutput {
            loss: 0.0,
            grad_features,
            grad_protos,
            contributing: 0,
            skipped: labeled,
            status: PairStatus::NoPairs,
        });
    }
    if let Some(f) = features.iter().find(|f| f.dim() != protos.dim()) {
        return Err(Error::contract(format!(
            "feature dimension {} vs prototype dimension {}",
            f.dim(),
            protos.dim()
        )));
    }

    let vectors: Vec<&[f64]> = classes.iter().map(|&c| protos.get(c).unwrap().vector.as_slice()).collect();
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    let slot_of: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = classes.len();
    let inv_n = 1.0 / contributing as f64;

    let mut sims = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut proto_grads = vec![vec![0.0; protos.dim()]; k];
    let mut total = 0.0;
    for ((f, y), g) in features.iter().zip(labels).zip(grad_features.iter_mut()) {
        for p in 0..f.num_pixels() {
            let Some(slot) = y.get(p).and_then(|c| slot_of.get(&c).copied()) else {
                continue;
            };
            let fp = f.pixel(p);
            let nf = norm(fp);
            for j in 0..k {
                sims[j] = cosine_with_norms(fp, nf, vectors[j], norms[j]);
                logits[j] = sims[j] / tau;
            }
            let lse = log_sum_exp(&logits);
            total += lse - logits[slot];
            let gp = g.pixel_mut(p);
            for j in 0..k {
                let q = (logits[j] - lse).exp();
                let target = if j == slot { 1.0 } else { 0.0 };
                let d_sim = (q - target) * inv_n / tau;
                if d_sim == 0.0 {
                    continue;
                }
                accumulate_cosine_grad(fp, nf, vectors[j], norms[j], sims[j], d_sim, gp);
                accumulate_cosine_grad(vectors[j], norms[j], fp, nf, sims[j], d_sim, &mut proto_grads[j]);
            }
        }
    }
    for (j, c) in classes.iter().enumerate() {
        grad_protos.insert(*c, std::mem::take(&mut proto_grads[j]));
    }
    Ok(ContrastiveOutput {
        loss: total * inv_n,
        grad_features,
        grad_protos,
        contributing,
        skipped: labeled - contributing,
        status: PairStatus::Ok,
    })
}

/// Forward term: target pixels against source prototypes.
pub fn fcl(
    features_t: &FeatureMap,
    labels_t: &LabelMap,
    protos_s: &PrototypeSet,
    tau: f64,
) -> Result<ContrastiveOutput> {
    pixel_prototype_loss(
        std::slice::from_ref(features_t),
        std::slice::from_ref(labels_t),
        protos_s,
        tau,
    )
}

/// Backward term: source pixels against target prototypes.
pub fn bcl(
    features_s: &FeatureMap,
    labels_s: &LabelMap,
    protos_t: &PrototypeSet,
    tau: f64,
) -> Result<ContrastiveOutput> {
    pixel_prototype_loss(
        std::slice::from_ref(features_s),
        std::slice::from_ref(labels_s),
        protos_t,
        tau,
    )
}

/// Mean cross-entropy over labelled pixels; unlabelled pixels are ignored.
pub fn segmentation_loss(probs: &ProbMap, labels: &LabelMap) -> Result<PixelLossOutput> {
    segmentation_loss_batch(std::slice::from_ref(probs), std::slice::from_ref(labels))
}

pub fn segmentation_loss_batch(probs: &[ProbMap], labels: &[LabelMap]) -> Result<PixelLossOutput> {
    if probs.len() != labels.len() {
        return Err(Error::contract("segmentation_loss: batch length mismatch"));
    }
    for (pm, y) in probs.iter().zip(labels) {
        if pm.height() != y.height() || pm.width() != y.width() || pm.classes() != y.classes() {
            return Err(Error::contract("segmentation_loss: probabilities and labels differ in shape"));
        }
    }
    let mut grads: Vec<FeatureGrad> = probs
        .iter()
        .map(|pm| FeatureMap::zeros(pm.height(), pm.width(), pm.classes()))
        .collect();
    let n: usize = labels.iter().map(LabelMap::labeled_count).sum();
    if n == 0 {
        return Ok(PixelLossOutput {
            loss: 0.0,
            grad_logits: grads,
            contributing: 0,
            status: PairStatus::NoPairs,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for ((pm, y), g) in probs.iter().zip(labels).zip(grads.iter_mut()) {
        for p in 0..pm.num_pixels() {
            let Some(c) = y.get(p) else { continue };
            let row = pm.pixel(p);
            total -= row[c].max(f64::MIN_POSITIVE).ln();
            for (j, (o, &q)) in g.pixel_mut(p).iter_mut().zip(row).enumerate() {
                *o = (q - if j == c { 1.0 } else { 0.0 }) * inv_n;
            }
        }
    }
    Ok(PixelLossOutput {
        loss: total * inv_n,
        grad_logits: grads,
        contributing: n,
        status: PairStatus::Ok,
    })
}

/// Mean per-pixel Shannon entropy of the predictions.
pub fn entropy_loss(probs: &ProbMap) -> Result<PixelLossOutput> {
    entropy_loss_batch(std::slice::from_ref(probs))
}

pub fn entropy_loss_batch(probs: &[ProbMap]) -> Result<PixelLossOutput> {
    let n: usize = probs.iter().map(ProbMap::num_pixels).sum();
    if n == 0 {
        return Err(Error::contract("entropy_loss: empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for pm in probs {
        let mut g = FeatureMap::zeros(pm.height(), pm.width(), pm.classes());
        for p in 0..pm.num_pixels() {
            let row = pm.pixel(p);
            let h = shannon_entropy(row);
            total += h;
            // ∂H/∂z_j = −p_j (log p_j + H)
            for (o, &q) in g.pixel_mut(p).iter_mut().zip(row) {
                if q > 0.0 {
                    *o = -q * (q.ln() + h) * inv_n;
                }
            }
        }
        grads.push(g);
    }
    Ok(PixelLossOutput {
        loss: total * inv_n,
        grad_logits: grads,
        contributing: n,
        status: PairStatus::Ok,
    })
}

/// Balance factors of the six terms plus the contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg_source: f64,
    pub seg_target: f64,
    pub ent_source: f64,
    pub ent_target: f64,
    pub fcl: f64,
    pub bcl: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg_source: 1.0,
            seg_target: 1.0,
            ent_source: 0.0,
            ent_target: 0.1,
            fcl: 0.5,
            bcl: 0.5,
            temperature: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("loss_weights.seg_source", self.seg_source),
            ("loss_weights.seg_target", self.seg_target),
            ("loss_weights.ent_source", self.ent_source),
            ("loss_weights.ent_target", self.ent_target),
            ("loss_weights.fcl", self.fcl),
            ("loss_weights.bcl", self.bcl),
        ];
        for (field, w) in named {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(field, format!("must be a nonnegative number, got {w}")));
            }
        }
        check_temperature(self.temperature)
            .map_err(|_| Error::config("loss_weights.temperature", "must be positive and finite"))
    }
}

/// Raw (unweighted) values of the six terms at one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub seg_source: f64,
    pub seg_target: f64,
    pub ent_source: f64,
    pub ent_target: f64,
    pub fcl: f64,
    pub bcl: f64,
}

/// Pixel counts behind each term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub seg_source: usize,
    pub seg_target: usize,
    pub ent_source: usize,
    pub ent_target: usize,
    pub fcl: usize,
    pub bcl: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub counts: LossCounts,
    pub base: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.base.is_finite() && self.total.is_finite()
    }
}

/// `base = Σ λ·(seg, ent terms)`, `total = base + λ_FC·L_FC + λ_BC·L_BC`.
pub fn total_loss(parts: &LossParts, counts: LossCounts, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let base = weights.seg_source * parts.seg_source
        + weights.seg_target * parts.seg_target
        + weights.ent_source * parts.ent_source
        + weights.ent_target * parts.ent_target;
    let total = base + weights.fcl * parts.fcl + weights.bcl * parts.bcl;
    Ok(LossBreakdown {
        parts: *parts,
        counts,
        base,
        total,
    })
}
