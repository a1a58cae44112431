//! Target pseudo labels.
//!
//! * static: confident predictions of the segmentation head, a fixed fraction
//!   of each predicted class, refreshed rarely;
//! * dynamic: nonparametric transfer that gives a target pixel the class of
//!   its most similar calibrated source prototype when the cosine similarity
//!   clears a threshold, recomputed every step;
//! * hybrid: dynamic where available, static otherwise.

use serde::{Deserialize, Serialize};

use crate::contrastive::PairStatus;
use crate::error::{Error, Result};
use crate::maps::{FeatureMap, LabelMap, ProbMap};
use crate::numerics::{cosine_with_norms, norm};
use crate::prototypes::PrototypeSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StaticLabelConfig {
    /// Fraction `q` of each predicted class kept, most confident first.
    pub fraction: f64,
    /// Adaptation iterations between refreshes.
    pub refresh_interval: usize,
}

impl Default for StaticLabelConfig {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            refresh_interval: 100,
        }
    }
}

impl StaticLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::config(
                "static_labels.fraction",
                format!("must lie in [0, 1], got {}", self.fraction),
            ));
        }
        if self.refresh_interval == 0 {
            return Err(Error::config("static_labels.refresh_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// `⌈q·n⌉`, ignoring floating-point dust so that e.g. `0.2·5` keeps 1 pixel.
pub fn static_quota(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `⌈q·|S_c|⌉` most confident pixels of every argmax class set `S_c`.
/// Confidence ties are broken by pixel index.
pub fn static_labels(probs: &ProbMap, cfg: &StaticLabelConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let classes = probs.classes();
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    for p in 0..probs.num_pixels() {
        let (c, conf) = probs.argmax(p);
        by_class[c].push((conf, p));
    }
    let mut out = LabelMap::unlabeled(probs.height(), probs.width(), classes);
    for (c, mut members) in by_class.into_iter().enumerate() {
        let keep = static_quota(cfg.fraction, members.len());
        members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, p) in members.iter().take(keep) {
            out.set(p, Some(c));
        }
    }
    Ok(out)
}

/// Result of nonparametric label transfer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicLabels {
    pub labels: LabelMap,
    pub status: PairStatus,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::config(
            "dynamic_threshold",
            format!("must lie strictly inside (-1, 1), got {threshold}"),
        ));
    }
    Ok(())
}

/// Argmax over the prototype classes of `s(f(p), ρ(c))`, kept only when the
/// winning similarity is strictly above `threshold`. Ties go to the lowest class.
pub fn dynamic_labels(
    features: &FeatureMap,
    calibrated: &PrototypeSet,
    threshold: f64,
    classes: usize,
) -> Result<DynamicLabels> {
    check_threshold(threshold)?;
    let mut labels = LabelMap::unlabeled(features.height(), features.width(), classes);
    if calibrated.is_empty() {
        return Ok(DynamicLabels {
            labels,
            status: PairStatus::NoPairs,
        });
    }
    if calibrated.dim() != features.dim() {
        return Err(Error::contract("dynamic_labels: prototype and feature dimensions differ"));
    }
    if let Some(c) = calibrated.classes().find(|&c| c >= classes) {
        return Err(Error::contract(format!("prototype class {c} outside {classes} classes")));
    }
    let protos: Vec<(usize, &[f64], f64)> = calibrated
        .iter()
        .map(|(c, p)| (c, p.vector.as_slice(), norm(&p.vector)))
        .collect();
    for p in 0..features.num_pixels() {
        let fp = features.pixel(p);
        let nf = norm(fp);
        let mut best: Option<(usize, f64)> = None;
        for &(c, v, nv) in &protos {
            let s = cosine_with_norms(fp, nf, v, nv);
            if best.map_or(true, |(_, bs)| s > bs) {
                best = Some((c, s));
            }
        }
        if let Some((c, s)) = best {
            if s > threshold {
                labels.set(p, Some(c));
            }
        }
    }
    Ok(DynamicLabels {
        labels,
        status: PairStatus::Ok,
    })
}

/// Dynamic label if present, else static label if present, else unlabelled.
pub fn hybrid_fuse(dynamic: &LabelMap, fixed: &LabelMap) -> Result<LabelMap> {
    if !dynamic.same_shape(fixed) {
        return Err(Error::contract("hybrid_fuse: label maps differ in shape or class count"));
    }
    Ok(LabelMap::from_fn(
        dynamic.height(),
        dynamic.width(),
        dynamic.classes(),
        |p| dynamic.get(p).or_else(|| fixed.get(p)),
    ))
}

/// Running counts behind [`PseudoLabelReport`], summable over many images.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelTally {
    pub pixels: usize,
    pub labeled: usize,
    pub correct: usize,
    pub gt_per_class: Vec<usize>,
    pub labeled_per_class: Vec<usize>,
}

impl LabelTally {
    pub fn add(&mut self, labels: &LabelMap, ground_truth: &LabelMap) -> Result<()> {
        if labels.height() != ground_truth.height() || labels.width() != ground_truth.width() {
            return Err(Error::contract("label_metrics: label map and ground truth differ in size"));
        }
        let classes = ground_truth.classes().max(labels.classes());
        if self.gt_per_class.len() < classes {
            self.gt_per_class.resize(classes, 0);
            self.labeled_per_class.resize(classes, 0);
        }
        for p in 0..labels.num_pixels() {
            let Some(truth) = ground_truth.get(p) else {
                return Err(Error::contract("label_metrics: ground truth must be fully labelled"));
            };
            self.pixels += 1;
            self.gt_per_class[truth] += 1;
            if let Some(c) = labels.get(p) {
                self.labeled += 1;
                self.labeled_per_class[truth] += 1;
                if c == truth {
                    self.correct += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> PseudoLabelReport {
        let density = if self.pixels == 0 {
            0.0
        } else {
            self.labeled as f64 / self.pixels as f64
        };
        let (accuracy, accuracy_defined) = if self.labeled == 0 {
            (1.0, false)
        } else {
            (self.correct as f64 / self.labeled as f64, true)
        };
        let per_class_density = self
            .gt_per_class
            .iter()
            .zip(&self.labeled_per_class)
            .map(|(&gt, &lab)| if gt == 0 { 0.0 } else { lab as f64 / gt as f64 })
            .collect();
        PseudoLabelReport {
            density,
            accuracy,
            accuracy_defined,
            per_class_density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    /// Labelled pixels over all pixels.
    pub density: f64,
    /// Correct labelled pixels over labelled pixels; 1.0 when nothing is labelled.
    pub accuracy: f64,
    /// False when no pixel was labelled and `accuracy` is the placeholder 1.0.
    pub accuracy_defined: bool,
    /// Per ground-truth class: fraction of that class's pixels carrying a label.
    pub per_class_density: Vec<f64>,
}

pub fn label_metrics(labels: &LabelMap, ground_truth: &LabelMap) -> Result<PseudoLabelReport> {
    let mut tally = LabelTally::default();
    tally.add(labels, ground_truth)?;
    Ok(tally.report())
}
