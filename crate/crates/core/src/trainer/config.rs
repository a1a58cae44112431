use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::LossWeights;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pseudo::StaticLabelConfig;
use crate::synth::{DomainShift, SceneSpec};

/// Where a hyperparameter value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Follows the published training schedule, scaled to desk size.
    PublishedSchedule,
    /// Not published; chosen for this implementation.
    ImplementationDefault,
    /// Belongs to the synthetic benchmark or tooling, not to the method.
    Harness,
}

/// Which pixels build an instance prototype when the batch holds several images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypePooling {
    /// One masked average over the whole batch.
    Batch,
    /// Source image `i` is paired with target image `i`; each pair pools and
    /// contrasts on its own.
    PerImage,
}

/// Candidate classes in the contrastive softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxSupport {
    /// Only classes with an instance prototype this step.
    Present,
    /// Every initialised class: instance prototype if present, else the bank entry.
    AllClassesWithBank,
}

/// Labels behind the target segmentation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSegLabels {
    Hybrid,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub use_fcl: bool,
    pub use_bcl: bool,
    pub use_dynamic: bool,
    pub use_calibration: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            use_fcl: true,
            use_bcl: true,
            use_dynamic: true,
            use_calibration: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    pub flip: bool,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flip: true,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            flip: false,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub shift: DomainShift,
    pub source_scenes: usize,
    pub target_scenes: usize,
    pub eval_scenes: usize,
    /// Sampling weight of source scenes that contain the rare class; 1 disables.
    pub rare_oversampling: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            shift: DomainShift::default(),
            source_scenes: 200,
            target_scenes: 200,
            eval_scenes: 50,
            rare_oversampling: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Seeds used by `run_ablation` when none are given explicitly.
    pub ablation_seeds: Vec<u64>,
    /// Source-only iterations before adaptation starts.
    pub warmup_iterations: usize,
    pub warmup_lr: f64,
    /// Weight of a source-only pixel-prototype term during warmup (source
    /// pixels against source prototypes of the same batch); 0 disables.
    pub warmup_contrastive: f64,
    /// Adaptation iterations.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Global L2 bound on each parameter gradient before the SGD step; 0 disables.
    pub grad_clip_norm: f64,
    /// EMA momentum of both prototype banks.
    pub ema_momentum: f64,
    /// Cosine threshold for dynamic labels.
    pub dynamic_threshold: f64,
    pub loss_weights: LossWeights,
    pub static_labels: StaticLabelConfig,
    pub ablation: AblationSwitches,
    pub prototype_pooling: PrototypePooling,
    pub softmax_support: SoftmaxSupport,
    pub target_seg_labels: TargetSegLabels,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub augmentation: Augmentation,
    /// Adaptation iterations between evaluations; 0 disables.
    pub eval_interval: usize,
    /// Adaptation iterations between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Pixels per domain sampled for the alignment statistic in step records.
    pub alignment_pixels: usize,
    /// Pixels per domain written to the embedding export.
    pub embedding_pixels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation_seeds: vec![0, 1, 2],
            warmup_iterations: 1000,
            warmup_lr: 0.02,
            warmup_contrastive: 0.5,
            iterations: 3000,
            batch_size: 4,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            grad_clip_norm: 1.0,
            ema_momentum: 0.99,
            dynamic_threshold: 0.75,
            loss_weights: LossWeights::default(),
            static_labels: StaticLabelConfig {
                fraction: 0.5,
                refresh_interval: 300,
            },
            ablation: AblationSwitches::default(),
            prototype_pooling: PrototypePooling::Batch,
            softmax_support: SoftmaxSupport::Present,
            target_seg_labels: TargetSegLabels::Hybrid,
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            augmentation: Augmentation::default(),
            eval_interval: 500,
            checkpoint_interval: 1000,
            alignment_pixels: 64,
            embedding_pixels: 500,
        }
    }
}

/// Provenance of every tunable field, keyed by its JSON path.
pub const PROVENANCE: &[(&str, Provenance)] = &[
    ("iterations", Provenance::PublishedSchedule),
    ("batch_size", Provenance::PublishedSchedule),
    ("lr", Provenance::ImplementationDefault),
    ("momentum", Provenance::PublishedSchedule),
    ("weight_decay", Provenance::PublishedSchedule),
    ("poly_power", Provenance::PublishedSchedule),
    ("grad_clip_norm", Provenance::ImplementationDefault),
    ("static_labels.refresh_interval", Provenance::PublishedSchedule),
    ("augmentation", Provenance::PublishedSchedule),
    ("ema_momentum", Provenance::ImplementationDefault),
    ("dynamic_threshold", Provenance::ImplementationDefault),
    ("loss_weights", Provenance::ImplementationDefault),
    ("loss_weights.temperature", Provenance::ImplementationDefault),
    ("static_labels.fraction", Provenance::ImplementationDefault),
    ("prototype_pooling", Provenance::ImplementationDefault),
    ("softmax_support", Provenance::ImplementationDefault),
    ("target_seg_labels", Provenance::ImplementationDefault),
    ("warmup_iterations", Provenance::ImplementationDefault),
    ("warmup_lr", Provenance::ImplementationDefault),
    ("warmup_contrastive", Provenance::ImplementationDefault),
    ("data.rare_oversampling", Provenance::ImplementationDefault),
    ("seed", Provenance::Harness),
    ("ablation_seeds", Provenance::Harness),
    ("ablation", Provenance::Harness),
    ("encoder", Provenance::Harness),
    ("data", Provenance::Harness),
    ("eval_interval", Provenance::Harness),
    ("checkpoint_interval", Provenance::Harness),
    ("alignment_pixels", Provenance::Harness),
    ("embedding_pixels", Provenance::Harness),
];

/// Longest matching prefix in [`PROVENANCE`].
pub fn provenance(field: &str) -> Option<Provenance> {
    PROVENANCE
        .iter()
        .filter(|(key, _)| field == *key || field.starts_with(&format!("{key}.")))
        .max_by_key(|(key, _)| key.len())
        .map(|(_, p)| *p)
}

/// Removes `//` comments outside string literals.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_string = false;
        let mut escaped = false;
        let mut cut = line.len();
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
            } else if b == b'"' {
                in_string = true;
            } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                cut = i;
                break;
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&strip_comments(text)).map_err(|e| {
            let message = e.to_string();
            // serde reports unknown or mistyped keys with a position; keep it
            Error::config("config", message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn classes(&self) -> usize {
        self.data.scene.classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.warmup_contrastive.is_finite() && self.warmup_contrastive >= 0.0) {
            return Err(Error::config("warmup_contrastive", "must be nonnegative"));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm >= 0.0) {
            return Err(Error::config("grad_clip_norm", "must be nonnegative"));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return Err(Error::config("poly_power", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("ema_momentum", "must lie in [0, 1]"));
        }
        if !(self.dynamic_threshold > -1.0 && self.dynamic_threshold < 1.0) {
            return Err(Error::config("dynamic_threshold", "must lie strictly inside (-1, 1)"));
        }
        self.loss_weights.validate()?;
        self.static_labels.validate()?;
        self.encoder.validate()?;
        self.data.scene.validate()?;
        self.data.shift.validate(self.classes())?;
        if self.data.source_scenes == 0 || self.data.target_scenes == 0 {
            return Err(Error::config("data", "need at least one source and one target scene"));
        }
        if !(self.data.rare_oversampling.is_finite() && self.data.rare_oversampling >= 1.0) {
            return Err(Error::config("data.rare_oversampling", "must be at least 1"));
        }
        let a = &self.augmentation;
        if !(a.scale_min > 0.0 && a.scale_min <= a.scale_max && a.scale_max.is_finite()) {
            return Err(Error::config("augmentation", "need 0 < scale_min <= scale_max"));
        }
        Ok(())
    }

    /// A small, fast preset: 32×32 scenes, batch 2, a few hundred iterations.
    pub fn desk_preset() -> Self {
        Self {
            warmup_iterations: 300,
            iterations: 600,
            batch_size: 2,
            dynamic_threshold: 0.97,
            static_labels: StaticLabelConfig {
                fraction: 0.2,
                refresh_interval: 100,
            },
            data: DataConfig {
                scene: SceneSpec {
                    height: 32,
                    width: 32,
                    ..SceneSpec::default()
                },
                source_scenes: 100,
                target_scenes: 100,
                eval_scenes: 30,
                ..DataConfig::default()
            },
            eval_interval: 0,
            checkpoint_interval: 0,
            ..Self::default()
        }
    }
}
