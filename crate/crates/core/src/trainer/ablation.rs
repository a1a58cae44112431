//! The five-arm ablation: baseline, +FCL, +FCL+BCL, +dynamic labels without
//! calibration, +dynamic labels with calibration.

use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::eval::{evaluate, feature_alignment, AlignmentStats, LabelSnapshot};
use super::{warmup, TrainConfig, Trainer};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Baseline,
    Fcl,
    FclBcl,
    DynamicUncalibrated,
    DynamicCalibrated,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Baseline,
        Arm::Fcl,
        Arm::FclBcl,
        Arm::DynamicUncalibrated,
        Arm::DynamicCalibrated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Fcl => "fcl",
            Arm::FclBcl => "fcl_bcl",
            Arm::DynamicUncalibrated => "dynamic_uncalibrated",
            Arm::DynamicCalibrated => "dynamic_calibrated",
        }
    }

    /// Overrides the ablation switches of `base`.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (fcl, bcl, dynamic, calibration) = match self {
            Arm::Baseline => (false, false, false, false),
            Arm::Fcl => (true, false, false, false),
            Arm::FclBcl => (true, true, false, false),
            Arm::DynamicUncalibrated => (true, true, true, false),
            Arm::DynamicCalibrated => (true, true, true, true),
        };
        cfg.ablation.use_fcl = fcl;
        cfg.ablation.use_bcl = bcl;
        cfg.ablation.use_dynamic = dynamic;
        cfg.ablation.use_calibration = calibration;
        cfg
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Arm::ALL.iter().map(|a| a.name()).collect();
                Error::config("arm", format!("unknown arm {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationOptions {
    /// Take a pseudo-label snapshot over the target set halfway through training.
    pub mid_snapshot: bool,
    /// Scenes per domain and pixels per domain for the alignment statistic.
    pub alignment_scenes: usize,
    pub alignment_pixels: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            mid_snapshot: true,
            alignment_scenes: 20,
            alignment_pixels: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub miou: f64,
    pub iou: Vec<Option<f64>>,
    pub alignment: AlignmentStats,
    pub mid_labels: Option<LabelSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seeds: usize,
    pub miou_mean: f64,
    pub miou_sd: f64,
    pub alignment_gap_mean: f64,
    pub alignment_gap_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub runs: Vec<ArmRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, arm: Arm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn runs_of(&self, arm: Arm) -> impl Iterator<Item = &ArmRun> {
        self.runs.iter().filter(move |r| r.arm == arm)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One adaptation run from warmed-up parameters.
pub fn run_arm(
    base: &TrainConfig,
    data: &Dataset,
    arm: Arm,
    seed: u64,
    warm: EncoderParams,
    options: &AblationOptions,
) -> Result<ArmRun> {
    let mut cfg = arm.apply(base);
    cfg.seed = seed;
    let eval = data.evaluation_handle();
    let mut trainer = Trainer::from_params(cfg, data.training_view(), warm)?;
    let half = trainer.config().iterations / 2;
    let mut mid_labels = None;
    if options.mid_snapshot && half == 0 {
        mid_labels = Some(trainer.label_snapshot(&eval, None)?);
    }
    trainer.run(None, |t, _| {
        if options.mid_snapshot && t.state().iteration == half {
            mid_labels = Some(t.label_snapshot(&eval, None)?);
        }
        Ok(())
    })?;
    let params = &trainer.state().params;
    let report = evaluate(params, &eval)?;
    let alignment = feature_alignment(params, &eval, options.alignment_scenes, options.alignment_pixels, seed)?;
    Ok(ArmRun {
        arm,
        seed,
        miou: report.miou,
        iou: report.iou,
        alignment,
        mid_labels,
    })
}

/// Runs every `(arm, seed)` pair. Warmups are shared per seed; runs execute
/// in parallel but results come back in `(arm, seed)` order.
pub fn run_ablation(
    base: &TrainConfig,
    data: &Dataset,
    arms: &[Arm],
    seeds: &[u64],
    options: &AblationOptions,
) -> Result<AblationReport> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation", "need at least one arm and one seed"));
    }
    base.validate()?;
    let view = data.training_view();
    let warm: Vec<EncoderParams> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            warmup(&cfg, &view)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(Arm, usize)> = arms.iter().flat_map(|&a| (0..seeds.len()).map(move |s| (a, s))).collect();
    let runs: Vec<ArmRun> = jobs
        .par_iter()
        .map(|&(arm, s)| run_arm(base, data, arm, seeds[s], warm[s].clone(), options))
        .collect::<Result<_>>()?;
    let rows = arms
        .iter()
        .map(|&arm| {
            let mious: Vec<f64> = runs.iter().filter(|r| r.arm == arm).map(|r| r.miou).collect();
            let gaps: Vec<f64> = runs.iter().filter(|r| r.arm == arm).map(|r| r.alignment.gap).collect();
            let (miou_mean, miou_sd) = mean_sd(&mious);
            let (alignment_gap_mean, alignment_gap_sd) = mean_sd(&gaps);
            AblationRow {
                arm,
                seeds: mious.len(),
                miou_mean,
                miou_sd,
                alignment_gap_mean,
                alignment_gap_sd,
            }
        })
        .collect();
    Ok(AblationReport { runs, rows })
}
