//! Metrics that need target ground truth: mIoU, cross-domain feature
//! alignment, and pseudo-label quality over the whole target training set.

use rand::Rng;
use serde::Serialize;

use super::{similarity_stats, Trainer};
use crate::encoder::{forward, EncoderParams};
use crate::error::{Error, Result};
use crate::maps::{FeatureMap, LabelMap};
use crate::prototypes::{calibrate, domain_bias, masked_average_pool_batch, PrototypeSet};
use crate::pseudo::{dynamic_labels, hybrid_fuse, LabelTally, PseudoLabelReport};
use crate::rng::{keyed_rng, Purpose};
use crate::synth::EvalHandle;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// `confusion[truth][prediction]` pixel counts.
    pub confusion: Vec<Vec<u64>>,
    /// IoU per class; `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn accumulate_confusion(prediction: &LabelMap, truth: &LabelMap, confusion: &mut [Vec<u64>]) -> Result<()> {
    if prediction.height() != truth.height() || prediction.width() != truth.width() {
        return Err(Error::contract("confusion: prediction and ground truth differ in size"));
    }
    for p in 0..truth.num_pixels() {
        let t = truth.get(p).ok_or_else(|| Error::contract("confusion: ground truth must be fully labelled"))?;
        if let Some(c) = prediction.get(p) {
            confusion[t][c] += 1;
        }
    }
    Ok(())
}

/// `IoU_c = TP/(TP+FP+FN)`, averaged over classes that occur in the ground truth.
pub fn iou_from_confusion(confusion: &[Vec<u64>]) -> EvalReport {
    let c = confusion.len();
    let iou: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let gt: u64 = confusion[k].iter().sum();
            if gt == 0 {
                return None;
            }
            let tp = confusion[k][k];
            let fp: u64 = (0..c).filter(|&t| t != k).map(|t| confusion[t][k]).sum();
            Some(tp as f64 / (gt + fp) as f64)
        })
        .collect();
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    EvalReport {
        confusion: confusion.to_vec(),
        iou,
        miou,
    }
}

/// Predictions are upsampled to image resolution before scoring.
pub fn predict(params: &EncoderParams, image: &FeatureMap) -> Result<LabelMap> {
    let out = forward(params, image)?;
    Ok(out.probs.prediction().resample_nearest(image.height(), image.width()))
}

/// mIoU over the first `limit` evaluation scenes (all when `None`).
pub fn evaluate_subset(params: &EncoderParams, eval: &EvalHandle, limit: Option<usize>) -> Result<EvalReport> {
    let c = eval.classes();
    let n = limit.map_or(eval.num_eval(), |l| l.min(eval.num_eval()));
    let mut confusion = vec![vec![0u64; c]; c];
    for i in 0..n {
        let (image, truth) = eval.eval_scene(i);
        accumulate_confusion(&predict(params, image)?, truth, &mut confusion)?;
    }
    Ok(iou_from_confusion(&confusion))
}

pub fn evaluate(params: &EncoderParams, eval: &EvalHandle) -> Result<EvalReport> {
    evaluate_subset(params, eval, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentStats {
    pub same_class: f64,
    pub different_class: f64,
    /// `same_class − different_class`.
    pub gap: f64,
}

fn labelled_pixels(params: &EncoderParams, image: &FeatureMap, truth: &LabelMap) -> Result<(FeatureMap, LabelMap)> {
    let out = forward(params, image)?;
    let y = truth.resample_nearest(out.features.height(), out.features.width());
    Ok((out.features, y))
}

/// Cross-domain cosine statistics between `pixels` sampled source pixels and
/// `pixels` sampled evaluation-set target pixels, over the first `scenes`
/// scenes of each domain.
pub fn feature_alignment(
    params: &EncoderParams,
    eval: &EvalHandle,
    scenes: usize,
    pixels: usize,
    seed: u64,
) -> Result<AlignmentStats> {
    let ns = scenes.min(eval.num_source());
    let nt = scenes.min(eval.num_eval());
    if ns == 0 || nt == 0 || pixels == 0 {
        return Err(Error::config("alignment", "need at least one scene and one pixel per domain"));
    }
    let source: Vec<(FeatureMap, LabelMap)> = (0..ns)
        .map(|i| {
            let s = eval.source(i);
            labelled_pixels(params, &s.image, &s.ground_truth)
        })
        .collect::<Result<_>>()?;
    let target: Vec<(FeatureMap, LabelMap)> = (0..nt)
        .map(|i| {
            let (image, truth) = eval.eval_scene(i);
            labelled_pixels(params, image, truth)
        })
        .collect::<Result<_>>()?;
    let sample = |maps: &[(FeatureMap, LabelMap)], stream: u64| -> Vec<(Vec<f64>, usize)> {
        let mut rng = keyed_rng(seed, stream, Purpose::Subsample);
        (0..pixels)
            .map(|_| {
                let (f, y) = &maps[rng.gen_range(0..maps.len())];
                let p = rng.gen_range(0..f.num_pixels());
                (f.pixel(p).to_vec(), y.get(p).expect("ground truth is complete"))
            })
            .collect()
    };
    let s = sample(&source, u64::MAX - 1);
    let t = sample(&target, u64::MAX);
    let s: Vec<(&[f64], usize)> = s.iter().map(|(f, c)| (f.as_slice(), *c)).collect();
    let t: Vec<(&[f64], usize)> = t.iter().map(|(f, c)| (f.as_slice(), *c)).collect();
    let stats = similarity_stats(&s, &t)
        .ok_or_else(|| Error::config("alignment", "sample holds no same-class or no different-class pair"))?;
    Ok(AlignmentStats {
        same_class: stats.same_class,
        different_class: stats.different_class,
        gap: stats.same_class - stats.different_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRow {
    /// `source` or `target`.
    pub domain: &'static str,
    pub scene: usize,
    pub pixel: usize,
    pub class: usize,
    pub feature: Vec<f64>,
}

/// `pixels` random labelled embeddings per domain (training source scenes,
/// evaluation target scenes), for external projection and plotting.
pub fn sample_embeddings(params: &EncoderParams, eval: &EvalHandle, pixels: usize, seed: u64) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(2 * pixels);
    for (domain, stream) in [("source", u64::MAX - 3), ("target", u64::MAX - 2)] {
        let n = if domain == "source" { eval.num_source() } else { eval.num_eval() };
        if n == 0 {
            continue;
        }
        let mut rng = keyed_rng(seed, stream, Purpose::Subsample);
        let mut picks: Vec<(usize, usize)> = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            picks.push((rng.gen_range(0..n), rng.gen::<u32>() as usize));
        }
        picks.sort_unstable();
        let mut cache: Option<(usize, FeatureMap, LabelMap)> = None;
        for (scene, r) in picks {
            if cache.as_ref().map_or(true, |c| c.0 != scene) {
                let (f, y) = if domain == "source" {
                    let s = eval.source(scene);
                    labelled_pixels(params, &s.image, &s.ground_truth)?
                } else {
                    let (image, truth) = eval.eval_scene(scene);
                    labelled_pixels(params, image, truth)?
                };
                cache = Some((scene, f, y));
            }
            let (_, f, y) = cache.as_ref().expect("filled above");
            let pixel = r % f.num_pixels();
            rows.push(EmbeddingRow {
                domain,
                scene,
                pixel,
                class: y.get(pixel).expect("ground truth is complete"),
                feature: f.pixel(pixel).to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Pseudo labels of one target scene, at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLabels {
    pub static_labels: LabelMap,
    pub dynamic_uncalibrated: LabelMap,
    pub dynamic: LabelMap,
    pub hybrid: LabelMap,
}

/// What label generation for one target scene needs, computed once so that
/// several thresholds can be tried cheaply.
#[derive(Debug, Clone)]
pub struct SceneContext {
    features: FeatureMap,
    source_protos: PrototypeSet,
    calibrated: PrototypeSet,
    static_labels: LabelMap,
    height: usize,
    width: usize,
}

impl SceneContext {
    pub fn labels(&self, threshold: f64) -> Result<SceneLabels> {
        let classes = self.static_labels.classes();
        let up = |y: LabelMap| y.resample_nearest(self.height, self.width);
        let uncal = dynamic_labels(&self.features, &self.source_protos, threshold, classes)?.labels;
        let dynamic = dynamic_labels(&self.features, &self.calibrated, threshold, classes)?.labels;
        let hybrid = hybrid_fuse(&dynamic, &self.static_labels)?;
        Ok(SceneLabels {
            static_labels: up(self.static_labels.clone()),
            dynamic_uncalibrated: up(uncal),
            dynamic: up(dynamic),
            hybrid: up(hybrid),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSnapshot {
    pub iteration: usize,
    pub threshold: f64,
    pub static_labels: PseudoLabelReport,
    pub dynamic_uncalibrated: PseudoLabelReport,
    pub dynamic: PseudoLabelReport,
    pub hybrid: PseudoLabelReport,
}

#[derive(Debug, Clone, Default)]
pub struct SnapshotTally {
    tallies: [LabelTally; 4],
}

impl SnapshotTally {
    pub fn add(&mut self, labels: &SceneLabels, truth: &LabelMap) -> Result<()> {
        self.tallies[0].add(&labels.static_labels, truth)?;
        self.tallies[1].add(&labels.dynamic_uncalibrated, truth)?;
        self.tallies[2].add(&labels.dynamic, truth)?;
        self.tallies[3].add(&labels.hybrid, truth)
    }

    pub fn finish(&self, iteration: usize, threshold: f64) -> LabelSnapshot {
        LabelSnapshot {
            iteration,
            threshold,
            static_labels: self.tallies[0].report(),
            dynamic_uncalibrated: self.tallies[1].report(),
            dynamic: self.tallies[2].report(),
            hybrid: self.tallies[3].report(),
        }
    }
}

impl Trainer<'_> {
    /// Label context for target training scene `index`. The source prototypes
    /// come from a fixed, index-keyed batch of unaugmented source scenes.
    pub fn scene_context(&self, index: usize) -> Result<SceneContext> {
        let cfg = self.config();
        let state = self.state();
        let view = self.view();
        if index >= view.num_target() {
            return Err(Error::config("scenes", format!("target scene {index} out of range (have {})", view.num_target())));
        }
        let mut rng = keyed_rng(cfg.seed, index as u64, Purpose::Subsample);
        let mut feats = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let scene = view.source(rng.gen_range(0..view.num_source()));
            let (f, y) = labelled_pixels(&state.params, &scene.image, &scene.ground_truth)?;
            feats.push(f);
            labels.push(y);
        }
        let source_protos = masked_average_pool_batch(&feats, &labels)?;
        let bias = domain_bias(&state.source_bank, &state.target_bank)?;
        let calibrated = calibrate(&source_protos, &bias)?;
        let image = view.target(index).image;
        let out = forward(&state.params, image)?;
        let (fh, fw) = (out.features.height(), out.features.width());
        Ok(SceneContext {
            static_labels: state.static_labels[index].resample_nearest(fh, fw),
            features: out.features,
            source_protos,
            calibrated,
            height: image.height(),
            width: image.width(),
        })
    }

    /// Pseudo-label density and accuracy over the first `limit` target
    /// training scenes for each threshold.
    pub fn label_snapshots(&self, eval: &EvalHandle, thresholds: &[f64], limit: Option<usize>) -> Result<Vec<LabelSnapshot>> {
        let n = limit.map_or(self.view().num_target(), |l| l.min(self.view().num_target()));
        let mut tallies = vec![SnapshotTally::default(); thresholds.len()];
        for i in 0..n {
            let ctx = self.scene_context(i)?;
            let truth = eval.target_ground_truth(i);
            for (tally, &thr) in tallies.iter_mut().zip(thresholds) {
                tally.add(&ctx.labels(thr)?, truth)?;
            }
        }
        let iteration = self.state().iteration;
        Ok(tallies.iter().zip(thresholds).map(|(t, &thr)| t.finish(iteration, thr)).collect())
    }

    pub fn label_snapshot(&self, eval: &EvalHandle, limit: Option<usize>) -> Result<LabelSnapshot> {
        let thr = self.config().dynamic_threshold;
        Ok(self.label_snapshots(eval, &[thr], limit)?.remove(0))
    }
}
