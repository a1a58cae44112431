//! Training pipeline: source-only warmup, then adaptation steps that run
//! forward passes, prototype pooling, calibration, dynamic and hybrid
//! labelling, loss evaluation, backpropagation, the SGD update and finally
//! the EMA bank updates, in that order.
//!
//! A step is split into [`Trainer::compute_step`], which only reads the
//! state, and [`Trainer::apply_step`], the single place where parameters
//! and banks change.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod eval;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::Serialize;

use crate::contrastive::{
    entropy_loss_batch, pixel_prototype_loss, segmentation_loss_batch, total_loss, ContrastiveOutput,
    LossBreakdown, LossCounts, LossParts, PairStatus, PixelLossOutput,
};
use crate::encoder::{backward_into, clip_grad_norm, forward, poly_lr, sgd_step, Architecture, EncoderParams, ForwardOutput, ParamGrads, SgdState};
use crate::error::{Error, Result};
use crate::maps::{FeatureGrad, FeatureMap, LabelMap};
use crate::prototypes::{calibrate, domain_bias, masked_average_pool_backward, masked_average_pool_batch, BiasMap, PrototypeBank, PrototypeSet};
use crate::pseudo::{dynamic_labels, hybrid_fuse, static_labels, LabelTally, PseudoLabelReport};
use crate::rng::{keyed_rng, Purpose};
use crate::synth::{EvalHandle, TrainingView};

pub use augment::Transform;
pub use config::{
    AblationSwitches, Augmentation, DataConfig, PrototypePooling, Provenance, SoftmaxSupport, TargetSegLabels,
    TrainConfig,
};
pub use eval::{evaluate, feature_alignment, AlignmentStats, EvalReport, LabelSnapshot};

/// Everything that changes during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub sgd: SgdState,
    pub source_bank: PrototypeBank,
    pub target_bank: PrototypeBank,
    /// Static labels `y_F` of every target training scene, at image resolution.
    pub static_labels: Vec<LabelMap>,
    /// Adaptation steps completed.
    pub iteration: usize,
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, params: EncoderParams, target_scenes: &[(usize, usize)]) -> Result<Self> {
        let classes = config.classes();
        let dim = params.arch.embedding_dim();
        Ok(Self {
            sgd: SgdState::new(&params),
            params,
            source_bank: PrototypeBank::new(classes, dim, config.ema_momentum)?,
            target_bank: PrototypeBank::new(classes, dim, config.ema_momentum)?,
            static_labels: target_scenes
                .iter()
                .map(|&(h, w)| LabelMap::unlabeled(h, w, classes))
                .collect(),
            iteration: 0,
        })
    }
}

/// Density and accuracy of the pseudo labels of one step's target batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLabelStats {
    pub static_labels: PseudoLabelReport,
    pub dynamic_uncalibrated: PseudoLabelReport,
    pub dynamic: PseudoLabelReport,
    pub hybrid: PseudoLabelReport,
}

/// Mean cross-domain cosine similarity of same-class and different-class pixel pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimilarityStats {
    pub same_class: f64,
    pub different_class: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub fcl_status: PairStatus,
    pub bcl_status: PairStatus,
    pub dynamic_status: PairStatus,
    pub fcl_skipped: usize,
    pub bcl_skipped: usize,
    /// Present only when training is monitored through an [`EvalHandle`].
    pub labels: Option<StepLabelStats>,
    pub similarity: Option<SimilarityStats>,
}

/// The outcome of [`Trainer::compute_step`], not yet applied.
#[derive(Debug, Clone)]
pub struct StepComputation {
    pub record: StepRecord,
    pub grads: ParamGrads,
    /// Instance prototypes per pooling group, for the bank updates.
    pub source_protos: Vec<PrototypeSet>,
    pub target_protos: Vec<PrototypeSet>,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    /// Augmented static labels of the target batch at feature resolution.
    pub static_batch: Vec<LabelMap>,
    pub dynamic_batch: Vec<LabelMap>,
    /// Hybrid labels `y_T` of the target batch.
    pub hybrid_batch: Vec<LabelMap>,
}

struct Sample {
    out: ForwardOutput,
    /// `y_S` for source samples, `y_F` for target samples (feature resolution).
    labels: LabelMap,
    truth: Option<LabelMap>,
}

const WARMUP_PHASE: u64 = 0;
const ADAPT_PHASE: u64 = 1;

fn augment_key(phase: u64, iteration: usize, slot: usize) -> u64 {
    (phase << 56) | ((iteration as u64) << 16) | slot as u64
}

fn source_sampler(config: &TrainConfig, view: &TrainingView) -> Result<WeightedIndex<f64>> {
    let rare = view.rare_class();
    let weights: Vec<f64> = (0..view.num_source())
        .map(|i| {
            let has_rare = rare.is_some_and(|r| view.source(i).ground_truth.class_counts()[r] > 0);
            if has_rare {
                config.data.rare_oversampling
            } else {
                1.0
            }
        })
        .collect();
    WeightedIndex::new(weights).map_err(|e| Error::config("data", e.to_string()))
}

fn check_view(config: &TrainConfig, view: &TrainingView) -> Result<()> {
    if view.classes() != config.classes() {
        return Err(Error::config(
            "data.scene",
            format!("dataset has {} classes, config {}", view.classes(), config.classes()),
        ));
    }
    Ok(())
}

fn new_architecture(config: &TrainConfig) -> Result<Architecture> {
    Architecture::new(&config.encoder, 3, config.classes())
}

/// Source-only pretraining on the segmentation loss. Deterministic in
/// `config.seed`, so every ablation arm of a seed can share the result.
pub fn warmup(config: &TrainConfig, view: &TrainingView) -> Result<EncoderParams> {
    config.validate()?;
    check_view(config, view)?;
    let mut params = EncoderParams::init(new_architecture(config)?, config.seed);
    let mut sgd = SgdState::new(&params);
    let sampler = source_sampler(config, view)?;
    let total = config.warmup_iterations;
    for t in 0..total {
        let mut rng = keyed_rng(config.seed, t as u64, Purpose::WarmupBatch);
        let indices: Vec<usize> = (0..config.batch_size).map(|_| sampler.sample(&mut rng)).collect();
        let mut outs = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let scene = view.source(i);
            let mut arng = keyed_rng(config.seed, augment_key(WARMUP_PHASE, t, slot), Purpose::Augment);
            let tr = Transform::sample(&config.augmentation, scene.image.height(), scene.image.width(), &mut arng);
            let out = forward(&params, &tr.apply_image(&scene.image))?;
            labels.push(tr.apply_labels(&scene.ground_truth).resample_nearest(out.features.height(), out.features.width()));
            outs.push(out);
        }
        let probs: Vec<_> = outs.iter().map(|o| o.probs.clone()).collect();
        let seg = segmentation_loss_batch(&probs, &labels)?;
        if !seg.loss.is_finite() {
            return Err(Error::NonFinite(format!("warmup loss at iteration {t}")));
        }
        let mut grad_f: Vec<FeatureGrad> = outs
            .iter()
            .map(|o| FeatureMap::zeros(o.features.height(), o.features.width(), o.features.dim()))
            .collect();
        let wc = config.warmup_contrastive;
        if wc > 0.0 {
            let feats: Vec<FeatureMap> = outs.iter().map(|o| o.features.clone()).collect();
            let protos = masked_average_pool_batch(&feats, &labels)?;
            let con = pixel_prototype_loss(&feats, &labels, &protos, config.loss_weights.temperature)?;
            for (g, c) in grad_f.iter_mut().zip(&con.grad_features) {
                axpy(g, wc, c);
            }
            let scaled = con.grad_protos.iter().map(|(c, v)| (*c, v.iter().map(|x| x * wc).collect())).collect();
            masked_average_pool_backward(&labels, &protos, &scaled, &mut grad_f);
        }
        let mut grads = params.zeros_like();
        for ((out, gl), gf) in outs.iter().zip(&seg.grad_logits).zip(&grad_f) {
            backward_into(&params, &out.trace, gf, &gl.scaled(config.loss_weights.seg_source), &mut grads)?;
        }
        clip_grad_norm(&mut grads, config.grad_clip_norm);
        let lr = poly_lr(config.warmup_lr, t, total, config.poly_power);
        sgd_step(&mut params, &grads, &mut sgd, lr, config.momentum, config.weight_decay)?;
    }
    Ok(params)
}

fn axpy(dst: &mut FeatureGrad, alpha: f64, src: &FeatureGrad) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += alpha * s;
    }
}

fn with_bank(instance: &PrototypeSet, bank: &PrototypeBank) -> Result<PrototypeSet> {
    let mut set = instance.clone();
    for c in 0..bank.classes() {
        if !set.contains(c) {
            if let Some(v) = bank.get(c) {
                set.insert(c, v.to_vec(), 0)?;
            }
        }
    }
    Ok(set)
}

/// Sums contrastive outputs from several pooling groups into one term,
/// weighting each group by its share of contributing pixels.
struct GroupedTerm {
    outputs: Vec<ContrastiveOutput>,
}

impl GroupedTerm {
    fn contributing(&self) -> usize {
        self.outputs.iter().map(|o| o.contributing).sum()
    }
    fn skipped(&self) -> usize {
        self.outputs.iter().map(|o| o.skipped).sum()
    }
    fn shares(&self) -> Vec<f64> {
        let n = self.contributing();
        self.outputs
            .iter()
            .map(|o| if n == 0 { 0.0 } else { o.contributing as f64 / n as f64 })
            .collect()
    }
    fn loss(&self) -> f64 {
        self.outputs.iter().zip(self.shares()).map(|(o, s)| s * o.loss).sum()
    }
    fn status(&self) -> PairStatus {
        if self.contributing() == 0 {
            PairStatus::NoPairs
        } else {
            PairStatus::Ok
        }
    }
}

pub(crate) fn pool_groups(pooling: PrototypePooling, batch: usize) -> Vec<Vec<usize>> {
    match pooling {
        PrototypePooling::Batch => vec![(0..batch).collect()],
        PrototypePooling::PerImage => (0..batch).map(|i| vec![i]).collect(),
    }
}

fn pick<T: Clone>(items: &[T], group: &[usize]) -> Vec<T> {
    group.iter().map(|&i| items[i].clone()).collect()
}

pub(crate) fn similarity_stats(source: &[(&[f64], usize)], target: &[(&[f64], usize)]) -> Option<SimilarityStats> {
    let (mut same, mut n_same, mut diff, mut n_diff) = (0.0, 0usize, 0.0, 0usize);
    for (fs, cs) in source {
        let ns = crate::numerics::norm(fs);
        for (ft, ct) in target {
            let s = crate::numerics::cosine_with_norms(fs, ns, ft, crate::numerics::norm(ft));
            if cs == ct {
                same += s;
                n_same += 1;
            } else {
                diff += s;
                n_diff += 1;
            }
        }
    }
    (n_same > 0 && n_diff > 0).then(|| SimilarityStats {
        same_class: same / n_same as f64,
        different_class: diff / n_diff as f64,
    })
}

pub struct Trainer<'a> {
    config: TrainConfig,
    view: TrainingView<'a>,
    state: TrainState,
    sampler: WeightedIndex<f64>,
}

impl<'a> Trainer<'a> {
    /// Runs the warmup, then prepares adaptation.
    pub fn new(config: TrainConfig, view: TrainingView<'a>) -> Result<Self> {
        let params = warmup(&config, &view)?;
        Self::from_params(config, view, params)
    }

    /// Starts adaptation from given (typically warmed-up) parameters.
    pub fn from_params(config: TrainConfig, view: TrainingView<'a>, params: EncoderParams) -> Result<Self> {
        let sizes: Vec<(usize, usize)> = (0..view.num_target())
            .map(|i| {
                let img = view.target(i).image;
                (img.height(), img.width())
            })
            .collect();
        let state = TrainState::fresh(&config, params, &sizes)?;
        Self::resume(config, view, state)
    }

    pub fn resume(config: TrainConfig, view: TrainingView<'a>, state: TrainState) -> Result<Self> {
        config.validate()?;
        check_view(&config, &view)?;
        if state.params.arch != new_architecture(&config)? {
            return Err(Error::config("encoder", "parameters do not match the configured architecture"));
        }
        if state.static_labels.len() != view.num_target() {
            return Err(Error::config(
                "data.target_scenes",
                format!("state has {} static label maps, dataset {} target scenes", state.static_labels.len(), view.num_target()),
            ));
        }
        let sampler = source_sampler(&config, &view)?;
        Ok(Self {
            config,
            view,
            state,
            sampler,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn state(&self) -> &TrainState {
        &self.state
    }
    pub fn into_state(self) -> TrainState {
        self.state
    }
    pub fn view(&self) -> &TrainingView<'a> {
        &self.view
    }
    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    /// Recomputes `y_F` for every target training scene from fresh predictions.
    pub fn refresh_static_labels(&mut self) -> Result<()> {
        let mut fresh = Vec::with_capacity(self.view.num_target());
        for i in 0..self.view.num_target() {
            let image = self.view.target(i).image;
            let out = forward(&self.state.params, image)?;
            let y = static_labels(&out.probs, &self.config.static_labels)?;
            fresh.push(y.resample_nearest(image.height(), image.width()));
        }
        self.state.static_labels = fresh;
        Ok(())
    }

    fn bias(&self) -> Result<BiasMap> {
        let cfg = &self.config;
        if cfg.ablation.use_dynamic && cfg.ablation.use_calibration {
            domain_bias(&self.state.source_bank, &self.state.target_bank)
        } else {
            Ok(BiasMap::zeros(cfg.classes(), self.state.params.arch.embedding_dim()))
        }
    }

    fn source_batch(&self, iteration: usize) -> Vec<usize> {
        let mut rng = keyed_rng(self.config.seed, iteration as u64, Purpose::SourceBatch);
        (0..self.config.batch_size).map(|_| self.sampler.sample(&mut rng)).collect()
    }

    fn target_batch(&self, iteration: usize) -> Vec<usize> {
        let mut rng = keyed_rng(self.config.seed, iteration as u64, Purpose::TargetBatch);
        let n = self.view.num_target();
        (0..self.config.batch_size).map(|_| rng.gen_range(0..n)).collect()
    }

    /// Steps 1 to 7 of an adaptation iteration plus backpropagation; the
    /// state is left untouched.
    pub fn compute_step(&self, monitor: Option<&EvalHandle>) -> Result<StepComputation> {
        let cfg = &self.config;
        let t = self.state.iteration;
        let params = &self.state.params;
        let b = cfg.batch_size;
        let classes = cfg.classes();
        let w = &cfg.loss_weights;
        let switches = cfg.ablation;
        let source_indices = self.source_batch(t);
        let target_indices = self.target_batch(t);

        // (1) forward both domains
        let mut sources = Vec::with_capacity(b);
        for (slot, &i) in source_indices.iter().enumerate() {
            let scene = self.view.source(i);
            let mut rng = keyed_rng(cfg.seed, augment_key(ADAPT_PHASE, t, slot), Purpose::Augment);
            let tr = Transform::sample(&cfg.augmentation, scene.image.height(), scene.image.width(), &mut rng);
            let out = forward(params, &tr.apply_image(&scene.image))?;
            let (fh, fw) = (out.features.height(), out.features.width());
            sources.push(Sample {
                labels: tr.apply_labels(&scene.ground_truth).resample_nearest(fh, fw),
                out,
                truth: None,
            });
        }
        let mut targets = Vec::with_capacity(b);
        for (slot, &j) in target_indices.iter().enumerate() {
            let scene = self.view.target(j);
            let (h, wd) = (scene.image.height(), scene.image.width());
            let mut rng = keyed_rng(cfg.seed, augment_key(ADAPT_PHASE, t, b + slot), Purpose::Augment);
            let tr = Transform::sample(&cfg.augmentation, h, wd, &mut rng);
            let out = forward(params, &tr.apply_image(scene.image))?;
            let (fh, fw) = (out.features.height(), out.features.width());
            let truth = monitor.map(|m| tr.apply_labels(m.target_ground_truth(j)).resample_nearest(fh, fw));
            targets.push(Sample {
                labels: tr.apply_labels(&self.state.static_labels[j]).resample_nearest(fh, fw),
                out,
                truth,
            });
        }
        let f_s: Vec<FeatureMap> = sources.iter().map(|s| s.out.features.clone()).collect();
        let f_t: Vec<FeatureMap> = targets.iter().map(|s| s.out.features.clone()).collect();
        let y_s: Vec<LabelMap> = sources.iter().map(|s| s.labels.clone()).collect();
        let y_f: Vec<LabelMap> = targets.iter().map(|s| s.labels.clone()).collect();

        let bias = self.bias()?;
        let groups = pool_groups(cfg.prototype_pooling, b);
        let mut rho_s = Vec::with_capacity(groups.len());
        let mut rho_t = Vec::with_capacity(groups.len());
        let mut y_d: Vec<LabelMap> = y_f.iter().map(|y| LabelMap::unlabeled(y.height(), y.width(), classes)).collect();
        let mut y_d_uncal = y_d.clone();
        let mut y_t = y_f.clone();
        let mut dynamic_status = PairStatus::Disabled;
        for g in &groups {
            // (2) source instance prototypes
            let rs = masked_average_pool_batch(&pick(&f_s, g), &pick(&y_s, g))?;
            if switches.use_dynamic {
                // (3) calibrated prototypes from the banks as they were before this step
                let calibrated = calibrate(&rs, &bias)?;
                // (4) dynamic labels, (5) hybrid fusion
                for &j in g {
                    let dl = dynamic_labels(&f_t[j], &calibrated, cfg.dynamic_threshold, classes)?;
                    if dl.status == PairStatus::Ok || dynamic_status == PairStatus::Disabled {
                        dynamic_status = dl.status;
                    }
                    y_t[j] = hybrid_fuse(&dl.labels, &y_f[j])?;
                    y_d_uncal[j] = if monitor.is_some() && switches.use_calibration {
                        dynamic_labels(&f_t[j], &rs, cfg.dynamic_threshold, classes)?.labels
                    } else {
                        dl.labels.clone()
                    };
                    y_d[j] = dl.labels;
                }
            }
            // (6) target instance prototypes from the hybrid labels
            rho_t.push(masked_average_pool_batch(&pick(&f_t, g), &pick(&y_t, g))?);
            rho_s.push(rs);
        }

        // (7) losses and their gradients
        let mut grad_f_s: Vec<FeatureGrad> = f_s.iter().map(|f| FeatureMap::zeros(f.height(), f.width(), f.dim())).collect();
        let mut grad_f_t: Vec<FeatureGrad> = f_t.iter().map(|f| FeatureMap::zeros(f.height(), f.width(), f.dim())).collect();
        let mut grad_z_s: Vec<FeatureGrad> = sources.iter().map(|s| FeatureMap::zeros(s.out.logits.height(), s.out.logits.width(), classes)).collect();
        let mut grad_z_t: Vec<FeatureGrad> = targets.iter().map(|s| FeatureMap::zeros(s.out.logits.height(), s.out.logits.width(), classes)).collect();
        let mut touched_s = vec![false; b];
        let mut touched_t = vec![false; b];
        let mut parts = LossParts::default();
        let mut counts = LossCounts::default();

        let probs_s: Vec<_> = sources.iter().map(|s| s.out.probs.clone()).collect();
        let probs_t: Vec<_> = targets.iter().map(|s| s.out.probs.clone()).collect();
        let add_pixel_term = |weight: f64, out: PixelLossOutput, grads: &mut Vec<FeatureGrad>, touched: &mut Vec<bool>| {
            for (i, g) in out.grad_logits.iter().enumerate() {
                axpy(&mut grads[i], weight, g);
                touched[i] = true;
            }
            (out.loss, out.contributing)
        };
        if w.seg_source > 0.0 {
            let out = segmentation_loss_batch(&probs_s, &y_s)?;
            (parts.seg_source, counts.seg_source) = add_pixel_term(w.seg_source, out, &mut grad_z_s, &mut touched_s);
        }
        if w.ent_source > 0.0 {
            let out = entropy_loss_batch(&probs_s)?;
            (parts.ent_source, counts.ent_source) = add_pixel_term(w.ent_source, out, &mut grad_z_s, &mut touched_s);
        }
        if w.seg_target > 0.0 {
            let labels = match cfg.target_seg_labels {
                TargetSegLabels::Hybrid => &y_t,
                TargetSegLabels::Static => &y_f,
            };
            let out = segmentation_loss_batch(&probs_t, labels)?;
            (parts.seg_target, counts.seg_target) = add_pixel_term(w.seg_target, out, &mut grad_z_t, &mut touched_t);
        }
        if w.ent_target > 0.0 {
            let out = entropy_loss_batch(&probs_t)?;
            (parts.ent_target, counts.ent_target) = add_pixel_term(w.ent_target, out, &mut grad_z_t, &mut touched_t);
        }

        let mut fcl_status = PairStatus::Disabled;
        let mut fcl_skipped = 0;
        if switches.use_fcl && w.fcl > 0.0 {
            // target pixels against source prototypes
            let mut outputs = Vec::with_capacity(groups.len());
            for (g, rs) in groups.iter().zip(&rho_s) {
                let protos = match cfg.softmax_support {
                    SoftmaxSupport::Present => rs.clone(),
                    SoftmaxSupport::AllClassesWithBank => with_bank(rs, &self.state.source_bank)?,
                };
                outputs.push(pixel_prototype_loss(&pick(&f_t, g), &pick(&y_t, g), &protos, w.temperature)?);
            }
            let term = GroupedTerm { outputs };
            for ((g, rs), (out, share)) in groups.iter().zip(&rho_s).zip(term.outputs.iter().zip(term.shares())) {
                if out.contributing == 0 {
                    continue;
                }
                let scale = w.fcl * share;
                for (k, &j) in g.iter().enumerate() {
                    axpy(&mut grad_f_t[j], scale, &out.grad_features[k]);
                    touched_t[j] = true;
                }
                let scaled = out.grad_protos.iter().map(|(c, v)| (*c, v.iter().map(|x| x * scale).collect())).collect();
                let mut chained: Vec<FeatureGrad> = pick(&grad_f_s, g);
                masked_average_pool_backward(&pick(&y_s, g), rs, &scaled, &mut chained);
                for (k, &i) in g.iter().enumerate() {
                    grad_f_s[i] = chained[k].clone();
                    touched_s[i] = true;
                }
            }
            parts.fcl = term.loss();
            counts.fcl = term.contributing();
            fcl_skipped = term.skipped();
            fcl_status = term.status();
        }

        let mut bcl_status = PairStatus::Disabled;
        let mut bcl_skipped = 0;
        if switches.use_bcl && w.bcl > 0.0 {
            // source pixels against target prototypes
            let mut outputs = Vec::with_capacity(groups.len());
            for (g, rt) in groups.iter().zip(&rho_t) {
                let protos = match cfg.softmax_support {
                    SoftmaxSupport::Present => rt.clone(),
                    SoftmaxSupport::AllClassesWithBank => with_bank(rt, &self.state.target_bank)?,
                };
                outputs.push(pixel_prototype_loss(&pick(&f_s, g), &pick(&y_s, g), &protos, w.temperature)?);
            }
            let term = GroupedTerm { outputs };
            for ((g, rt), (out, share)) in groups.iter().zip(&rho_t).zip(term.outputs.iter().zip(term.shares())) {
                if out.contributing == 0 {
                    continue;
                }
                let scale = w.bcl * share;
                for (k, &i) in g.iter().enumerate() {
                    axpy(&mut grad_f_s[i], scale, &out.grad_features[k]);
                    touched_s[i] = true;
                }
                let scaled = out.grad_protos.iter().map(|(c, v)| (*c, v.iter().map(|x| x * scale).collect())).collect();
                let mut chained: Vec<FeatureGrad> = pick(&grad_f_t, g);
                masked_average_pool_backward(&pick(&y_t, g), rt, &scaled, &mut chained);
                for (k, &j) in g.iter().enumerate() {
                    grad_f_t[j] = chained[k].clone();
                    touched_t[j] = true;
                }
            }
            parts.bcl = term.loss();
            counts.bcl = term.contributing();
            bcl_skipped = term.skipped();
            bcl_status = term.status();
        }

        let loss = total_loss(&parts, counts, w)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {t}")));
        }

        let mut grads = params.zeros_like();
        for (i, s) in sources.iter().enumerate() {
            if touched_s[i] {
                backward_into(params, &s.out.trace, &grad_f_s[i], &grad_z_s[i], &mut grads)?;
            }
        }
        for (j, s) in targets.iter().enumerate() {
            if touched_t[j] {
                backward_into(params, &s.out.trace, &grad_f_t[j], &grad_z_t[j], &mut grads)?;
            }
        }

        let (labels, similarity) = match monitor {
            Some(_) => {
                let mut tallies = [LabelTally::default(), LabelTally::default(), LabelTally::default(), LabelTally::default()];
                for (j, s) in targets.iter().enumerate() {
                    let truth = s.truth.as_ref().expect("monitored samples carry ground truth");
                    tallies[0].add(&y_f[j], truth)?;
                    tallies[1].add(&y_d_uncal[j], truth)?;
                    tallies[2].add(&y_d[j], truth)?;
                    tallies[3].add(&y_t[j], truth)?;
                }
                let stats = StepLabelStats {
                    static_labels: tallies[0].report(),
                    dynamic_uncalibrated: tallies[1].report(),
                    dynamic: tallies[2].report(),
                    hybrid: tallies[3].report(),
                };
                (Some(stats), self.batch_similarity(t, &sources, &targets))
            }
            None => (None, None),
        };

        Ok(StepComputation {
            record: StepRecord {
                iteration: t,
                lr: poly_lr(cfg.lr, t, cfg.iterations, cfg.poly_power),
                loss,
                fcl_status,
                bcl_status,
                dynamic_status,
                fcl_skipped,
                bcl_skipped,
                labels,
                similarity,
            },
            grads,
            source_protos: rho_s,
            target_protos: rho_t,
            source_indices,
            target_indices,
            static_batch: y_f,
            dynamic_batch: y_d,
            hybrid_batch: y_t,
        })
    }

    fn batch_similarity(&self, t: usize, sources: &[Sample], targets: &[Sample]) -> Option<SimilarityStats> {
        let n = self.config.alignment_pixels;
        if n == 0 {
            return None;
        }
        let mut rng = keyed_rng(self.config.seed, t as u64, Purpose::Subsample);
        let mut draw = |samples: &[Sample], truth: bool| -> Vec<(Vec<f64>, usize)> {
            let sizes: Vec<usize> = samples.iter().map(|s| s.out.features.num_pixels()).collect();
            let total: usize = sizes.iter().sum();
            (0..n)
                .map(|_| {
                    let mut k = rng.gen_range(0..total);
                    let mut i = 0;
                    while k >= sizes[i] {
                        k -= sizes[i];
                        i += 1;
                    }
                    let labels = if truth { samples[i].truth.as_ref().unwrap() } else { &samples[i].labels };
                    (samples[i].out.features.pixel(k).to_vec(), labels.get(k).unwrap())
                })
                .collect()
        };
        let src = draw(sources, false);
        let tgt = draw(targets, true);
        let s: Vec<(&[f64], usize)> = src.iter().map(|(f, c)| (f.as_slice(), *c)).collect();
        let g: Vec<(&[f64], usize)> = tgt.iter().map(|(f, c)| (f.as_slice(), *c)).collect();
        similarity_stats(&s, &g)
    }

    /// Steps 8 and 9: the SGD update, then the EMA bank updates.
    pub fn apply_step(&mut self, computation: StepComputation) -> Result<StepRecord> {
        let cfg = &self.config;
        let record = computation.record;
        if record.iteration != self.state.iteration {
            return Err(Error::contract("apply_step: computation belongs to another iteration"));
        }
        let mut grads = computation.grads;
        clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        sgd_step(
            &mut self.state.params,
            &grads,
            &mut self.state.sgd,
            record.lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        for (rs, rt) in computation.source_protos.iter().zip(&computation.target_protos) {
            self.state.source_bank.update(rs)?;
            self.state.target_bank.update(rt)?;
        }
        self.state.iteration += 1;
        Ok(record)
    }

    /// One full adaptation iteration, refreshing static labels when due.
    pub fn step(&mut self, monitor: Option<&EvalHandle>) -> Result<StepRecord> {
        if self.state.iteration % self.config.static_labels.refresh_interval == 0 {
            self.refresh_static_labels()?;
        }
        let computation = self.compute_step(monitor)?;
        self.apply_step(computation)
    }

    /// Runs until `config.iterations`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        monitor: Option<&EvalHandle>,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(self.config.iterations.saturating_sub(self.state.iteration));
        while !self.is_finished() {
            let record = self.step(monitor)?;
            on_step(self, &record)?;
            records.push(record);
        }
        Ok(records)
    }
}
