//! Procedural street-like scenes with exact ground truth and a controllable
//! appearance gap between a labelled source domain and an unlabelled target
//! domain.
//!
//! Layout (shared by both domains): a sky band at the top, a road band at the
//! bottom, background in between, and one to four elliptical blobs. Classes
//! `0, 1, 2` are background, road and sky; every class from `3` on is a blob
//! class, and the last blob class is rare (present in a configurable fraction
//! of scenes). Appearance: per-class base colour, a per-class sinusoidal
//! texture and Gaussian noise. The target domain adds a [`DomainShift`] on top
//! of the rendered layout, so geometry statistics are identical and only
//! appearance differs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::ImageGrid;
use crate::error::{Error, Result};
use crate::maps::{FeatureMap, LabelMap};
use crate::rng::{keyed_rng, Purpose};

pub const BACKGROUND: usize = 0;
pub const ROAD: usize = 1;
pub const SKY: usize = 2;
pub const FIRST_BLOB: usize = 3;

/// Index offsets keeping source, target-train and target-eval scenes disjoint.
pub const TARGET_INDEX_BASE: u64 = 1 << 32;
pub const EVAL_INDEX_BASE: u64 = 2 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub amplitude: f64,
    /// Stripe period in pixels.
    pub period: f64,
    /// Stripe orientation in degrees.
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub class_colors: Vec<[f64; 3]>,
    pub textures: Vec<Texture>,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Probability that a scene contains the rare (last) blob class.
    pub rare_class_probability: f64,
    /// Per-channel Gaussian noise of the source rendering.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            class_names: ["background", "road", "sky", "blob-a", "blob-b"]
                .into_iter()
                .map(String::from)
                .collect(),
            class_colors: vec![
                [0.55, 0.55, 0.50],
                [0.30, 0.30, 0.35],
                [0.45, 0.65, 0.90],
                [0.80, 0.30, 0.25],
                [0.30, 0.70, 0.35],
            ],
            textures: vec![
                Texture { amplitude: 0.05, period: 8.0, angle_deg: 45.0 },
                Texture { amplitude: 0.06, period: 4.0, angle_deg: 90.0 },
                Texture { amplitude: 0.02, period: 16.0, angle_deg: 0.0 },
                Texture { amplitude: 0.06, period: 3.0, angle_deg: 0.0 },
                Texture { amplitude: 0.06, period: 5.0, angle_deg: 135.0 },
            ],
            min_blobs: 1,
            max_blobs: 4,
            rare_class_probability: 0.3,
            noise_sigma: 0.04,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.class_colors.len()
    }

    pub fn rare_class(&self) -> Option<usize> {
        (self.classes() > FIRST_BLOB + 1).then(|| self.classes() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if c < FIRST_BLOB + 1 {
            return Err(Error::config("scene.class_colors", "need background, road, sky and at least one blob class"));
        }
        if self.class_names.len() != c || self.textures.len() != c {
            return Err(Error::config("scene", "class_names, class_colors and textures must have equal length"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("scene.height", "scenes must be at least 8x8"));
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return Err(Error::config("scene.min_blobs", "need 1 <= min_blobs <= max_blobs"));
        }
        if !(0.0..=1.0).contains(&self.rare_class_probability) {
            return Err(Error::config("scene.rare_class_probability", "must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("scene.noise_sigma", "must be nonnegative"));
        }
        for a in 0..c {
            for b in a + 1..c {
                let gap = (0..3)
                    .map(|k| (self.class_colors[a][k] - self.class_colors[b][k]).abs())
                    .fold(0.0, f64::max);
                if gap < 0.1 {
                    return Err(Error::config(
                        "scene.class_colors",
                        format!("classes {a} and {b} differ by only {gap:.3} in max-norm (need 0.1)"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Appearance change applied to rendered target scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub global_offset: [f64; 3],
    /// Per-class colour offsets; empty means none.
    pub class_offsets: Vec<[f64; 3]>,
    /// Extra per-channel Gaussian noise.
    pub noise_sigma: f64,
    /// Amplitude of an extra class-agnostic stripe pattern.
    pub texture_jitter: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::benchmark(1.0)
    }
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            global_offset: [0.0; 3],
            class_offsets: Vec::new(),
            noise_sigma: 0.0,
            texture_jitter: 0.0,
        }
    }

    /// The reference five-class gap scaled by `magnitude` (0 = no gap).
    pub fn benchmark(magnitude: f64) -> Self {
        let m = magnitude;
        let scale = |v: [f64; 3]| v.map(|x| x * m);
        Self {
            global_offset: scale([0.06, -0.02, -0.06]),
            class_offsets: vec![
                scale([-0.10, -0.06, 0.00]),
                scale([0.10, 0.08, 0.02]),
                scale([0.06, -0.10, -0.22]),
                scale([-0.12, 0.14, 0.06]),
                scale([0.18, 0.00, 0.10]),
            ],
            noise_sigma: 0.03 * m,
            texture_jitter: 0.04 * m,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.global_offset == [0.0; 3]
            && self.class_offsets.iter().all(|o| *o == [0.0; 3])
            && self.noise_sigma == 0.0
            && self.texture_jitter == 0.0
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if !self.class_offsets.is_empty() && self.class_offsets.len() != classes {
            return Err(Error::config(
                "shift.class_offsets",
                format!("expected {classes} entries or none, got {}", self.class_offsets.len()),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.texture_jitter >= 0.0) {
            return Err(Error::config("shift", "noise_sigma and texture_jitter must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: ImageGrid,
    pub ground_truth: LabelMap,
    pub domain: Domain,
    pub index: u64,
}

struct Blob {
    class: usize,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

fn layout(spec: &SceneSpec, index: u64) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let hf = h as f64;
    let mut rng = keyed_rng(spec.seed, index, Purpose::Layout);
    let sky = (rng.gen_range(0.15..0.30) * hf).round() as usize;
    let road = (rng.gen_range(0.20..0.35) * hf).round() as usize;
    let n_blobs = rng.gen_range(spec.min_blobs..=spec.max_blobs);
    let rare = spec.rare_class();
    let with_rare = rare.is_some() && rng.gen_bool(spec.rare_class_probability);
    let common_last = rare.unwrap_or(spec.classes());
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|i| {
            let class = match rare {
                Some(r) if with_rare && i == 0 => r,
                _ => rng.gen_range(FIRST_BLOB..common_last.max(FIRST_BLOB + 1)),
            };
            Blob {
                class,
                cy: rng.gen_range(0.25..0.85) * hf,
                cx: rng.gen_range(0.1..0.9) * w as f64,
                ry: rng.gen_range(0.06..0.14) * hf,
                rx: rng.gen_range(0.06..0.16) * w as f64,
            }
        })
        .collect();
    LabelMap::from_fn(h, w, spec.classes(), |p| {
        let (y, x) = ((p / w) as f64 + 0.5, (p % w) as f64 + 0.5);
        // later blobs paint over earlier ones
        for b in blobs.iter().rev() {
            let dy = (y - b.cy) / b.ry;
            let dx = (x - b.cx) / b.rx;
            if dy * dy + dx * dx <= 1.0 {
                return Some(b.class);
            }
        }
        let row = p / w;
        Some(if row < sky {
            SKY
        } else if row >= h - road {
            ROAD
        } else {
            BACKGROUND
        })
    })
}

fn stripe(amplitude: f64, period: f64, angle_deg: f64, phase: f64, y: usize, x: usize) -> f64 {
    if amplitude == 0.0 {
        return 0.0;
    }
    let theta = angle_deg.to_radians();
    let t = x as f64 * theta.cos() + y as f64 * theta.sin();
    amplitude * (std::f64::consts::TAU * t / period + phase).sin()
}

/// Renders the image without clamping to `[0, 1]`.
pub(crate) fn render_unclamped(spec: &SceneSpec, shift: &DomainShift, index: u64) -> (FeatureMap, LabelMap) {
    let labels = layout(spec, index);
    let (h, w) = (spec.height, spec.width);
    let c = spec.classes();
    let mut tex_rng = keyed_rng(spec.seed, index, Purpose::Texture);
    let phases: Vec<f64> = (0..c).map(|_| tex_rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut jitter_rng = keyed_rng(spec.seed, index, Purpose::TargetTexture);
    let jitter_angle: f64 = jitter_rng.gen_range(0.0..180.0);
    let jitter_period: f64 = jitter_rng.gen_range(3.0..9.0);
    let jitter_phase: f64 = jitter_rng.gen_range(0.0..std::f64::consts::TAU);
    let mut noise = keyed_rng(spec.seed, index, Purpose::SourceNoise);
    let mut extra_noise = keyed_rng(spec.seed, index, Purpose::TargetNoise);

    let mut image = FeatureMap::zeros(h, w, 3);
    for p in 0..h * w {
        let (y, x) = (p / w, p % w);
        let class = labels.get(p).expect("layout labels every pixel");
        let t = &spec.textures[class];
        let texture = stripe(t.amplitude, t.period, t.angle_deg, phases[class], y, x);
        let jitter = stripe(shift.texture_jitter, jitter_period, jitter_angle, jitter_phase, y, x);
        let offset = shift.class_offsets.get(class).copied().unwrap_or([0.0; 3]);
        let px = image.pixel_mut(p);
        for k in 0..3 {
            let n: f64 = StandardNormal.sample(&mut noise);
            let mut v = spec.class_colors[class][k] + texture + spec.noise_sigma * n;
            if shift.noise_sigma > 0.0 {
                let e: f64 = StandardNormal.sample(&mut extra_noise);
                v += shift.noise_sigma * e;
            }
            v += offset[k] + shift.global_offset[k] + jitter;
            px[k] = v;
        }
    }
    (image, labels)
}

/// Deterministic in `(spec.seed, index, shift)`.
pub fn generate(spec: &SceneSpec, shift: &DomainShift, index: u64, domain: Domain) -> LabeledScene {
    let (mut image, ground_truth) = render_unclamped(spec, shift, index);
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    LabeledScene {
        image,
        ground_truth,
        domain,
        index,
    }
}

/// Source scenes, target training images, and target evaluation scenes.
///
/// Target ground truth is private; training code sees it only as
/// [`Error::Sealed`] and metrics code reads it through [`EvalHandle`].
#[derive(Debug, Clone)]
pub struct Dataset {
    spec: SceneSpec,
    shift: DomainShift,
    source: Vec<LabeledScene>,
    target_images: Vec<ImageGrid>,
    target_truth: Vec<LabelMap>,
    eval_images: Vec<ImageGrid>,
    eval_truth: Vec<LabelMap>,
}

impl Dataset {
    pub fn generate(
        spec: &SceneSpec,
        shift: &DomainShift,
        n_source: usize,
        n_target: usize,
        n_eval: usize,
    ) -> Result<Self> {
        spec.validate()?;
        shift.validate(spec.classes())?;
        if n_source == 0 || n_target == 0 {
            return Err(Error::config("data", "need at least one source and one target scene"));
        }
        let none = DomainShift::none();
        let source = (0..n_source as u64)
            .map(|i| generate(spec, &none, i, Domain::Source))
            .collect();
        let (target_images, target_truth) = (0..n_target as u64)
            .map(|i| {
                let s = generate(spec, shift, TARGET_INDEX_BASE + i, Domain::Target);
                (s.image, s.ground_truth)
            })
            .unzip();
        let (eval_images, eval_truth) = (0..n_eval as u64)
            .map(|i| {
                let s = generate(spec, shift, EVAL_INDEX_BASE + i, Domain::Target);
                (s.image, s.ground_truth)
            })
            .unzip();
        Ok(Self {
            spec: spec.clone(),
            shift: shift.clone(),
            source,
            target_images,
            target_truth,
            eval_images,
            eval_truth,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }
    pub fn shift(&self) -> &DomainShift {
        &self.shift
    }
    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { data: self }
    }

    pub fn evaluation_handle(&self) -> EvalHandle<'_> {
        EvalHandle { data: self }
    }

    /// Rewrites every target ground-truth map (training and evaluation
    /// split). Exists so audits can show that training never reads them.
    pub fn map_target_ground_truth(&mut self, mut f: impl FnMut(&LabelMap) -> LabelMap) {
        for gt in self.target_truth.iter_mut().chain(self.eval_truth.iter_mut()) {
            *gt = f(gt);
        }
    }
}

/// What the training loop may see.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    data: &'a Dataset,
}

/// A target scene as seen by training code.
#[derive(Debug, Clone, Copy)]
pub struct TargetSceneView<'a> {
    pub image: &'a ImageGrid,
    pub index: usize,
}

impl TargetSceneView<'_> {
    pub fn ground_truth(&self) -> Result<&LabelMap> {
        Err(Error::Sealed)
    }
}

impl<'a> TrainingView<'a> {
    pub fn num_source(&self) -> usize {
        self.data.source.len()
    }
    pub fn num_target(&self) -> usize {
        self.data.target_images.len()
    }
    pub fn classes(&self) -> usize {
        self.data.classes()
    }
    pub fn source(&self, i: usize) -> &'a LabeledScene {
        &self.data.source[i]
    }
    pub fn target(&self, i: usize) -> TargetSceneView<'a> {
        TargetSceneView {
            image: &self.data.target_images[i],
            index: i,
        }
    }
    pub fn rare_class(&self) -> Option<usize> {
        self.data.spec.rare_class()
    }
}

/// Read access to target ground truth, reserved for metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalHandle<'a> {
    data: &'a Dataset,
}

impl<'a> EvalHandle<'a> {
    pub fn num_target(&self) -> usize {
        self.data.target_truth.len()
    }
    pub fn target_ground_truth(&self, i: usize) -> &'a LabelMap {
        &self.data.target_truth[i]
    }
    pub fn num_eval(&self) -> usize {
        self.data.eval_images.len()
    }
    pub fn eval_scene(&self, i: usize) -> (&'a ImageGrid, &'a LabelMap) {
        (&self.data.eval_images[i], &self.data.eval_truth[i])
    }
    pub fn source(&self, i: usize) -> &'a LabeledScene {
        &self.data.source[i]
    }
    pub fn num_source(&self) -> usize {
        self.data.source.len()
    }
    pub fn classes(&self) -> usize {
        self.data.classes()
    }
}
