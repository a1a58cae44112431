//! A small stride-1 convolutional feature extractor with a per-pixel linear
//! classifier, exact reverse-mode gradients, and momentum SGD.
//!
//! Layout: `L` 3×3 "same" convolutions with softplus between them (none
//! after the last, so embeddings can take either sign), followed by a
//! `C × D` linear head applied independently at every pixel. All parameters
//! live in one flat vector; [`Architecture`] knows the offsets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{FeatureGrad, FeatureMap, LogitMap, ProbMap};
use crate::rng::{keyed_rng, Purpose};

/// An `H × W × 3` image in the same row-major layout as feature maps.
pub type ImageGrid = FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each convolution; the last one is the embedding size `D`.
    pub widths: Vec<usize>,
    /// Stride of the first convolution; 2 halves the feature resolution.
    pub first_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 16],
            first_stride: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("encoder.widths", "need at least one layer, all widths ≥ 1"));
        }
        if !(1..=2).contains(&self.first_stride) {
            return Err(Error::config("encoder.first_stride", "must be 1 or 2"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

pub const KERNEL: usize = 3;
const PAD: usize = KERNEL / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl ConvShape {
    fn weight_len(&self) -> usize {
        KERNEL * KERNEL * self.in_channels * self.out_channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub classes: usize,
    pub convs: Vec<ConvShape>,
    head_weight_offset: usize,
    head_bias_offset: usize,
    total: usize,
}

impl Architecture {
    pub fn new(cfg: &EncoderConfig, in_channels: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.widths.len());
        let mut offset = 0;
        let mut cin = in_channels;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            let mut shape = ConvShape {
                in_channels: cin,
                out_channels: cout,
                stride: if i == 0 { cfg.first_stride } else { 1 },
                weight_offset: offset,
                bias_offset: 0,
            };
            offset += shape.weight_len();
            shape.bias_offset = offset;
            offset += cout;
            convs.push(shape);
            cin = cout;
        }
        let head_weight_offset = offset;
        offset += classes * cin;
        let head_bias_offset = offset;
        offset += classes;
        Ok(Self {
            in_channels,
            classes,
            convs,
            head_weight_offset,
            head_bias_offset,
            total: offset,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.convs.last().map_or(self.in_channels, |c| c.out_channels)
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    /// Feature-map size produced for an input of the given size.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        self.convs.iter().fold((height, width), |(h, w), c| {
            (h.div_ceil(c.stride), w.div_ceil(c.stride))
        })
    }
}

/// Flat parameter vector (also used for gradients and momentum buffers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(arch: Architecture) -> Self {
        let values = vec![0.0; arch.total];
        Self { arch, values }
    }

    /// Fan-in scaled uniform weights `U(±√(3/fan_in))`, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut params = Self::zeros(arch);
        let mut rng = keyed_rng(seed, 0, Purpose::Init);
        let convs = params.arch.convs.clone();
        for conv in &convs {
            let fan_in = (KERNEL * KERNEL * conv.in_channels) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let range = conv.weight_offset..conv.weight_offset + conv.weight_len();
            for w in &mut params.values[range] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        let d = params.arch.embedding_dim();
        let bound = (3.0 / d as f64).sqrt();
        let range = params.arch.head_weight_offset..params.arch.head_bias_offset;
        for w in &mut params.values[range] {
            *w = rng.gen_range(-bound..bound);
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch.clone())
    }

    fn conv_weights(&self, l: usize) -> &[f64] {
        let c = &self.arch.convs[l];
        &self.values[c.weight_offset..c.weight_offset + c.weight_len()]
    }

    fn conv_bias(&self, l: usize) -> &[f64] {
        let c = &self.arch.convs[l];
        &self.values[c.bias_offset..c.bias_offset + c.out_channels]
    }

    fn head(&self) -> (&[f64], &[f64]) {
        let a = &self.arch;
        (
            &self.values[a.head_weight_offset..a.head_bias_offset],
            &self.values[a.head_bias_offset..a.total],
        )
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Parameter gradients share the parameter layout.
pub type ParamGrads = EncoderParams;

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Input of every convolution (the image, then post-softplus maps).
    pub layer_inputs: Vec<FeatureMap>,
    /// Pre-activation output of every convolution; the last one is the embedding.
    pub pre_activations: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: FeatureMap,
    pub logits: LogitMap,
    pub probs: ProbMap,
    pub trace: ForwardTrace,
}

fn conv_forward(input: &FeatureMap, shape: &ConvShape, weights: &[f64], bias: &[f64]) -> FeatureMap {
    let (h, w) = (input.height(), input.width());
    let s = shape.stride;
    let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
    let (cin, cout) = (shape.in_channels, shape.out_channels);
    let mut out = FeatureMap::zeros(ho, wo, cout);
    for oy in 0..ho {
        for ox in 0..wo {
            let o = out.pixel_mut(oy * wo + ox);
            o.copy_from_slice(bias);
            for ky in 0..KERNEL {
                let iy = (oy * s + ky) as isize - PAD as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (ox * s + kx) as isize - PAD as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let inp = input.pixel(iy as usize * w + ix as usize);
                    let tap = &weights[(ky * KERNEL + kx) * cin * cout..][..cin * cout];
                    for (ci, &a) in inp.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let row = &tap[ci * cout..(ci + 1) * cout];
                        for (oc, &wv) in o.iter_mut().zip(row) {
                            *oc += a * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn conv_backward(
    input: &FeatureMap,
    grad_out: &FeatureMap,
    shape: &ConvShape,
    weights: &[f64],
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<FeatureMap> {
    let (h, w) = (input.height(), input.width());
    let s = shape.stride;
    let (ho, wo) = (grad_out.height(), grad_out.width());
    let (cin, cout) = (shape.in_channels, shape.out_channels);
    let mut grad_in = need_input_grad.then(|| FeatureMap::zeros(h, w, cin));
    for oy in 0..ho {
        for ox in 0..wo {
            let g = grad_out.pixel(oy * wo + ox);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (gb, gv) in grad_bias.iter_mut().zip(g) {
                *gb += gv;
            }
            for ky in 0..KERNEL {
                let iy = (oy * s + ky) as isize - PAD as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let ix = (ox * s + kx) as isize - PAD as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let p = iy as usize * w + ix as usize;
                    let inp = input.pixel(p);
                    let base = (ky * KERNEL + kx) * cin * cout;
                    for ci in 0..cin {
                        let a = inp[ci];
                        let off = base + ci * cout;
                        let gw = &mut grad_weights[off..off + cout];
                        for (gwv, gv) in gw.iter_mut().zip(g) {
                            *gwv += a * gv;
                        }
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        let gip = gi.pixel_mut(p);
                        for (ci, slot) in gip.iter_mut().enumerate() {
                            let row = &weights[base + ci * cout..base + (ci + 1) * cout];
                            *slot += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    grad_in
}

pub fn forward(params: &EncoderParams, image: &ImageGrid) -> Result<ForwardOutput> {
    let arch = &params.arch;
    if image.dim() != arch.in_channels {
        return Err(Error::contract(format!(
            "image has {} channels, encoder expects {}",
            image.dim(),
            arch.in_channels
        )));
    }
    let layers = arch.convs.len();
    let mut layer_inputs = Vec::with_capacity(layers);
    let mut pre_activations = Vec::with_capacity(layers);
    let mut current = image.clone();
    for l in 0..layers {
        let pre = conv_forward(&current, &arch.convs[l], params.conv_weights(l), params.conv_bias(l));
        layer_inputs.push(current);
        current = if l + 1 < layers {
            let mut act = pre.clone();
            act.data_mut().iter_mut().for_each(|v| *v = softplus(*v));
            act
        } else {
            pre.clone()
        };
        pre_activations.push(pre);
    }
    let features = current;
    let (hw, hb) = params.head();
    let d = features.dim();
    let classes = arch.classes;
    let mut logits = FeatureMap::zeros(features.height(), features.width(), classes);
    for p in 0..features.num_pixels() {
        let f = features.pixel(p);
        for (c, z) in logits.pixel_mut(p).iter_mut().enumerate() {
            *z = hb[c] + hw[c * d..(c + 1) * d].iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let probs = ProbMap::from_logits(&logits);
    Ok(ForwardOutput {
        features,
        logits,
        probs,
        trace: ForwardTrace {
            layer_inputs,
            pre_activations,
        },
    })
}

/// Parameter gradient of `Σ ⟨grad_features, f⟩ + Σ ⟨grad_logits, z⟩`.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_features: &FeatureGrad,
    grad_logits: &FeatureGrad,
) -> Result<ParamGrads> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, grad_features, grad_logits, &mut grads)?;
    Ok(grads)
}

/// As [`backward`], accumulating into an existing gradient buffer.
pub fn backward_into(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_features: &FeatureGrad,
    grad_logits: &FeatureGrad,
    grads: &mut ParamGrads,
) -> Result<()> {
    let arch = &params.arch;
    let features = trace
        .pre_activations
        .last()
        .ok_or_else(|| Error::contract("backward: empty trace"))?;
    let (h, w, d) = (features.height(), features.width(), features.dim());
    if !grad_features.same_grid(h, w) || grad_features.dim() != d {
        return Err(Error::contract("backward: feature gradient does not match the trace"));
    }
    if !grad_logits.same_grid(h, w) || grad_logits.dim() != arch.classes {
        return Err(Error::contract("backward: logit gradient does not match the trace"));
    }
    if trace.pre_activations.len() != arch.convs.len() {
        return Err(Error::contract("backward: trace depth does not match the architecture"));
    }

    // linear head
    let (hw, _) = params.head();
    let mut g_feat = grad_features.clone();
    {
        let (gw_all, rest) = grads.values[arch.head_weight_offset..].split_at_mut(arch.classes * d);
        let gb = &mut rest[..arch.classes];
        for p in 0..features.num_pixels() {
            let gz = grad_logits.pixel(p);
            if gz.iter().all(|&v| v == 0.0) {
                continue;
            }
            let f = features.pixel(p);
            let gf = g_feat.pixel_mut(p);
            for (c, &g) in gz.iter().enumerate() {
                gb[c] += g;
                let wrow = &hw[c * d..(c + 1) * d];
                let gwrow = &mut gw_all[c * d..(c + 1) * d];
                for k in 0..d {
                    gwrow[k] += g * f[k];
                    gf[k] += g * wrow[k];
                }
            }
        }
    }

    // convolutions, last to first
    let mut grad_out = g_feat;
    for l in (0..arch.convs.len()).rev() {
        let shape = arch.convs[l];
        if l + 1 < arch.convs.len() {
            // through softplus
            let pre = &trace.pre_activations[l];
            for (g, &z) in grad_out.data_mut().iter_mut().zip(pre.data()) {
                *g *= sigmoid(z);
            }
        }
        let weights = params.conv_weights(l);
        let (gw, gb) = {
            let (a, b) = grads.values.split_at_mut(shape.bias_offset);
            (
                &mut a[shape.weight_offset..shape.weight_offset + shape.weight_len()],
                &mut b[..shape.out_channels],
            )
        };
        let grad_in = conv_backward(&trace.layer_inputs[l], &grad_out, &shape, weights, gw, gb, l > 0);
        if let Some(gi) = grad_in {
            grad_out = gi;
        }
    }
    Ok(())
}

/// Momentum buffers for [`sgd_step`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            velocity: vec![0.0; params.values.len()],
        }
    }
}

/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &ParamGrads,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config("lr", format!("must be nonnegative, got {lr}")));
    }
    if grads.values.len() != params.values.len() || state.velocity.len() != params.values.len() {
        return Err(Error::contract("sgd_step: parameter, gradient and buffer sizes differ"));
    }
    if let Some(i) = grads.values.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of parameter {i}")));
    }
    for ((p, g), v) in params.values.iter_mut().zip(&grads.values).zip(&mut state.velocity) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Rescales `grads` so its L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let n = grads.values.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && n > max_norm {
        let s = max_norm / n;
        grads.values.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// `lr₀ · (1 − t/T)^power`.
pub fn poly_lr(base: f64, iteration: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (iteration as f64 / total as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}
