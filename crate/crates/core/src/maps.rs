//! Dense per-pixel grids. Every grid is row-major: pixel `p = y * width + x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::softmax_into;

/// Label value marking a pixel with no class. Shared with the PNG label format.
pub const UNLABELED: u8 = 255;

/// Largest number of classes a [`LabelMap`] can carry.
pub const MAX_CLASSES: usize = UNLABELED as usize;

/// `height × width × dim` real-valued grid: pixel embeddings, logits, or their gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Gradient of a scalar loss with respect to a [`FeatureMap`].
pub type FeatureGrad = FeatureMap;

/// Per-pixel pre-softmax class scores.
pub type LogitMap = FeatureMap;

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        assert!(height * width >= 1 && dim >= 1, "empty feature map");
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn from_vec(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height * width == 0 || dim == 0 {
            return Err(Error::contract("feature map needs at least one pixel and one channel"));
        }
        if data.len() != height * width * dim {
            return Err(Error::contract(format!(
                "feature map data has {} values, expected {}",
                data.len(),
                height * width * dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut map = Self::zeros(height, width, dim);
        for p in 0..height * width {
            for d in 0..dim {
                map.data[p * dim + d] = f(p, d);
            }
        }
        map
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn same_grid(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Hard per-pixel assignment: one class index or [`UNLABELED`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn unlabeled(height: usize, width: usize, classes: usize) -> Self {
        assert!(classes <= MAX_CLASSES);
        Self {
            height,
            width,
            classes,
            data: vec![UNLABELED; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if classes > MAX_CLASSES {
            return Err(Error::contract(format!("at most {MAX_CLASSES} classes supported")));
        }
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "label map has {} pixels, expected {}",
                data.len(),
                height * width
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v != UNLABELED && v as usize >= classes) {
            return Err(Error::contract(format!("class index {v} out of range for {classes} classes")));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        classes: usize,
        mut f: impl FnMut(usize) -> Option<usize>,
    ) -> Self {
        let mut map = Self::unlabeled(height, width, classes);
        for p in 0..height * width {
            map.set(p, f(p));
        }
        map
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, p: usize) -> Option<usize> {
        match self.data[p] {
            UNLABELED => None,
            c => Some(c as usize),
        }
    }

    /// Panics on an out-of-range class; labels are produced internally.
    #[inline]
    pub fn set(&mut self, p: usize, class: Option<usize>) {
        self.data[p] = match class {
            Some(c) => {
                assert!(c < self.classes, "class {c} out of range");
                c as u8
            }
            None => UNLABELED,
        };
    }

    /// Dense one-hot view `y(p, c)`.
    pub fn one_hot(&self, p: usize, class: usize) -> f64 {
        if self.get(p) == Some(class) {
            1.0
        } else {
            0.0
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for c in self.data.iter().filter(|&&v| v != UNLABELED) {
            counts[*c as usize] += 1;
        }
        counts
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width && self.classes == other.classes
    }

    /// Nearest-neighbour resampling; source pixel `floor(y * H_in / H_out)`.
    pub fn resample_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = LabelMap::unlabeled(height, width, self.classes);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    pub fn flipped_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }
}

/// Per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn from_logits(logits: &LogitMap) -> Self {
        let classes = logits.dim();
        let mut data = vec![0.0; logits.data().len()];
        for p in 0..logits.num_pixels() {
            softmax_into(logits.pixel(p), &mut data[p * classes..(p + 1) * classes]);
        }
        Self {
            height: logits.height(),
            width: logits.width(),
            classes,
            data,
        }
    }

    /// Validates that every pixel is a probability simplex within 1e-6.
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * classes || classes == 0 {
            return Err(Error::contract("probability map shape mismatch"));
        }
        for (p, row) in data.chunks(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("pixel {p} is not a probability simplex")));
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Highest-probability class and its probability; ties go to the lowest index.
    pub fn argmax(&self, p: usize) -> (usize, f64) {
        argmax(self.pixel(p))
    }

    pub fn prediction(&self) -> LabelMap {
        LabelMap::from_fn(self.height, self.width, self.classes, |p| Some(self.argmax(p).0))
    }
}

/// Index and value of the maximum; the first maximal entry wins ties.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// The semantic label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    count: usize,
    names: Vec<String>,
}

impl ClassSet {
    pub fn new(count: usize) -> Result<Self> {
        Self::with_names((0..count).map(|c| format!("class{c}")).collect())
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 || names.len() > MAX_CLASSES {
            return Err(Error::contract(format!(
                "class set needs between 2 and {MAX_CLASSES} classes, got {}",
                names.len()
            )));
        }
        Ok(Self {
            count: names.len(),
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing_round_trip() {
        let map = FeatureMap::from_fn(3, 4, 2, |p, d| (p * 10 + d) as f64);
        for y in 0..3 {
            for x in 0..4 {
                let p = y * 4 + x;
                assert_eq!(map.pixel(p), &[(p * 10) as f64, (p * 10 + 1) as f64]);
            }
        }
        let labels = LabelMap::from_fn(3, 4, 5, |p| Some(p % 5));
        let flipped = labels.flipped_horizontal();
        assert_eq!(flipped.get(0), labels.get(3));
        assert_eq!(flipped.flipped_horizontal(), labels);
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        assert!(matches!(
            FeatureMap::from_vec(1, 1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(FeatureMap::from_vec(1, 2, 2, vec![1.0; 3]).is_err());
        assert!(FeatureMap::from_vec(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range_class() {
        assert!(LabelMap::from_vec(1, 2, 3, vec![0, 3]).is_err());
        let ok = LabelMap::from_vec(1, 2, 3, vec![2, UNLABELED]).unwrap();
        assert_eq!(ok.get(0), Some(2));
        assert_eq!(ok.get(1), None);
        assert_eq!(ok.one_hot(0, 2), 1.0);
        assert_eq!(ok.one_hot(1, 2), 0.0);
    }

    #[test]
    fn nearest_resample_halves_and_restores() {
        let labels = LabelMap::from_fn(4, 4, 4, |p| Some((p / 4) % 4));
        let half = labels.resample_nearest(2, 2);
        assert_eq!(half.raw(), &[0, 0, 2, 2]);
        let back = half.resample_nearest(4, 4);
        assert_eq!(back.get(4), Some(0));
        assert_eq!(back.get(8), Some(2));
        assert_eq!(labels.resample_nearest(4, 4), labels);
    }

    #[test]
    fn prob_map_from_logits_is_simplex() {
        let logits = FeatureMap::from_fn(2, 2, 3, |p, d| (p as f64) * 0.3 - d as f64);
        let probs = ProbMap::from_logits(&logits);
        for p in 0..4 {
            assert!((probs.pixel(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(probs.argmax(0).0, 0);
        assert!(ProbMap::from_vec(1, 1, 2, vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn argmax_ties_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]).0, 1);
    }

    #[test]
    fn class_set_needs_two() {
        assert!(ClassSet::new(1).is_err());
        assert_eq!(ClassSet::new(5).unwrap().len(), 5);
    }
}
