//! Horizontal flip and scale jitter, applied identically to an image and all
//! label maps that belong to it.

use rand::Rng;

use super::config::Augmentation;
use crate::maps::{FeatureMap, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    pub flip: bool,
    pub height: usize,
    pub width: usize,
}

impl Transform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip: false,
            height,
            width,
        }
    }

    pub fn sample(aug: &Augmentation, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let flip = aug.flip && rng.gen_bool(0.5);
        let scale = if aug.scale_max > aug.scale_min {
            rng.gen_range(aug.scale_min..aug.scale_max)
        } else {
            aug.scale_min
        };
        let size = |n: usize| ((n as f64 * scale).round() as usize).max(4);
        Self {
            flip,
            height: size(height),
            width: size(width),
        }
    }

    pub fn apply_image(&self, image: &FeatureMap) -> FeatureMap {
        let (h, w) = (image.height(), image.width());
        let dim = image.dim();
        FeatureMap::from_fn(self.height, self.width, dim, |p, d| {
            let (y, x) = (p / self.width, p % self.width);
            let sy = y * h / self.height;
            let mut sx = x * w / self.width;
            if self.flip {
                sx = w - 1 - sx;
            }
            image.pixel(sy * w + sx)[d]
        })
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        let (h, w) = (labels.height(), labels.width());
        LabelMap::from_fn(self.height, self.width, labels.classes(), |p| {
            let (y, x) = (p / self.width, p % self.width);
            let sy = y * h / self.height;
            let mut sx = x * w / self.width;
            if self.flip {
                sx = w - 1 - sx;
            }
            labels.get(sy * w + sx)
        })
    }
}
