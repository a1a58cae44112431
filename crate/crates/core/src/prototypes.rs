//! Class prototypes: masked average pooling over labelled pixels, per-domain
//! EMA prototype banks, the class-wise domain bias between the two banks, and
//! bias-calibrated source prototypes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{FeatureGrad, FeatureMap, LabelMap};

/// Mean feature of one class together with the number of pixels averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub pixel_count: usize,
}

/// Prototypes for the classes that actually occur in some labelled pixels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeSet {
    dim: usize,
    entries: BTreeMap<usize, Prototype>,
}

impl PrototypeSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    /// Classes in ascending order.
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.entries.iter().map(|(c, p)| (*c, p))
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f64>, pixel_count: usize) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::contract(format!(
                "prototype for class {class} has dimension {}, set expects {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.insert(class, Prototype { vector, pixel_count });
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for proto in out.entries.values_mut() {
            proto.vector.iter_mut().for_each(|v| *v *= alpha);
        }
        out
    }
}

/// `ρ(c) = Σ_p f(p)·y(p,c) / Σ_p y(p,c)` for every class with at least one pixel.
pub fn masked_average_pool(features: &FeatureMap, labels: &LabelMap) -> Result<PrototypeSet> {
    masked_average_pool_batch(std::slice::from_ref(features), std::slice::from_ref(labels))
}

/// Pools over all pixels of all images in the batch as one population.
pub fn masked_average_pool_batch(
    features: &[FeatureMap],
    labels: &[LabelMap],
) -> Result<PrototypeSet> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::contract(format!(
            "masked_average_pool: {} feature maps vs {} label maps",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, y) in features.iter().zip(labels) {
        if !f.same_grid(y.height(), y.width()) {
            return Err(Error::contract(format!(
                "masked_average_pool: features are {}x{}, labels {}x{}",
                f.height(),
                f.width(),
                y.height(),
                y.width()
            )));
        }
        if f.dim() != dim {
            return Err(Error::contract("masked_average_pool: mixed feature dimensions"));
        }
        for p in 0..f.num_pixels() {
            if let Some(c) = y.get(p) {
                let (sum, count) = sums.entry(c).or_insert_with(|| (vec![0.0; dim], 0));
                for (s, v) in sum.iter_mut().zip(f.pixel(p)) {
                    *s += v;
                }
                *count += 1;
            }
        }
    }
    let mut set = PrototypeSet::empty(dim);
    for (c, (mut sum, count)) in sums {
        let n = count as f64;
        sum.iter_mut().for_each(|v| *v /= n);
        set.entries.insert(
            c,
            Prototype {
                vector: sum,
                pixel_count: count,
            },
        );
    }
    Ok(set)
}

/// Chains `∂L/∂ρ(c)` back onto the pooled pixels: each pixel of class `c`
/// receives `∂L/∂ρ(c) / n_c`.
pub fn masked_average_pool_backward(
    labels: &[LabelMap],
    pooled: &PrototypeSet,
    grad_protos: &BTreeMap<usize, Vec<f64>>,
    grads: &mut [FeatureGrad],
) {
    for (y, g) in labels.iter().zip(grads.iter_mut()) {
        for p in 0..y.num_pixels() {
            let Some(c) = y.get(p) else { continue };
            let (Some(gc), Some(proto)) = (grad_protos.get(&c), pooled.get(c)) else {
                continue;
            };
            let inv = 1.0 / proto.pixel_count as f64;
            for (o, v) in g.pixel_mut(p).iter_mut().zip(gc) {
                *o += v * inv;
            }
        }
    }
}

/// Slowly moving per-class prototype store for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    momentum: f64,
    dim: usize,
    mu: Vec<Vec<f64>>,
    initialized: Vec<bool>,
}

fn check_momentum(momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config(
            "ema_momentum",
            format!("must lie in [0, 1], got {momentum}"),
        ));
    }
    Ok(())
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self {
            momentum,
            dim,
            mu: vec![vec![0.0; dim]; classes],
            initialized: vec![false; classes],
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
    pub fn classes(&self) -> usize {
        self.mu.len()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `None` until the class has been observed at least once.
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        if *self.initialized.get(class)? {
            Some(&self.mu[class])
        } else {
            None
        }
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    /// `μ(c) ← λμ(c) + (1−λ)ρ(c)` for each class in `fresh`; the first
    /// observation of a class is copied verbatim.
    pub fn update(&mut self, fresh: &PrototypeSet) -> Result<()> {
        check_momentum(self.momentum)?;
        if fresh.dim() != self.dim && !fresh.is_empty() {
            return Err(Error::contract(format!(
                "bank dimension {} vs prototypes {}",
                self.dim,
                fresh.dim()
            )));
        }
        let lambda = self.momentum;
        for (c, proto) in fresh.iter() {
            if c >= self.mu.len() {
                return Err(Error::contract(format!("class {c} outside bank of {}", self.mu.len())));
            }
            if self.initialized[c] {
                for (m, r) in self.mu[c].iter_mut().zip(&proto.vector) {
                    *m = lambda * *m + (1.0 - lambda) * r;
                }
            } else {
                self.mu[c].clone_from(&proto.vector);
                self.initialized[c] = true;
            }
        }
        Ok(())
    }

    /// Checks internal array shapes, e.g. after deserialization.
    pub fn check_consistent(&self) -> Result<()> {
        check_momentum(self.momentum)?;
        if self.mu.len() != self.initialized.len() || self.mu.iter().any(|v| v.len() != self.dim) {
            return Err(Error::contract("prototype bank arrays are inconsistent"));
        }
        if self.mu.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype bank entry".into()));
        }
        Ok(())
    }
}

/// Functional form of [`PrototypeBank::update`].
pub fn ema_update(mut bank: PrototypeBank, fresh: &PrototypeSet) -> Result<PrototypeBank> {
    bank.update(fresh)?;
    Ok(bank)
}

/// Per-class offset `ξ(c)` from the source bank to the target bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMap {
    xi: Vec<Vec<f64>>,
}

impl BiasMap {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            xi: vec![vec![0.0; dim]; classes],
        }
    }

    pub fn from_vectors(xi: Vec<Vec<f64>>) -> Self {
        Self { xi }
    }

    pub fn get(&self, class: usize) -> &[f64] {
        &self.xi[class]
    }

    pub fn classes(&self) -> usize {
        self.xi.len()
    }

    pub fn negated(&self) -> Self {
        Self {
            xi: self
                .xi
                .iter()
                .map(|v| v.iter().map(|x| -x).collect())
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.xi.iter().flatten().all(|&v| v == 0.0)
    }
}

/// `ξ(c) = μ_T(c) − μ_S(c)` where both banks know the class, zero elsewhere.
pub fn domain_bias(source: &PrototypeBank, target: &PrototypeBank) -> Result<BiasMap> {
    if source.classes() != target.classes() || source.dim() != target.dim() {
        return Err(Error::contract("domain_bias: banks disagree on classes or dimension"));
    }
    let xi = (0..source.classes())
        .map(|c| match (source.get(c), target.get(c)) {
            (Some(s), Some(t)) => t.iter().zip(s).map(|(t, s)| t - s).collect(),
            _ => vec![0.0; source.dim()],
        })
        .collect();
    Ok(BiasMap { xi })
}

/// `ρ_{S→T}(c) = ρ_S(c) + ξ(c)`; pixel counts are carried over.
pub fn calibrate(instance: &PrototypeSet, bias: &BiasMap) -> Result<PrototypeSet> {
    let mut out = PrototypeSet::empty(instance.dim());
    for (c, proto) in instance.iter() {
        if c >= bias.classes() {
            return Err(Error::contract(format!("no bias entry for class {c}")));
        }
        let xi = bias.get(c);
        if xi.len() != proto.vector.len() {
            return Err(Error::contract("calibrate: bias and prototype dimensions differ"));
        }
        let vector = proto.vector.iter().zip(xi).map(|(r, x)| r + x).collect();
        out.insert(c, vector, proto.pixel_count)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, h: usize, w: usize, d: usize, classes: usize) -> (FeatureMap, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = FeatureMap::from_fn(h, w, d, |_, _| rng.gen_range(-2.0..2.0));
        let y = LabelMap::from_fn(h, w, classes, |_| {
            let v = rng.gen_range(0..=classes);
            (v < classes).then_some(v)
        });
        (f, y)
    }

    /// Straight double loop over classes and pixels.
    fn brute_force_pool(f: &FeatureMap, y: &LabelMap) -> BTreeMap<usize, Vec<f64>> {
        let mut out = BTreeMap::new();
        for c in 0..y.classes() {
            let mut num = vec![0.0; f.dim()];
            let mut den = 0.0;
            for p in 0..f.num_pixels() {
                let yc = y.one_hot(p, c);
                for d in 0..f.dim() {
                    num[d] += f.pixel(p)[d] * yc;
                }
                den += yc;
            }
            if den >= 1.0 {
                out.insert(c, num.iter().map(|v| v / den).collect());
            }
        }
        out
    }

    #[test]
    fn pool_mean_of_two() {
        let f = FeatureMap::from_vec(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = LabelMap::from_vec(1, 2, 4, vec![0, 0]).unwrap();
        let set = masked_average_pool(&f, &y).unwrap();
        assert_eq!(set.get(0).unwrap().vector, vec![0.5, 0.5]);
        assert_eq!(set.get(0).unwrap().pixel_count, 2);
        assert!(set.get(3).is_none());
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn pool_matches_brute_force() {
        for seed in 0..20 {
            let (f, y) = random_instance(seed, 4, 4, 3, 3);
            let set = masked_average_pool(&f, &y).unwrap();
            let oracle = brute_force_pool(&f, &y);
            assert_eq!(set.classes().collect::<Vec<_>>(), oracle.keys().copied().collect::<Vec<_>>());
            for (c, v) in oracle {
                for (a, b) in set.get(c).unwrap().vector.iter().zip(&v) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_shape_mismatch() {
        let f = FeatureMap::zeros(2, 2, 1);
        let y = LabelMap::unlabeled(2, 3, 2);
        assert!(matches!(masked_average_pool(&f, &y), Err(Error::Contract(_))));
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let (f, y) = random_instance(7, 3, 3, 2, 3);
        let set = masked_average_pool(&f, &y).unwrap();
        // L = Σ_c w_c · ρ(c)
        let weights: BTreeMap<usize, Vec<f64>> =
            set.classes().map(|c| (c, vec![0.3 + c as f64, -0.7])).collect();
        let loss = |f: &FeatureMap| -> f64 {
            let s = masked_average_pool(f, &y).unwrap();
            s.iter()
                .map(|(c, p)| p.vector.iter().zip(&weights[&c]).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let mut grads = vec![FeatureMap::zeros(3, 3, 2)];
        masked_average_pool_backward(std::slice::from_ref(&y), &set, &weights, &mut grads);
        for i in 0..f.data().len() {
            let mut plus = f.clone();
            let mut minus = f.clone();
            plus.data_mut()[i] += 1e-5;
            minus.data_mut()[i] -= 1e-5;
            let fd = (loss(&plus) - loss(&minus)) / 2e-5;
            assert!((fd - grads[0].data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn ema_cases() {
        let mut fresh = PrototypeSet::empty(2);
        fresh.insert(0, vec![1.0, 0.0], 1).unwrap();
        let bank = ema_update(PrototypeBank::new(2, 2, 0.9).unwrap(), &fresh).unwrap();
        assert_eq!(bank.get(0).unwrap(), &[1.0, 0.0]);
        assert!(bank.get(1).is_none());

        let mut second = PrototypeSet::empty(2);
        second.insert(0, vec![0.0, 1.0], 1).unwrap();
        let bank = ema_update(bank, &second).unwrap();
        let mu = bank.get(0).unwrap();
        assert!((mu[0] - 0.9).abs() < 1e-15 && (mu[1] - 0.1).abs() < 1e-15);

        let frozen = ema_update(
            ema_update(PrototypeBank::new(2, 2, 1.0).unwrap(), &fresh).unwrap(),
            &second,
        )
        .unwrap();
        assert_eq!(frozen.get(0).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn ema_rejects_bad_momentum() {
        assert!(matches!(PrototypeBank::new(2, 2, 1.5), Err(Error::Config { .. })));
        assert!(matches!(PrototypeBank::new(2, 2, -0.1), Err(Error::Config { .. })));
    }

    #[test]
    fn bias_cases() {
        let mut s = PrototypeBank::new(2, 2, 0.5).unwrap();
        let mut t = PrototypeBank::new(2, 2, 0.5).unwrap();
        let mut ps = PrototypeSet::empty(2);
        ps.insert(0, vec![0.5, 1.0], 1).unwrap();
        ps.insert(1, vec![3.0, 3.0], 1).unwrap();
        let mut pt = PrototypeSet::empty(2);
        pt.insert(0, vec![1.0, 2.0], 1).unwrap();
        s.update(&ps).unwrap();
        t.update(&pt).unwrap();
        let xi = domain_bias(&s, &t).unwrap();
        assert_eq!(xi.get(0), &[0.5, 1.0]);
        // class 1 unknown to the target bank
        assert_eq!(xi.get(1), &[0.0, 0.0]);
        assert!(domain_bias(&s, &s).unwrap().is_zero());
    }

    #[test]
    fn calibrate_cases() {
        let mut rho = PrototypeSet::empty(2);
        rho.insert(0, vec![1.0, 0.0], 4).unwrap();
        let xi = BiasMap::from_vectors(vec![vec![-1.0, 1.0], vec![0.0, 0.0]]);
        let cal = calibrate(&rho, &xi).unwrap();
        assert_eq!(cal.get(0).unwrap().vector, vec![0.0, 1.0]);
        assert_eq!(cal.get(0).unwrap().pixel_count, 4);
        assert_eq!(calibrate(&rho, &BiasMap::zeros(2, 2)).unwrap(), rho);
    }

    proptest! {
        #[test]
        fn pool_permutation_invariant_and_homogeneous(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let (f, y) = random_instance(seed, 3, 4, 3, 3);
            let base = masked_average_pool(&f, &y).unwrap();
            // reverse pixel order
            let n = f.num_pixels();
            let fr = FeatureMap::from_fn(3, 4, 3, |p, d| f.pixel(n - 1 - p)[d]);
            let yr = LabelMap::from_fn(3, 4, 3, |p| y.get(n - 1 - p));
            let rev = masked_average_pool(&fr, &yr).unwrap();
            let scaled = masked_average_pool(&f.scaled(alpha), &y).unwrap();
            for (c, proto) in base.iter() {
                for d in 0..3 {
                    prop_assert!((proto.vector[d] - rev.get(c).unwrap().vector[d]).abs() < 1e-12);
                    prop_assert!((alpha * proto.vector[d] - scaled.get(c).unwrap().vector[d]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn pool_within_feature_hull(seed in 0u64..1000) {
            let (f, y) = random_instance(seed, 4, 4, 2, 3);
            let set = masked_average_pool(&f, &y).unwrap();
            for (c, proto) in set.iter() {
                prop_assert!(proto.pixel_count >= 1);
                for d in 0..2 {
                    let vals: Vec<f64> = (0..16).filter(|&p| y.get(p) == Some(c)).map(|p| f.pixel(p)[d]).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(proto.vector[d] >= lo - 1e-12 && proto.vector[d] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn ema_stays_in_convex_hull(
            lambda in 0.0f64..=1.0,
            old in prop::collection::vec(-5.0f64..5.0, 3),
            new in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let mut bank = PrototypeBank::new(1, 3, lambda).unwrap();
            let mut first = PrototypeSet::empty(3);
            first.insert(0, old.clone(), 1).unwrap();
            bank.update(&first).unwrap();
            let mut second = PrototypeSet::empty(3);
            second.insert(0, new.clone(), 1).unwrap();
            bank.update(&second).unwrap();
            let mu = bank.get(0).unwrap();
            for d in 0..3 {
                prop_assert!(mu[d] >= old[d].min(new[d]) - 1e-12);
                prop_assert!(mu[d] <= old[d].max(new[d]) + 1e-12);
            }
        }

        #[test]
        fn calibrate_round_trip(seed in 0u64..1000) {
            let (f, y) = random_instance(seed, 4, 4, 3, 3);
            let rho = masked_average_pool(&f, &y).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let xi = BiasMap::from_vectors((0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
            let back = calibrate(&calibrate(&rho, &xi).unwrap(), &xi.negated()).unwrap();
            for (c, proto) in rho.iter() {
                for d in 0..3 {
                    prop_assert!((proto.vector[d] - back.get(c).unwrap().vector[d]).abs() < 1e-12);
                }
            }
        }
    }
}
