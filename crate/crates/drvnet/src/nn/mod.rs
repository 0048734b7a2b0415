//! Minimal CNN substrate: layers with explicit forward and backward passes.
//!
//! Everything runs in `f64` on the CPU. Each layer exposes
//!
//! * `forward(&self, x)` — inference; no caches, no stat updates,
//!   dropout inactive;
//! * `forward_train(&mut self, x, ctx)` — returns the output plus a cache
//!   holding exactly what `backward` needs;
//! * `backward(&self, dy, cache, grads)` — writes named parameter
//!   gradients into a [`GradStore`] and returns the input gradient.
//!
//! Parameters live inside the layer structs and are reached uniformly
//! through [`ParamVisit`], keyed by slash-separated names
//! (`backbone/level0/rdn/dense/conv/w`). The optimizer, the checkpoint
//! archive and the phase-2 freeze all select parameters by those names.

mod batchnorm;
mod conv;
mod convt;
mod dense;
mod dropout;
pub mod fdcheck;
mod linalg;
mod pool;

pub use batchnorm::{BatchNorm2d, BnCache, BN_EPS, BN_MOMENTUM};
pub use conv::{Conv2d, ConvCache};
pub use convt::{ConvTranspose2x2, ConvTCache};
pub use dense::{Dense, DenseCache};
pub use dropout::{Dropout, DropoutCache};
pub use linalg::im2col;
pub use pool::{MaxPool2x2, PoolCache};

use indexmap::IndexMap;
use ndarray::{Array3, ArrayD};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Rank-3 activation tensor, indexed (row, col, channel).
pub type FeatureMap = Array3<f64>;

/// Check the basic feature-map contract: nonempty dims, finite entries.
pub fn validate_feature_map(x: &FeatureMap) -> Result<()> {
    let (h, w, c) = x.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidInput(format!(
            "feature map has degenerate shape {h}x{w}x{c}"
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(
            "feature map contains non-finite entries".into(),
        ));
    }
    Ok(())
}

/// How a training-mode forward pass should treat stochastic and
/// statistic-bearing layers.
pub struct TrainCtx<'a> {
    /// Source for dropout draws.
    pub rng: &'a mut SeedRng,
    /// When true, batch norm normalizes with its moving statistics and
    /// does not update them (used for gradient checks and frozen parts).
    pub frozen_stats: bool,
    /// When false, dropout is a pass-through even if its rate is nonzero.
    pub dropout: bool,
}

impl<'a> TrainCtx<'a> {
    /// Regular training: batch statistics, active dropout.
    pub fn train(rng: &'a mut SeedRng) -> Self {
        TrainCtx { rng, frozen_stats: false, dropout: true }
    }

    /// Deterministic differentiable mode: moving statistics, no dropout.
    pub fn frozen(rng: &'a mut SeedRng) -> Self {
        TrainCtx { rng, frozen_stats: true, dropout: false }
    }
}

/// Accumulator for named parameter gradients.
#[derive(Debug, Default, Clone)]
pub struct GradStore {
    grads: IndexMap<String, ArrayD<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `g` into the slot for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, g: ArrayD<f64>) {
        match self.grads.get_mut(name) {
            Some(slot) => {
                debug_assert_eq!(slot.shape(), g.shape(), "gradient shape drift for {name}");
                *slot += &g;
            }
            None => {
                self.grads.insert(name.to_string(), g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Multiply every gradient by `s` (batch averaging).
    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }

    /// Fold `other` into `self` with weight `s`.
    pub fn merge_scaled(&mut self, other: GradStore, s: f64) {
        for (name, mut g) in other.grads {
            g.mapv_inplace(|v| v * s);
            self.accumulate(&name, g);
        }
    }
}

/// Uniform access to a model's named parameters and persistent state
/// (batch-norm moving statistics).
pub trait ParamVisit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>));
    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        let _ = f;
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        let _ = f;
    }
}

/// Snapshot all parameters of `m` into a name→tensor map.
pub fn collect_params(m: &dyn ParamVisit) -> IndexMap<String, ArrayD<f64>> {
    let mut out = IndexMap::new();
    m.visit_params(&mut |name, p| {
        out.insert(name.to_string(), p.clone());
    });
    out
}

/// Snapshot all persistent state of `m` into a name→tensor map.
pub fn collect_state(m: &dyn ParamVisit) -> IndexMap<String, ArrayD<f64>> {
    let mut out = IndexMap::new();
    m.visit_state(&mut |name, p| {
        out.insert(name.to_string(), p.clone());
    });
    out
}

/// Total number of trainable scalars in `m`.
pub fn param_count(m: &dyn ParamVisit) -> usize {
    let mut n = 0;
    m.visit_params(&mut |_, p| n += p.len());
    n
}

/// He-uniform draw: U(-limit, limit) with limit = sqrt(6 / fan_in).
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut SeedRng) -> ArrayD<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.gen_range(-limit..limit))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(shape.to_vec())
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(shape.to_vec(), 1.0)
}

/// Elementwise max(x, 0).
pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward through relu given the forward *output*.
pub fn relu_bwd(dy: &FeatureMap, y: &FeatureMap) -> FeatureMap {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Elementwise logistic function.
pub fn sigmoid(x: &FeatureMap) -> FeatureMap {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_bwd(dy: &FeatureMap, y: &FeatureMap) -> FeatureMap {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d *= yv * (1.0 - yv);
    });
    dx
}
