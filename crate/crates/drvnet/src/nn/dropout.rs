//! Inverted dropout with caller-supplied RNG.

use rand::Rng;

use super::{FeatureMap, GradStore};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
}

#[derive(Debug)]
pub struct DropoutCache {
    /// None when the pass was a pure pass-through; otherwise the kept
    /// entries hold 1/keep and dropped entries hold 0.
    mask: Option<FeatureMap>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        x.clone()
    }

    /// `active` comes from the training context; with rate 0 or inactive
    /// dropout no RNG draws are consumed at all.
    pub fn forward_train(
        &self,
        x: &FeatureMap,
        active: bool,
        rng: &mut SeedRng,
    ) -> (FeatureMap, DropoutCache) {
        if !active || self.rate == 0.0 {
            return (x.clone(), DropoutCache { mask: None });
        }
        let keep = 1.0 - self.rate;
        let inv = 1.0 / keep;
        let mask = FeatureMap::from_shape_simple_fn(x.raw_dim(), || {
            if rng.gen::<f64>() < keep {
                inv
            } else {
                0.0
            }
        });
        (x * &mask, DropoutCache { mask: Some(mask) })
    }

    pub fn backward(&self, dy: &FeatureMap, cache: &DropoutCache, _grads: &mut GradStore) -> FeatureMap {
        match &cache.mask {
            Some(m) => dy * m,
            None => dy.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use ndarray::Array3;

    #[test]
    fn inactive_pass_is_bitwise_identity() {
        let d = Dropout::new(0.4).unwrap();
        let x = Array3::from_shape_fn((3, 3, 2), |(i, j, c)| (i + 10 * j + 100 * c) as f64 * 0.1);
        let mut rng = substream(41, Stream::Custom(13));
        let (y, _) = d.forward_train(&x, false, &mut rng);
        assert_eq!(x, y);
        let y2 = d.forward(&x);
        assert_eq!(x, y2);
    }

    #[test]
    fn active_pass_preserves_expectation_roughly() {
        let d = Dropout::new(0.5).unwrap();
        let x = Array3::from_elem((40, 40, 1), 1.0);
        let mut rng = substream(42, Stream::Custom(14));
        let (y, _) = d.forward_train(&x, true, &mut rng);
        let mean = y.sum() / 1600.0;
        assert!((mean - 1.0).abs() < 0.1, "mean {mean}");
        // Kept entries are scaled by exactly 1/keep.
        for v in y.iter() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_rate_rejected() {
        assert!(Dropout::new(1.0).is_err());
        assert!(Dropout::new(-0.1).is_err());
    }
}
