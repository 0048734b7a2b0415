//! Non-overlapping 2×2 max pooling.

use ndarray::Array3;

use super::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2;

#[derive(Debug)]
pub struct PoolCache {
    /// Winning position within each 2×2 window, encoded as a*2+b.
    argmax: Array3<u8>,
}

impl MaxPool2x2 {
    fn check(x: &FeatureMap) -> Result<()> {
        let (h, w, _) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "max pool requires even spatial dims, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, PoolCache)> {
        Self::check(x)?;
        let (h, w, c) = x.dim();
        let mut y = Array3::<f64>::zeros((h / 2, w / 2, c));
        let mut argmax = Array3::<u8>::zeros((h / 2, w / 2, c));
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for ch in 0..c {
                    // Ties resolve to the first maximum in scan order.
                    let mut best = x[(2 * i, 2 * j, ch)];
                    let mut pos = 0u8;
                    for a in 0..2usize {
                        for b in 0..2usize {
                            let v = x[(2 * i + a, 2 * j + b, ch)];
                            if v > best {
                                best = v;
                                pos = (a * 2 + b) as u8;
                            }
                        }
                    }
                    y[(i, j, ch)] = best;
                    argmax[(i, j, ch)] = pos;
                }
            }
        }
        Ok((y, PoolCache { argmax }))
    }

    pub fn backward(&self, dy: &FeatureMap, cache: &PoolCache) -> FeatureMap {
        let (ph, pw, c) = dy.dim();
        let mut dx = Array3::<f64>::zeros((2 * ph, 2 * pw, c));
        for i in 0..ph {
            for j in 0..pw {
                for ch in 0..c {
                    let pos = cache.argmax[(i, j, ch)] as usize;
                    dx[(2 * i + pos / 2, 2 * j + pos % 2, ch)] = dy[(i, j, ch)];
                }
            }
        }
        dx
    }
}
