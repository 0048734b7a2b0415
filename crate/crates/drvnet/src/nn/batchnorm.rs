//! Per-channel batch normalization over the spatial axes.

use ndarray::{Array1, ArrayD, Axis};

use super::{FeatureMap, GradStore, ParamVisit};
use crate::error::{Error, Result};

/// Defaults follow the common convention for image models.
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    name: String,
    gamma: ArrayD<f64>,
    beta: ArrayD<f64>,
    moving_mean: ArrayD<f64>,
    moving_var: ArrayD<f64>,
    momentum: f64,
    eps: f64,
    c: usize,
}

#[derive(Debug)]
pub struct BnCache {
    xhat: FeatureMap,
    inv_std: Array1<f64>,
    /// Whether the forward normalized with batch statistics (full
    /// backward) or moving statistics (pure scaling backward).
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config(format!("{name}: zero channel count")));
        }
        Ok(BatchNorm2d {
            name: name.to_string(),
            gamma: super::ones(&[c]),
            beta: super::zeros(&[c]),
            moving_mean: super::zeros(&[c]),
            moving_var: super::ones(&[c]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            c,
        })
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.dim().2 != self.c {
            return Err(Error::InvalidInput(format!(
                "{}: expected {} channels, got {}",
                self.name,
                self.c,
                x.dim().2
            )));
        }
        Ok(())
    }

    fn gamma1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.gamma.view().into_dimensionality().unwrap()
    }

    fn beta1(&self) -> ndarray::ArrayView1<'_, f64> {
        self.beta.view().into_dimensionality().unwrap()
    }

    /// Inference: normalize with moving statistics.
    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let mm = self.moving_mean.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mv = self.moving_var.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.clone();
        for (c, mut lane) in y.axis_iter_mut(Axis(2)).enumerate() {
            let inv = 1.0 / (mv[c] + self.eps).sqrt();
            let (g, b, m) = (self.gamma1()[c], self.beta1()[c], mm[c]);
            lane.mapv_inplace(|v| (v - m) * inv * g + b);
        }
        Ok(y)
    }

    /// Training-mode forward. With `frozen_stats` the moving statistics
    /// are used unchanged; otherwise batch statistics are computed over
    /// the spatial axes and folded into the moving averages.
    pub fn forward_train(&mut self, x: &FeatureMap, frozen_stats: bool) -> Result<(FeatureMap, BnCache)> {
        self.check_input(x)?;
        let (h, w, c) = x.dim();
        let n = (h * w) as f64;

        let (mean, var) = if frozen_stats {
            (
                self.moving_mean.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned(),
                self.moving_var.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned(),
            )
        } else {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for (ch, lane) in x.axis_iter(Axis(2)).enumerate() {
                let m = lane.sum() / n;
                mean[ch] = m;
                var[ch] = lane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            }
            {
                let mut mm = self.moving_mean.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                let mut mv = self.moving_var.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                for ch in 0..c {
                    mm[ch] = self.momentum * mm[ch] + (1.0 - self.momentum) * mean[ch];
                    mv[ch] = self.momentum * mv[ch] + (1.0 - self.momentum) * var[ch];
                }
            }
            (mean, var)
        };

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        for (ch, mut lane) in xhat.axis_iter_mut(Axis(2)).enumerate() {
            let (m, inv) = (mean[ch], inv_std[ch]);
            lane.mapv_inplace(|v| (v - m) * inv);
        }
        let mut y = xhat.clone();
        for (ch, mut lane) in y.axis_iter_mut(Axis(2)).enumerate() {
            let (g, b) = (self.gamma1()[ch], self.beta1()[ch]);
            lane.mapv_inplace(|v| v * g + b);
        }
        Ok((y, BnCache { xhat, inv_std, batch_stats: !frozen_stats }))
    }

    pub fn backward(&self, dy: &FeatureMap, cache: &BnCache, grads: &mut GradStore) -> FeatureMap {
        let (h, w, c) = dy.dim();
        let n = (h * w) as f64;
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let dl = dy.index_axis(Axis(2), ch);
            let xl = cache.xhat.index_axis(Axis(2), ch);
            dgamma[ch] = dl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum();
            dbeta[ch] = dl.sum();
        }

        let mut dx = dy.clone();
        if cache.batch_stats {
            // dx = gamma*inv_std/n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
            for (ch, mut lane) in dx.axis_iter_mut(Axis(2)).enumerate() {
                let scale = self.gamma1()[ch] * cache.inv_std[ch] / n;
                let (sd, sdx) = (dbeta[ch], dgamma[ch]);
                let xl = cache.xhat.index_axis(Axis(2), ch);
                ndarray::Zip::from(&mut lane).and(&xl).for_each(|d, &xh| {
                    *d = scale * (n * *d - sd - xh * sdx);
                });
            }
        } else {
            for (ch, mut lane) in dx.axis_iter_mut(Axis(2)).enumerate() {
                let scale = self.gamma1()[ch] * cache.inv_std[ch];
                lane.mapv_inplace(|v| v * scale);
            }
        }

        grads.accumulate(&format!("{}/gamma", self.name), dgamma.into_dyn());
        grads.accumulate(&format!("{}/beta", self.name), dbeta.into_dyn());
        dx
    }
}

impl ParamVisit for BatchNorm2d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}/gamma", self.name), &self.gamma);
        f(&format!("{}/beta", self.name), &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}/gamma", self.name), &mut self.gamma);
        f(&format!("{}/beta", self.name), &mut self.beta);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}/moving_mean", self.name), &self.moving_mean);
        f(&format!("{}/moving_var", self.name), &self.moving_var);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}/moving_mean", self.name), &mut self.moving_mean);
        f(&format!("{}/moving_var", self.name), &mut self.moving_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn batch_mode_normalizes_each_channel() {
        let mut rng = substream(21, Stream::Custom(7));
        let mut bn = BatchNorm2d::new("t/bn", 3).unwrap();
        let x = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(-2.0..5.0));
        let (y, _) = bn.forward_train(&x, false).unwrap();
        for ch in 0..3 {
            let lane = y.index_axis(Axis(2), ch);
            let m = lane.sum() / 64.0;
            let v = lane.iter().map(|u| (u - m) * (u - m)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-10);
            // Variance shrinks slightly below 1 because of eps.
            assert!((v - 1.0).abs() < 0.05, "var {v}");
        }
    }

    #[test]
    fn fresh_layer_in_inference_mode_is_near_identity() {
        let mut rng = substream(22, Stream::Custom(8));
        let bn = BatchNorm2d::new("t/bn", 2).unwrap();
        let x = Array3::from_shape_fn((4, 4, 2), |_| rng.gen_range(-1.0..1.0));
        let y = bn.forward(&x).unwrap();
        let scale = 1.0 / (1.0f64 + BN_EPS).sqrt();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a * scale - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moving_stats_update_follows_momentum() {
        let mut bn = BatchNorm2d::new("t/bn", 1).unwrap();
        let x = Array3::from_elem((2, 2, 1), 4.0);
        bn.forward_train(&x, false).unwrap();
        let mm = bn.moving_mean[[0]];
        assert!((mm - (0.99 * 0.0 + 0.01 * 4.0)).abs() < 1e-12);
        let mv = bn.moving_var[[0]];
        assert!((mv - (0.99 * 1.0 + 0.01 * 0.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_mode_leaves_moving_stats_untouched() {
        let mut bn = BatchNorm2d::new("t/bn", 1).unwrap();
        let x = Array3::from_elem((2, 2, 1), 4.0);
        let before = bn.moving_mean.clone();
        bn.forward_train(&x, true).unwrap();
        assert_eq!(bn.moving_mean, before);
    }

    #[test]
    fn batch_backward_matches_finite_differences() {
        let mut rng = substream(23, Stream::Custom(9));
        let mut bn = BatchNorm2d::new("t/bn", 2).unwrap();
        bn.gamma[[0]] = 1.3;
        bn.gamma[[1]] = 0.7;
        bn.beta[[0]] = -0.2;
        let x = Array3::from_shape_fn((3, 3, 2), |_| rng.gen_range(-1.0..1.0));
        let wsum = Array3::from_shape_fn((3, 3, 2), |_| rng.gen_range(-1.0..1.0));

        let mut probe = bn.clone();
        let (_, cache) = probe.forward_train(&x, false).unwrap();
        let mut grads = GradStore::new();
        let dx = probe.backward(&wsum, &cache, &mut grads);

        let f = |xp: &FeatureMap| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(xp, false).unwrap();
            y.iter().zip(wsum.iter()).map(|(a, c)| a * c).sum()
        };
        let h = 1e-6;
        for idx in [(0usize, 0usize, 0usize), (1, 2, 1), (2, 2, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let fp = f(&xp);
            xp[idx] -= 2.0 * h;
            let fm = f(&xp);
            let num = (fp - fm) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-5, "bn dx mismatch at {idx:?}: {num} vs {}", dx[idx]);
        }
    }
}
