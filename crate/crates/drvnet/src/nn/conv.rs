//! Same-padded square convolution via im2col GEMM.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::linalg::{col2im, im2col, row_major};
use super::{he_uniform, zeros, FeatureMap, GradStore, ParamVisit};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use ndarray::ArrayD;

/// Number of pixels processed per im2col tile. Bounds peak memory on
/// full-resolution forwards; has no effect on results.
const TILE: usize = 8192;

#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    /// (kh, kw, c_in, c_out)
    weight: ArrayD<f64>,
    /// (c_out,)
    bias: ArrayD<f64>,
    k: usize,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    x: FeatureMap,
}

impl Conv2d {
    pub fn new(name: &str, k: usize, c_in: usize, c_out: usize, rng: &mut SeedRng) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "{name}: kernel size {k} must be odd to keep spatial dims under same padding"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("{name}: zero channel count")));
        }
        let fan_in = k * k * c_in;
        Ok(Conv2d {
            name: name.to_string(),
            weight: he_uniform(&[k, k, c_in, c_out], fan_in, rng),
            bias: zeros(&[c_out]),
            k,
            c_in,
            c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    pub fn in_channels(&self) -> usize {
        self.c_in
    }

    fn w_mat(&self) -> ArrayView2<'_, f64> {
        self.weight
            .view()
            .into_shape_with_order((self.k * self.k * self.c_in, self.c_out))
            .expect("weight is standard layout")
            .into_dimensionality()
            .expect("rank 2")
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.dim().2 != self.c_in {
            return Err(Error::InvalidInput(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.c_in,
                x.dim().2
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let (h, w, _) = x.dim();
        let l = h * w;
        let wm = self.w_mat();
        let mut y = Array2::<f64>::zeros((l, self.c_out));
        let mut r0 = 0;
        while r0 < l {
            let r1 = (r0 + TILE).min(l);
            let cols = im2col(x.view(), self.k, r0, r1);
            y.slice_mut(ndarray::s![r0..r1, ..]).assign(&cols.dot(&wm));
            r0 = r1;
        }
        let bias = self.bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &bias;
        Ok(y
            .into_shape_with_order((h, w, self.c_out))
            .expect("row count is h*w"))
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        let y = self.forward(x)?;
        Ok((y, ConvCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        dy: &FeatureMap,
        cache: &ConvCache,
        grads: &mut GradStore,
    ) -> FeatureMap {
        let (h, w, _) = cache.x.dim();
        let l = h * w;
        let dys = dy.as_standard_layout();
        let dy_mat = dys
            .view()
            .into_shape_with_order((l, self.c_out))
            .expect("standard layout");

        let db: Array1<f64> = dy_mat.sum_axis(Axis(0));
        // Training runs at patch scale, so the full column matrix fits.
        let cols = im2col(cache.x.view(), self.k, 0, l);
        let dw = row_major(cols.t().dot(&dy_mat));
        let dcols = dy_mat.dot(&self.w_mat().t());
        let dx = col2im(&dcols, h, w, self.c_in, self.k);

        grads.accumulate(
            &format!("{}/w", self.name),
            dw.into_shape_with_order(vec![self.k, self.k, self.c_in, self.c_out])
                .unwrap(),
        );
        grads.accumulate(&format!("{}/b", self.name), db.into_dyn());
        dx
    }
}

impl ParamVisit for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}/w", self.name), &self.weight);
        f(&format!("{}/b", self.name), &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}/w", self.name), &mut self.weight);
        f(&format!("{}/b", self.name), &mut self.bias);
    }
}
