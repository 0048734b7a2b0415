//! 2×2 stride-2 transpose convolution (exact ×2 upsampling).
//!
//! With kernel 2 and stride 2 the output blocks do not overlap: input
//! pixel (i, j) alone produces the 2×2 output block at (2i, 2j). The
//! forward pass is a single pixelwise GEMM followed by a block scatter.

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis};

use super::linalg::row_major;
use super::{he_uniform, zeros, FeatureMap, GradStore, ParamVisit};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct ConvTranspose2x2 {
    name: String,
    /// (c_in, 2, 2, c_out)
    weight: ArrayD<f64>,
    /// (c_out,)
    bias: ArrayD<f64>,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug)]
pub struct ConvTCache {
    x: FeatureMap,
}

impl ConvTranspose2x2 {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut SeedRng) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("{name}: zero channel count")));
        }
        Ok(ConvTranspose2x2 {
            name: name.to_string(),
            weight: he_uniform(&[c_in, 2, 2, c_out], 4 * c_in, rng),
            bias: zeros(&[c_out]),
            c_in,
            c_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    fn w_mat(&self) -> ArrayView2<'_, f64> {
        self.weight
            .view()
            .into_shape_with_order((self.c_in, 4 * self.c_out))
            .expect("weight is standard layout")
            .into_dimensionality()
            .expect("rank 2")
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (h, w, c) = x.dim();
        if c != self.c_in {
            return Err(Error::InvalidInput(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.c_in
            )));
        }
        let xs = x.as_standard_layout();
        let x_mat = xs
            .view()
            .into_shape_with_order((h * w, c))
            .expect("standard layout");
        let y4 = row_major(x_mat.dot(&self.w_mat())); // (h*w, 4*c_out)

        let co = self.c_out;
        let mut y = Array3::<f64>::zeros((2 * h, 2 * w, co));
        {
            let ys = y.as_slice_mut().expect("freshly allocated");
            let src = y4.as_slice().expect("standard layout");
            for p in 0..h * w {
                let (i, j) = (p / w, p % w);
                for a in 0..2 {
                    for b in 0..2 {
                        let dst = ((2 * i + a) * 2 * w + (2 * j + b)) * co;
                        let s = p * 4 * co + (a * 2 + b) * co;
                        ys[dst..dst + co].copy_from_slice(&src[s..s + co]);
                    }
                }
            }
        }
        let bias = self.bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &bias;
        Ok(y)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvTCache)> {
        let y = self.forward(x)?;
        Ok((y, ConvTCache { x: x.clone() }))
    }

    pub fn backward(
        &self,
        dy: &FeatureMap,
        cache: &ConvTCache,
        grads: &mut GradStore,
    ) -> FeatureMap {
        let (h, w, _) = cache.x.dim();
        let co = self.c_out;
        let dys = dy.as_standard_layout();
        let dflat = dys.as_slice().expect("standard layout");

        // Gather each input pixel's 2×2 output block back into a row.
        let mut dy4 = Array2::<f64>::zeros((h * w, 4 * co));
        {
            let dst = dy4.as_slice_mut().expect("freshly allocated");
            for p in 0..h * w {
                let (i, j) = (p / w, p % w);
                for a in 0..2 {
                    for b in 0..2 {
                        let s = ((2 * i + a) * 2 * w + (2 * j + b)) * co;
                        let d = p * 4 * co + (a * 2 + b) * co;
                        dst[d..d + co].copy_from_slice(&dflat[s..s + co]);
                    }
                }
            }
        }

        let db = dys
            .view()
            .into_shape_with_order((4 * h * w, co))
            .expect("standard layout")
            .sum_axis(Axis(0));
        let xs = cache.x.as_standard_layout();
        let x_mat = xs
            .view()
            .into_shape_with_order((h * w, self.c_in))
            .expect("standard layout");
        let dw = row_major(x_mat.t().dot(&dy4));
        let dx_mat = row_major(dy4.dot(&self.w_mat().t()));

        grads.accumulate(
            &format!("{}/w", self.name),
            dw.into_shape_with_order(vec![self.c_in, 2, 2, co]).unwrap(),
        );
        grads.accumulate(&format!("{}/b", self.name), db.into_dyn());
        dx_mat
            .into_shape_with_order((h, w, self.c_in))
            .expect("row count is h*w")
    }
}

impl ParamVisit for ConvTranspose2x2 {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}/w", self.name), &self.weight);
        f(&format!("{}/b", self.name), &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}/w", self.name), &mut self.weight);
        f(&format!("{}/b", self.name), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng;

    #[test]
    fn doubles_spatial_dims_and_matches_direct_form() {
        let mut rng = substream(9, Stream::Custom(5));
        let up = ConvTranspose2x2::new("t/up", 3, 2, &mut rng).unwrap();
        let x = Array3::from_shape_fn((3, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let y = up.forward(&x).unwrap();
        assert_eq!(y.dim(), (6, 8, 2));
        for i in 0..3 {
            for j in 0..4 {
                for a in 0..2 {
                    for b in 0..2 {
                        for o in 0..2 {
                            let mut acc = up.bias[[o]];
                            for c in 0..3 {
                                acc += x[(i, j, c)] * up.weight[[c, a, b, o]];
                            }
                            assert!((y[(2 * i + a, 2 * j + b, o)] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <T(x), dy> == <x, T^*(dy)> when biases are zero.
        let mut rng = substream(10, Stream::Custom(6));
        let up = ConvTranspose2x2::new("t/up", 2, 3, &mut rng).unwrap();
        let x = Array3::from_shape_fn((2, 3, 2), |_| rng.gen_range(-1.0..1.0));
        let dy = Array3::from_shape_fn((4, 6, 3), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = up.forward_train(&x).unwrap();
        let mut grads = GradStore::new();
        let dx = up.backward(&dy, &cache, &mut grads);
        let bias_term: f64 = {
            let bias = &up.bias;
            dy.indexed_iter().map(|((_, _, o), v)| v * bias[[o]]).sum()
        };
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum::<f64>() - bias_term;
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
