//! Fully connected layer on channel vectors (used by the SE gate).

use ndarray::{Array1, ArrayD};

use super::{he_uniform, zeros, GradStore, ParamVisit};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Debug, Clone)]
pub struct Dense {
    name: String,
    /// (in, out)
    weight: ArrayD<f64>,
    /// (out,), present only when the layer carries a bias.
    bias: Option<ArrayD<f64>>,
    d_in: usize,
    d_out: usize,
}

#[derive(Debug)]
pub struct DenseCache {
    x: Array1<f64>,
}

impl Dense {
    pub fn new(name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut SeedRng) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("{name}: zero-sized dense layer")));
        }
        Ok(Dense {
            name: name.to_string(),
            weight: he_uniform(&[d_in, d_out], d_in, rng),
            bias: bias.then(|| zeros(&[d_out])),
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in {
            return Err(Error::Config(format!(
                "{}: expected input of length {}, got {}",
                self.name,
                self.d_in,
                x.len()
            )));
        }
        let w = self.weight.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = x.dot(&w);
        if let Some(b) = &self.bias {
            y += &b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        Ok(y)
    }

    pub fn forward_train(&self, x: &Array1<f64>) -> Result<(Array1<f64>, DenseCache)> {
        let y = self.forward(x)?;
        Ok((y, DenseCache { x: x.clone() }))
    }

    pub fn backward(&self, dy: &Array1<f64>, cache: &DenseCache, grads: &mut GradStore) -> Array1<f64> {
        let w = self.weight.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        // dW[i][o] = x[i] * dy[o]
        let dw = ndarray::Array2::from_shape_fn((self.d_in, self.d_out), |(i, o)| {
            cache.x[i] * dy[o]
        });
        grads.accumulate(&format!("{}/w", self.name), dw.into_dyn());
        if self.bias.is_some() {
            grads.accumulate(&format!("{}/b", self.name), dy.clone().into_dyn());
        }
        w.dot(dy)
    }
}

impl ParamVisit for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        f(&format!("{}/w", self.name), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{}/b", self.name), b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        f(&format!("{}/w", self.name), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{}/b", self.name), b);
        }
    }
}
