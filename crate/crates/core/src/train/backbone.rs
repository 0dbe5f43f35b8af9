//! A single affine layer standing in for the convolutional front end.
//!
//! Each raw patch `p_t` is mapped to a descriptor `x_t = Wᵀ p_t + b`, with
//! `W` stored row-major as `in_dim × out_dim`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneModel {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl BackboneGradients {
    pub fn zeros(model: &BackboneModel) -> Self {
        Self {
            weights: vec![0.0; model.weights.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl BackboneModel {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::DimensionMismatch {
                expected: in_dim * out_dim + out_dim,
                actual: weights.len() + bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite backbone weight".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weights,
            bias: vec![0.0; dim],
        }
    }

    /// Identity plus Gaussian noise of standard deviation `scale`.
    pub fn perturbed_identity(dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut model = Self::identity(dim);
        for w in model.weights.iter_mut().chain(model.bias.iter_mut()) {
            let z: f64 = StandardNormal.sample(rng);
            *w += scale * z;
        }
        model
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, raw: &LocalDescriptorSet) -> Result<LocalDescriptorSet> {
        if raw.dim() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                actual: raw.dim(),
            });
        }
        let mut out = Vec::with_capacity(raw.count() * self.out_dim);
        for p in raw.rows() {
            let start = out.len();
            out.extend_from_slice(&self.bias);
            let y = &mut out[start..];
            for (r, &pr) in p.iter().enumerate() {
                let row = &self.weights[r * self.out_dim..(r + 1) * self.out_dim];
                for (yk, w) in y.iter_mut().zip(row) {
                    *yk += pr * w;
                }
            }
        }
        LocalDescriptorSet::new(raw.count(), self.out_dim, out)
    }

    /// Weight gradients from `∂L/∂x` (`count × out_dim`, descriptor-major).
    pub fn backward(&self, raw: &LocalDescriptorSet, upstream: &[f64]) -> Result<BackboneGradients> {
        if raw.dim() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                actual: raw.dim(),
            });
        }
        if upstream.len() != raw.count() * self.out_dim {
            return Err(Error::DimensionMismatch {
                expected: raw.count() * self.out_dim,
                actual: upstream.len(),
            });
        }
        let mut grads = BackboneGradients::zeros(self);
        for (p, g) in raw.rows().zip(upstream.chunks_exact(self.out_dim)) {
            for (r, &pr) in p.iter().enumerate() {
                let row = &mut grads.weights[r * self.out_dim..(r + 1) * self.out_dim];
                for (w, gk) in row.iter_mut().zip(g) {
                    *w += pr * gk;
                }
            }
            for (b, gk) in grads.bias.iter_mut().zip(g) {
                *b += gk;
            }
        }
        Ok(grads)
    }
}
