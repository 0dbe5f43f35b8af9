//! Diagonal Gaussian mixture model used as the Fisher-vector vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every standard deviation.
pub const VARIANCE_FLOOR: f64 = 1e-3;

/// Tolerance on the mixture weights summing to one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// How soft assignments are computed from a GMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorMode {
    /// Softmax of the Mahalanobis terms alone: no mixture weights and no
    /// determinant factor.
    #[default]
    Unweighted,
    /// `ω_j N(x; μ_j, σ_j²)` normalized over components.
    Standard,
}

/// A `C`-component GMM with diagonal covariances.
///
/// Means and standard deviations are stored cluster-major: entry `(j, k)`
/// lives at `j * dim + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    num_clusters: usize,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    stddevs: Vec<f64>,
}

impl GmmModel {
    /// Builds a model, checking the simplex and variance-floor invariants.
    pub fn new(
        num_clusters: usize,
        dim: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        stddevs: Vec<f64>,
    ) -> Result<Self> {
        let model = Self::from_parts_unchecked(num_clusters, dim, weights, means, stddevs)?;
        model.validate()?;
        Ok(model)
    }

    /// Builds a model checking only shapes.
    ///
    /// Finite-difference probes perturb single weights off the simplex, and
    /// the optimizer projects back afterwards; both need this.
    pub(crate) fn from_parts_unchecked(
        num_clusters: usize,
        dim: usize,
        weights: Vec<f64>,
        means: Vec<f64>,
        stddevs: Vec<f64>,
    ) -> Result<Self> {
        if num_clusters == 0 || dim == 0 {
            return Err(Error::InvalidModel(
                "cluster count and dimension must be positive".into(),
            ));
        }
        if weights.len() != num_clusters {
            return Err(Error::DimensionMismatch {
                expected: num_clusters,
                actual: weights.len(),
            });
        }
        for v in [&means, &stddevs] {
            if v.len() != num_clusters * dim {
                return Err(Error::DimensionMismatch {
                    expected: num_clusters * dim,
                    actual: v.len(),
                });
            }
        }
        Ok(Self {
            num_clusters,
            dim,
            weights,
            means,
            stddevs,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .weights
            .iter()
            .chain(&self.means)
            .chain(&self.stddevs)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidModel("mixture weights must be positive".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidModel(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if let Some(s) = self.stddevs.iter().find(|&&s| s < VARIANCE_FLOOR) {
            return Err(Error::InvalidModel(format!(
                "standard deviation {s} below floor {VARIANCE_FLOOR}"
            )));
        }
        Ok(())
    }

    /// A single standard Gaussian component per cluster with uniform weights.
    pub fn uniform(means: Vec<Vec<f64>>, stddev: f64) -> Result<Self> {
        let c = means.len();
        let d = means.first().map(Vec::len).unwrap_or(0);
        let flat: Vec<f64> = means.into_iter().flatten().collect();
        Self::new(c, d, vec![1.0 / c as f64; c], flat, vec![stddev; c * d])
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of the Fisher vector this model produces, `C·d`.
    pub fn fv_len(&self) -> usize {
        self.num_clusters * self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stddevs(&self) -> &[f64] {
        &self.stddevs
    }

    pub fn mean(&self, j: usize) -> &[f64] {
        &self.means[j * self.dim..(j + 1) * self.dim]
    }

    pub fn stddev(&self, j: usize) -> &[f64] {
        &self.stddevs[j * self.dim..(j + 1) * self.dim]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub(crate) fn means_mut(&mut self) -> &mut [f64] {
        &mut self.means
    }

    pub(crate) fn stddevs_mut(&mut self) -> &mut [f64] {
        &mut self.stddevs
    }

    /// Clamps weights to `min_weight`, renormalizes them onto the simplex and
    /// floors the standard deviations.
    pub fn project_to_constraints(&mut self, min_weight: f64) {
        let mut clamped = false;
        for w in &mut self.weights {
            if !(*w >= min_weight) {
                *w = min_weight;
                clamped = true;
            }
        }
        // leave an already-feasible simplex bit-for-bit alone
        let total: f64 = self.weights.iter().sum();
        if clamped || (total - 1.0).abs() > 0.1 * SIMPLEX_TOLERANCE {
            for w in &mut self.weights {
                *w /= total;
            }
        }
        for s in &mut self.stddevs {
            if !(*s >= VARIANCE_FLOOR) {
                *s = VARIANCE_FLOOR;
            }
        }
    }
}
