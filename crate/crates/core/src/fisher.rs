//! Forward pass of the Fisher-vector layer: soft assignment, per-cluster
//! first-order statistics, concatenation and L2 normalization.

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::gmm::{GmmModel, PosteriorMode};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Soft assignments `τ_tj`, one row per descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    count: usize,
    clusters: usize,
    values: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.clusters..(t + 1) * self.clusters]
    }

    pub fn get(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.clusters + j]
    }
}

/// Normalized and unnormalized Fisher vector of one descriptor set.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub norm: f64,
}

impl FisherVector {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

pub(crate) fn check_dim(gmm: &GmmModel, dim: usize) -> Result<()> {
    if gmm.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            actual: dim,
        });
    }
    Ok(())
}

/// Unnormalized log posterior numerator of component `j` for descriptor `x`.
pub(crate) fn log_numerator(x: &[f64], gmm: &GmmModel, j: usize, mode: PosteriorMode) -> f64 {
    let mu = gmm.mean(j);
    let sigma = gmm.stddev(j);
    let mut quad = 0.0;
    for k in 0..x.len() {
        let r = (x[k] - mu[k]) / sigma[k];
        quad += r * r;
    }
    let q = -0.5 * quad;
    match mode {
        PosteriorMode::Unweighted => q,
        PosteriorMode::Standard => {
            let log_det: f64 = sigma.iter().map(|s| s.ln()).sum();
            q + gmm.weights()[j].ln() - log_det - 0.5 * x.len() as f64 * LN_2PI
        }
    }
}

/// Softmax over log-numerators with max subtraction, written into `out`.
pub(crate) fn posterior_into(x: &[f64], gmm: &GmmModel, mode: PosteriorMode, out: &mut [f64]) {
    let c = gmm.num_clusters();
    let mut max = f64::NEG_INFINITY;
    for j in 0..c {
        out[j] = log_numerator(x, gmm, j, mode);
        max = max.max(out[j]);
    }
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// Soft assignment of one descriptor to every component.
pub fn posterior(x: &[f64], gmm: &GmmModel, mode: PosteriorMode) -> Result<Vec<f64>> {
    check_dim(gmm, x.len())?;
    let mut out = vec![0.0; gmm.num_clusters()];
    posterior_into(x, gmm, mode, &mut out);
    Ok(out)
}

pub fn assignments(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
) -> Result<AssignmentMatrix> {
    check_dim(gmm, set.dim())?;
    let c = gmm.num_clusters();
    let mut values = vec![0.0; set.count() * c];
    for (row, x) in values.chunks_exact_mut(c).zip(set.rows()) {
        posterior_into(x, gmm, mode, row);
    }
    Ok(AssignmentMatrix {
        count: set.count(),
        clusters: c,
        values,
    })
}

/// `ζ_jk = 1/(T√ω_j) Σ_t τ_tj (x_tk − μ_jk) / σ_jk`, cluster-major.
pub fn fv_unnormalized(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
) -> Result<Vec<f64>> {
    let tau = assignments(set, gmm, mode)?;
    Ok(raw_from_assignments(set, gmm, &tau))
}

pub(crate) fn raw_from_assignments(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    tau: &AssignmentMatrix,
) -> Vec<f64> {
    let (c, d) = (gmm.num_clusters(), gmm.dim());
    let mut zeta = vec![0.0; c * d];
    for (t, x) in set.rows().enumerate() {
        for j in 0..c {
            let w = tau.get(t, j);
            let mu = gmm.mean(j);
            let sigma = gmm.stddev(j);
            let acc = &mut zeta[j * d..(j + 1) * d];
            for k in 0..d {
                acc[k] += w * (x[k] - mu[k]) / sigma[k];
            }
        }
    }
    let t = set.count() as f64;
    for j in 0..c {
        let scale = 1.0 / (t * gmm.weights()[j].sqrt());
        for v in &mut zeta[j * d..(j + 1) * d] {
            *v *= scale;
        }
    }
    zeta
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// L2-normalizes a raw Fisher vector.
pub fn fv_normalize(raw: Vec<f64>) -> Result<FisherVector> {
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let norm = l2_norm(&raw);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateFisherVector);
    }
    let normalized = raw.iter().map(|v| v / norm).collect();
    Ok(FisherVector {
        raw,
        normalized,
        norm,
    })
}

pub fn fv_encode(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
) -> Result<FisherVector> {
    fv_normalize(fv_unnormalized(set, gmm, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> LocalDescriptorSet {
        LocalDescriptorSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_component_posterior_is_one() {
        let gmm = GmmModel::uniform(vec![vec![3.0, -1.0]], 0.5).unwrap();
        assert_eq!(posterior(&[100.0, 7.0], &gmm, PosteriorMode::Unweighted).unwrap(), vec![1.0]);
    }

    #[test]
    fn symmetric_midpoint_splits_evenly() {
        let gmm = GmmModel::uniform(vec![vec![-1.0, 0.0], vec![1.0, 0.0]], 1.0).unwrap();
        let p = posterior(&[0.0, 0.0], &gmm, PosteriorMode::Unweighted).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_posterior_matches_hand_values() {
        let gmm = GmmModel::uniform(vec![vec![0.0], vec![2.0]], 1.0).unwrap();
        let p = posterior(&[1.0], &gmm, PosteriorMode::Unweighted).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        // q = (0, -2): τ = (1, e^-2) / (1 + e^-2)
        let e = (-2.0f64).exp();
        let p = posterior(&[0.0], &gmm, PosteriorMode::Unweighted).unwrap();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn far_descriptors_do_not_underflow() {
        let gmm = GmmModel::uniform(vec![vec![0.0], vec![1.0]], 1e-3).unwrap();
        let p = posterior(&[1e3], &gmm, PosteriorMode::Unweighted).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn standard_mode_uses_weights() {
        let gmm = GmmModel::new(2, 1, vec![0.9, 0.1], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let p = posterior(&[0.3], &gmm, PosteriorMode::Standard).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-14);
        let p = posterior(&[0.3], &gmm, PosteriorMode::Unweighted).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let gmm = GmmModel::uniform(vec![vec![0.0, 0.0]], 1.0).unwrap();
        assert!(matches!(
            posterior(&[1.0], &gmm, PosteriorMode::Unweighted),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn raw_fv_of_centered_descriptor_is_zero() {
        let gmm = GmmModel::uniform(vec![vec![0.5, -2.0]], 0.7).unwrap();
        let raw = fv_unnormalized(&set(&[&[0.5, -2.0]]), &gmm, PosteriorMode::Unweighted).unwrap();
        assert_eq!(raw, vec![0.0, 0.0]);
        assert!(matches!(
            fv_encode(&set(&[&[0.5, -2.0]]), &gmm, PosteriorMode::Unweighted),
            Err(Error::DegenerateFisherVector)
        ));
    }

    #[test]
    fn unit_parameters_give_mean_deviation() {
        let gmm = GmmModel::uniform(vec![vec![0.0]], 1.0).unwrap();
        let x = set(&[&[2.0], &[4.0]]);
        let raw = fv_unnormalized(&x, &gmm, PosteriorMode::Unweighted).unwrap();
        assert_eq!(raw, vec![3.0]);
        let fv = fv_encode(&x, &gmm, PosteriorMode::Unweighted).unwrap();
        assert_eq!(fv.normalized, vec![1.0]);
        assert_eq!(fv.norm, 3.0);
    }

    #[test]
    fn normalization_examples() {
        let fv = fv_normalize(vec![3.0, 4.0]).unwrap();
        assert_eq!(fv.norm, 5.0);
        assert!((fv.normalized[0] - 0.6).abs() < 1e-15 && (fv.normalized[1] - 0.8).abs() < 1e-15);
        let fv = fv_normalize(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(fv.normalized, vec![0.5; 4]);
        let fv = fv_normalize(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(fv.normalized, vec![0.0, 1.0, 0.0]);
        assert_eq!(fv.norm, 1.0);
        assert!(matches!(fv_normalize(vec![0.0; 3]), Err(Error::DegenerateFisherVector)));
    }
}
