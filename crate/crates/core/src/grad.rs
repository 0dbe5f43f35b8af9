//! Closed-form partial derivatives of the Fisher-vector layer.
//!
//! Two routes are provided. [`fv_gradients`] materializes the full Jacobian
//! of `ζ` (or `ζ̂`, after [`normalized_chain`]) with respect to every
//! parameter, including the cross-cluster terms introduced by the posterior
//! denominator. [`FvForward::backward`] computes the vector-Jacobian product
//! for a scalar objective in `O(T·C·d)` and is what the trainer uses.

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::fisher::{self, AssignmentMatrix, FisherVector};
use crate::gmm::{GmmModel, PosteriorMode};

/// Jacobians of a Fisher vector, one row per parameter.
///
/// Row `p` of a block holds `∂ζ_{jk}/∂φ_p` for every output `(j, k)` in
/// cluster-major order. Parameter rows are ordered `j` for ω, `(j, k)`
/// cluster-major for μ and σ, and `(t, k)` descriptor-major for x.
#[derive(Debug, Clone, PartialEq)]
pub struct FvGradients {
    pub clusters: usize,
    pub dim: usize,
    pub count: usize,
    pub d_omega: Vec<f64>,
    pub d_mu: Vec<f64>,
    pub d_sigma: Vec<f64>,
    /// Empty when only the parameter blocks were requested.
    pub d_x: Vec<f64>,
}

impl FvGradients {
    pub fn fv_len(&self) -> usize {
        self.clusters * self.dim
    }

    pub fn omega_row(&self, j: usize) -> &[f64] {
        let n = self.fv_len();
        &self.d_omega[j * n..(j + 1) * n]
    }

    pub fn mu_row(&self, j: usize, k: usize) -> &[f64] {
        let n = self.fv_len();
        let p = j * self.dim + k;
        &self.d_mu[p * n..(p + 1) * n]
    }

    pub fn sigma_row(&self, j: usize, k: usize) -> &[f64] {
        let n = self.fv_len();
        let p = j * self.dim + k;
        &self.d_sigma[p * n..(p + 1) * n]
    }

    pub fn x_row(&self, t: usize, k: usize) -> &[f64] {
        let n = self.fv_len();
        let p = t * self.dim + k;
        &self.d_x[p * n..(p + 1) * n]
    }

    pub fn has_input_block(&self) -> bool {
        !self.d_x.is_empty()
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.d_omega,
            &mut self.d_mu,
            &mut self.d_sigma,
            &mut self.d_x,
        ]
    }

    fn blocks(&self) -> [&Vec<f64>; 4] {
        [&self.d_omega, &self.d_mu, &self.d_sigma, &self.d_x]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of a scalar objective with respect to the GMM parameters and the
/// descriptors of one set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub omega: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub x: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(clusters: usize, dim: usize, count: usize) -> Self {
        Self {
            omega: vec![0.0; clusters],
            mu: vec![0.0; clusters * dim],
            sigma: vec![0.0; clusters * dim],
            x: vec![0.0; count * dim],
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.omega, &self.mu, &self.sigma, &self.x]
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// `(∂τ_tj/∂μ_jk, ∂τ_tj/∂σ_jk, ∂τ_tj/∂x_tk)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauPartials {
    pub d_mu: f64,
    pub d_sigma: f64,
    pub d_x: f64,
}

/// Cached forward quantities shared by every derivative.
#[derive(Debug, Clone)]
pub struct FvForward<'a> {
    set: &'a LocalDescriptorSet,
    gmm: &'a GmmModel,
    mode: PosteriorMode,
    tau: AssignmentMatrix,
    /// `(x_tk − μ_jk) / σ_jk` at `(t * C + j) * d + k`.
    resid: Vec<f64>,
    raw: Vec<f64>,
}

impl<'a> FvForward<'a> {
    pub fn compute(
        set: &'a LocalDescriptorSet,
        gmm: &'a GmmModel,
        mode: PosteriorMode,
    ) -> Result<Self> {
        let tau = fisher::assignments(set, gmm, mode)?;
        let (c, d) = (gmm.num_clusters(), gmm.dim());
        let mut resid = Vec::with_capacity(set.count() * c * d);
        for x in set.rows() {
            for j in 0..c {
                let mu = gmm.mean(j);
                let sigma = gmm.stddev(j);
                resid.extend((0..d).map(|k| (x[k] - mu[k]) / sigma[k]));
            }
        }
        let raw = fisher::raw_from_assignments(set, gmm, &tau);
        Ok(Self {
            set,
            gmm,
            mode,
            tau,
            resid,
            raw,
        })
    }

    pub fn assignments(&self) -> &AssignmentMatrix {
        &self.tau
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn encode(&self) -> Result<FisherVector> {
        fisher::fv_normalize(self.raw.clone())
    }

    fn c(&self) -> usize {
        self.gmm.num_clusters()
    }

    fn d(&self) -> usize {
        self.gmm.dim()
    }

    fn r(&self, t: usize, j: usize, k: usize) -> f64 {
        self.resid[(t * self.c() + j) * self.d() + k]
    }

    /// `1 / (T √ω_j)`.
    fn prefactor(&self, j: usize) -> f64 {
        1.0 / (self.set.count() as f64 * self.gmm.weights()[j].sqrt())
    }

    /// `∂q_j/∂μ_jk` where `q_j` is the log posterior numerator.
    fn dq_mu(&self, t: usize, j: usize, k: usize) -> f64 {
        self.r(t, j, k) / self.gmm.stddev(j)[k]
    }

    fn dq_sigma(&self, t: usize, j: usize, k: usize) -> f64 {
        let r = self.r(t, j, k);
        let s = self.gmm.stddev(j)[k];
        match self.mode {
            PosteriorMode::Unweighted => r * r / s,
            PosteriorMode::Standard => (r * r - 1.0) / s,
        }
    }

    fn dq_omega(&self, j: usize) -> f64 {
        match self.mode {
            PosteriorMode::Unweighted => 0.0,
            PosteriorMode::Standard => 1.0 / self.gmm.weights()[j],
        }
    }

    /// `∂q_j/∂x_tk`.
    fn dq_x(&self, t: usize, j: usize, k: usize) -> f64 {
        -self.r(t, j, k) / self.gmm.stddev(j)[k]
    }

    /// `Σ_i τ_ti ∂q_i/∂x_tk`: the denominator term of the quotient rule in x.
    fn mean_dq_x(&self, t: usize, k: usize) -> f64 {
        (0..self.c())
            .map(|i| self.tau.get(t, i) * self.dq_x(t, i, k))
            .sum()
    }

    pub fn tau_partials(&self, t: usize, j: usize, k: usize) -> TauPartials {
        assert!(t < self.set.count() && j < self.c() && k < self.d(), "index out of range");
        let tau = self.tau.get(t, j);
        let own = tau * (1.0 - tau);
        TauPartials {
            d_mu: own * self.dq_mu(t, j, k),
            d_sigma: own * self.dq_sigma(t, j, k),
            d_x: tau * (self.dq_x(t, j, k) - self.mean_dq_x(t, k)),
        }
    }

    /// `∂τ_tj/∂θ` for a parameter `θ` of cluster `i` whose log-numerator
    /// derivative is `dq`: `τ_tj (δ_ji − τ_ti) dq`.
    fn dtau_cluster_param(&self, t: usize, j: usize, i: usize, dq: f64) -> f64 {
        let delta = if i == j { 1.0 } else { 0.0 };
        self.tau.get(t, j) * (delta - self.tau.get(t, i)) * dq
    }

    fn param_jacobians(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (c, d, n) = (self.c(), self.d(), self.c() * self.d());
        let count = self.set.count();
        let mut d_omega = vec![0.0; c * n];
        let mut d_mu = vec![0.0; c * d * n];
        let mut d_sigma = vec![0.0; c * d * n];

        for i in 0..c {
            let w = self.gmm.weights()[i];
            let row = &mut d_omega[i * n..(i + 1) * n];
            for k in 0..d {
                row[i * d + k] = -self.raw[i * d + k] / (2.0 * w);
            }
        }

        for t in 0..count {
            for i in 0..c {
                let dq_w = self.dq_omega(i);
                if dq_w != 0.0 {
                    let row = &mut d_omega[i * n..(i + 1) * n];
                    for j in 0..c {
                        let f = self.dtau_cluster_param(t, j, i, dq_w) * self.prefactor(j);
                        for k in 0..d {
                            row[j * d + k] += f * self.r(t, j, k);
                        }
                    }
                }
                for l in 0..d {
                    let p = i * d + l;
                    let (dq_m, dq_s) = (self.dq_mu(t, i, l), self.dq_sigma(t, i, l));
                    let mu_row = &mut d_mu[p * n..(p + 1) * n];
                    for j in 0..c {
                        let f = self.dtau_cluster_param(t, j, i, dq_m) * self.prefactor(j);
                        for k in 0..d {
                            mu_row[j * d + k] += f * self.r(t, j, k);
                        }
                    }
                    let sigma_row = &mut d_sigma[p * n..(p + 1) * n];
                    for j in 0..c {
                        let f = self.dtau_cluster_param(t, j, i, dq_s) * self.prefactor(j);
                        for k in 0..d {
                            sigma_row[j * d + k] += f * self.r(t, j, k);
                        }
                    }
                    // direct dependence of ζ_il on μ_il and σ_il
                    let a = self.prefactor(i);
                    let s = self.gmm.stddev(i)[l];
                    let tau = self.tau.get(t, i);
                    d_mu[p * n + p] -= a * tau / s;
                    d_sigma[p * n + p] -= a * tau * self.r(t, i, l) / s;
                }
            }
        }
        (d_omega, d_mu, d_sigma)
    }

    fn input_jacobian(&self) -> Vec<f64> {
        let (c, d, n) = (self.c(), self.d(), self.c() * self.d());
        let count = self.set.count();
        let mut d_x = vec![0.0; count * d * n];
        for t in 0..count {
            for l in 0..d {
                let p = t * d + l;
                let mean = self.mean_dq_x(t, l);
                let row = &mut d_x[p * n..(p + 1) * n];
                for j in 0..c {
                    let a = self.prefactor(j);
                    let tau = self.tau.get(t, j);
                    let dtau = tau * (self.dq_x(t, j, l) - mean);
                    for k in 0..d {
                        row[j * d + k] += a * dtau * self.r(t, j, k);
                    }
                    row[j * d + l] += a * tau / self.gmm.stddev(j)[l];
                }
            }
        }
        d_x
    }

    /// Full Jacobians of the raw Fisher vector.
    pub fn jacobians(&self, include_inputs: bool) -> FvGradients {
        let (d_omega, d_mu, d_sigma) = self.param_jacobians();
        FvGradients {
            clusters: self.c(),
            dim: self.d(),
            count: self.set.count(),
            d_omega,
            d_mu,
            d_sigma,
            d_x: if include_inputs {
                self.input_jacobian()
            } else {
                Vec::new()
            },
        }
    }

    /// Vector-Jacobian product: given `∂L/∂ζ` (raw), returns `∂L/∂φ` for every
    /// GMM parameter and descriptor entry.
    pub fn backward_raw(&self, upstream: &[f64]) -> ParamGradients {
        let (c, d) = (self.c(), self.d());
        let count = self.set.count();
        assert_eq!(upstream.len(), c * d, "upstream gradient length");
        let mut out = ParamGradients::zeros(c, d, count);

        let mut s = vec![0.0; c];
        let mut w = vec![0.0; c];
        let mut tau_sum = vec![0.0; c * d];
        let mut tau_r_sum = vec![0.0; c * d];
        for t in 0..count {
            // s_tj = a_j Σ_k g_jk r_tjk, w_tj = τ_tj (s_tj − Σ_i τ_ti s_ti)
            let mut mean_s = 0.0;
            for j in 0..c {
                let g = &upstream[j * d..(j + 1) * d];
                let dot: f64 = (0..d).map(|k| g[k] * self.r(t, j, k)).sum();
                s[j] = self.prefactor(j) * dot;
                mean_s += self.tau.get(t, j) * s[j];
            }
            for j in 0..c {
                w[j] = self.tau.get(t, j) * (s[j] - mean_s);
            }
            for i in 0..c {
                out.omega[i] += w[i] * self.dq_omega(i);
                let tau = self.tau.get(t, i);
                for l in 0..d {
                    let p = i * d + l;
                    out.mu[p] += w[i] * self.dq_mu(t, i, l);
                    out.sigma[p] += w[i] * self.dq_sigma(t, i, l);
                    tau_sum[p] += tau;
                    tau_r_sum[p] += tau * self.r(t, i, l);
                }
            }
            let x_row = &mut out.x[t * d..(t + 1) * d];
            for l in 0..d {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += w[j] * self.dq_x(t, j, l);
                    acc += self.prefactor(j) * upstream[j * d + l] * self.tau.get(t, j)
                        / self.gmm.stddev(j)[l];
                }
                x_row[l] = acc;
            }
        }
        for i in 0..c {
            let a = self.prefactor(i);
            let wgt = self.gmm.weights()[i];
            for l in 0..d {
                let p = i * d + l;
                let s_il = self.gmm.stddev(i)[l];
                out.mu[p] -= a * upstream[p] * tau_sum[p] / s_il;
                out.sigma[p] -= a * upstream[p] * tau_r_sum[p] / s_il;
                out.omega[i] -= upstream[p] * self.raw[p] / (2.0 * wgt);
            }
        }
        out
    }

    /// Vector-Jacobian product through the L2 normalization: `upstream` is
    /// `∂L/∂ζ̂`.
    pub fn backward(&self, upstream: &[f64]) -> Result<ParamGradients> {
        let raw_upstream = normalization_vjp(&self.raw, upstream)?;
        Ok(self.backward_raw(&raw_upstream))
    }
}

/// `∂L/∂ζ` from `∂L/∂ζ̂`: `(g − ζ̂ (ζ̂·g)) / |ζ|`.
pub fn normalization_vjp(raw: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let norm = fisher::l2_norm(raw);
    if !(norm > 0.0) {
        return Err(Error::DegenerateFisherVector);
    }
    let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    Ok(project_off_radial(&unit, upstream, norm))
}

fn project_off_radial(unit: &[f64], g: &[f64], norm: f64) -> Vec<f64> {
    let radial: f64 = unit.iter().zip(g).map(|(u, v)| u * v).sum();
    unit.iter()
        .zip(g)
        .map(|(u, v)| (v - u * radial) / norm)
        .collect()
}

pub fn tau_partials(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
    t: usize,
    j: usize,
    k: usize,
) -> Result<TauPartials> {
    let fwd = FvForward::compute(set, gmm, mode)?;
    if t >= set.count() || j >= gmm.num_clusters() || k >= gmm.dim() {
        return Err(Error::InvalidInput(format!(
            "tau partial index ({t}, {j}, {k}) out of range"
        )));
    }
    Ok(fwd.tau_partials(t, j, k))
}

/// Jacobians of the raw Fisher vector with respect to ω, μ and σ.
pub fn fv_param_grads(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
) -> Result<FvGradients> {
    Ok(FvForward::compute(set, gmm, mode)?.jacobians(false))
}

/// Jacobian of the raw Fisher vector with respect to the descriptors; the
/// parameter blocks of the result are empty.
pub fn fv_input_grads(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
) -> Result<FvGradients> {
    let fwd = FvForward::compute(set, gmm, mode)?;
    Ok(FvGradients {
        clusters: gmm.num_clusters(),
        dim: gmm.dim(),
        count: set.count(),
        d_omega: Vec::new(),
        d_mu: Vec::new(),
        d_sigma: Vec::new(),
        d_x: fwd.input_jacobian(),
    })
}

/// All raw Jacobian blocks.
pub fn fv_gradients(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
) -> Result<FvGradients> {
    Ok(FvForward::compute(set, gmm, mode)?.jacobians(true))
}

/// Maps raw Jacobians to Jacobians of the L2-normalized vector:
/// `∂ζ̂/∂φ = ∂ζ/∂φ / |ζ| − ζ (ζ·∂ζ/∂φ) / |ζ|³`, with the inner product
/// taken over all `C·d` entries.
pub fn normalized_chain(raw: &[f64], raw_grads: &FvGradients) -> Result<FvGradients> {
    let n = raw_grads.fv_len();
    if raw.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: raw.len(),
        });
    }
    let norm = fisher::l2_norm(raw);
    if !(norm > 0.0) {
        return Err(Error::DegenerateFisherVector);
    }
    let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let mut out = raw_grads.clone();
    for block in out.blocks_mut() {
        for row in block.chunks_exact_mut(n) {
            let projected = project_off_radial(&unit, row, norm);
            row.copy_from_slice(&projected);
        }
    }
    Ok(out)
}
