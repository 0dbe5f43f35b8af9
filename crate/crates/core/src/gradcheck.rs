//! Finite-difference certification of the closed-form gradients.
//!
//! Every scalar parameter `φ` is perturbed by `±h·max(|φ|, 1)` and the
//! central difference of the forward pass is compared against the analytic
//! derivative.
//!
//! The gating error of a parameter is `max_i |a_i − n_i|` over the outputs
//! it affects, divided by the largest derivative magnitude anywhere in its
//! family (floored at `1e-12`). A per-entry error with denominator
//! `max(|a_i|, |n_i|, 1e-12)` is reported alongside; it is dominated by
//! finite-difference rounding (about `ε/h`) wherever a derivative is tiny
//! or structurally zero, so it is diagnostic only.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptors::LocalDescriptorSet;
use crate::error::{Error, Result};
use crate::fisher::{self, l2_norm};
use crate::gmm::{GmmModel, PosteriorMode};
use crate::grad::{normalized_chain, FvForward, FvGradients};
use crate::instances::sample_descriptors;
use crate::train::backbone::{BackboneGradients, BackboneModel};
use crate::train::loss::{contrastive_loss, euclidean_distance, loss_backward, LossGradients, PairLabel};
use crate::train::pipeline::{pair_gradients, pair_loss};
use crate::train::sgd::SiameseModel;

pub const DENOMINATOR_FLOOR: f64 = 1e-12;
pub const DEFAULT_STEP: f64 = 1e-6;
/// Acceptance bound on the maximum relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Distance kept between the pair distance and the hinge margin.
const HINGE_CLEARANCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Omega,
    Mu,
    Sigma,
    X,
    NormalizedChain,
    Loss,
    Backbone,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Omega,
        Family::Mu,
        Family::Sigma,
        Family::X,
        Family::NormalizedChain,
        Family::Loss,
        Family::Backbone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Omega => "omega",
            Family::Mu => "mu",
            Family::Sigma => "sigma",
            Family::X => "x",
            Family::NormalizedChain => "normalized_chain",
            Family::Loss => "loss",
            Family::Backbone => "backbone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub per_family_errors: BTreeMap<String, f64>,
    /// Per-entry relative error, `|a − n| / max(|a|, |n|, 1e-12)`.
    pub per_family_pointwise: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    /// Family whose name prefixes `worst_parameter`.
    pub fn worst_family(&self) -> &str {
        self.worst_parameter
            .split(|c| c == '/' || c == '[')
            .next()
            .unwrap_or("")
    }

    /// Folds another report in, keeping per-family maxima.
    pub fn merge(&mut self, other: &GradCheckReport) {
        for (family, err) in &other.per_family_errors {
            let entry = self.per_family_errors.entry(family.clone()).or_insert(0.0);
            *entry = entry.max(*err);
        }
        for (family, err) in &other.per_family_pointwise {
            let entry = self.per_family_pointwise.entry(family.clone()).or_insert(0.0);
            *entry = entry.max(*err);
        }
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst_parameter = other.worst_parameter.clone();
        }
    }

    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_parameter: String::new(),
            per_family_errors: BTreeMap::new(),
            per_family_pointwise: BTreeMap::new(),
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>14} {:>14}", "family", "max rel error", "pointwise")?;
        for (family, err) in &self.per_family_errors {
            let pointwise = self.per_family_pointwise.get(family).copied().unwrap_or(f64::NAN);
            writeln!(f, "{family:<18} {err:>14.3e} {pointwise:>14.3e}")?;
        }
        writeln!(f, "{:<18} {:>14.3e}", "overall", self.max_rel_error)?;
        write!(f, "worst parameter: {}", self.worst_parameter)
    }
}

/// One scalar parameter of the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Omega(usize),
    Mu(usize, usize),
    Sigma(usize, usize),
    X(usize, usize),
    Partner(usize, usize),
    Weight(usize),
    Bias(usize),
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Param::Omega(j) => write!(f, "omega[{j}]"),
            Param::Mu(j, k) => write!(f, "mu[{j},{k}]"),
            Param::Sigma(j, k) => write!(f, "sigma[{j},{k}]"),
            Param::X(t, k) => write!(f, "x[{t},{k}]"),
            Param::Partner(t, k) => write!(f, "x_partner[{t},{k}]"),
            Param::Weight(i) => write!(f, "w[{i}]"),
            Param::Bias(i) => write!(f, "b[{i}]"),
        }
    }
}

/// Everything a finite-difference probe perturbs.
#[derive(Debug, Clone)]
struct State {
    gmm: GmmModel,
    set: LocalDescriptorSet,
    partner: LocalDescriptorSet,
    backbone: BackboneModel,
}

impl State {
    fn slot(&mut self, p: Param) -> &mut f64 {
        let d = self.gmm.dim();
        match p {
            Param::Omega(j) => &mut self.gmm.weights_mut()[j],
            Param::Mu(j, k) => &mut self.gmm.means_mut()[j * d + k],
            Param::Sigma(j, k) => &mut self.gmm.stddevs_mut()[j * d + k],
            Param::X(t, k) => &mut self.set.data_mut()[t * d + k],
            Param::Partner(t, k) => &mut self.partner.data_mut()[t * d + k],
            Param::Weight(i) => &mut self.backbone.weights[i],
            Param::Bias(i) => &mut self.backbone.bias[i],
        }
    }

    fn model(&self) -> SiameseModel {
        SiameseModel {
            gmm: self.gmm.clone(),
            backbone: self.backbone.clone(),
        }
    }
}

/// Central difference of a vector-valued function of one parameter.
fn central_difference<F>(state: &State, p: Param, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&State) -> Result<Vec<f64>>,
{
    let mut work = state.clone();
    let value = *work.slot(p);
    let step = h * value.abs().max(1.0);
    let (up, down) = (value + step, value - step);
    *work.slot(p) = up;
    let f_up = f(&work)?;
    *work.slot(p) = down;
    let f_down = f(&work)?;
    let span = up - down;
    Ok(f_up.iter().zip(&f_down).map(|(a, b)| (a - b) / span).collect())
}

/// Analytic or numeric derivatives for every family of a probe.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub raw: FvGradients,
    pub normalized: FvGradients,
    pub loss: Vec<LossGradients>,
    pub backbone: Vec<BackboneGradients>,
}

/// A descriptor set, a GMM and the auxiliary inputs needed to exercise the
/// loss and backbone paths.
#[derive(Debug, Clone)]
pub struct GradProbe {
    state: State,
    mode: PosteriorMode,
    loss_cases: Vec<(PairLabel, f64)>,
    backbone_cases: Vec<(PairLabel, f64)>,
}

fn cases_for(distance: f64) -> Vec<(PairLabel, f64)> {
    vec![
        (PairLabel::Matching, 0.8),
        (PairLabel::NonMatching, distance + HINGE_CLEARANCE),
    ]
}

impl GradProbe {
    /// The partner set and backbone are drawn from `seed`; margins are set so
    /// the hinge is active and `HINGE_CLEARANCE` away from its kink.
    pub fn new(
        set: LocalDescriptorSet,
        gmm: GmmModel,
        mode: PosteriorMode,
        seed: u64,
    ) -> Result<Self> {
        fisher::check_dim(&gmm, set.dim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a7c_0ffe_e000);
        let partner = sample_descriptors(&gmm, set.count(), &mut rng);
        let d = gmm.dim();
        let backbone = BackboneModel::perturbed_identity(d, 0.1 / (d as f64).sqrt(), &mut rng);
        let state = State {
            gmm,
            set,
            partner,
            backbone,
        };

        let z = fisher::fv_encode(&state.set, &state.gmm, mode)?;
        let z_p = fisher::fv_encode(&state.partner, &state.gmm, mode)?;
        let loss_cases = cases_for(euclidean_distance(&z.normalized, &z_p.normalized));
        let model = state.model();
        let b = crate::train::encode_item(&model, &state.set, mode, true)?;
        let b_p = crate::train::encode_item(&model, &state.partner, mode, true)?;
        let backbone_cases = cases_for(euclidean_distance(&b.normalized, &b_p.normalized));
        Ok(Self {
            state,
            mode,
            loss_cases,
            backbone_cases,
        })
    }

    pub fn set(&self) -> &LocalDescriptorSet {
        &self.state.set
    }

    pub fn gmm(&self) -> &GmmModel {
        &self.state.gmm
    }

    fn fv_params(&self) -> (Vec<Param>, Vec<Param>, Vec<Param>, Vec<Param>) {
        let (c, d, t) = (self.state.gmm.num_clusters(), self.state.gmm.dim(), self.state.set.count());
        let omega = (0..c).map(Param::Omega).collect();
        let mu = (0..c).flat_map(|j| (0..d).map(move |k| Param::Mu(j, k))).collect();
        let sigma = (0..c).flat_map(|j| (0..d).map(move |k| Param::Sigma(j, k))).collect();
        let x = (0..t).flat_map(|s| (0..d).map(move |k| Param::X(s, k))).collect();
        (omega, mu, sigma, x)
    }

    fn partner_params(&self) -> Vec<Param> {
        let (d, t) = (self.state.gmm.dim(), self.state.partner.count());
        (0..t).flat_map(|s| (0..d).map(move |k| Param::Partner(s, k))).collect()
    }

    fn backbone_params(&self) -> Vec<Param> {
        (0..self.state.backbone.weights.len())
            .map(Param::Weight)
            .chain((0..self.state.backbone.bias.len()).map(Param::Bias))
            .collect()
    }

    /// Closed-form derivatives.
    pub fn analytic(&self) -> Result<GradientSet> {
        let s = &self.state;
        let fwd = FvForward::compute(&s.set, &s.gmm, self.mode)?;
        let raw = fwd.jacobians(true);
        let normalized = normalized_chain(fwd.raw(), &raw)?;
        let fwd_p = FvForward::compute(&s.partner, &s.gmm, self.mode)?;
        let normalized_p = normalized_chain(fwd_p.raw(), &fwd_p.jacobians(true))?;
        let z = fwd.encode()?;
        let z_p = fwd_p.encode()?;
        let loss = self
            .loss_cases
            .iter()
            .map(|&(label, margin)| {
                loss_backward(&z.normalized, &z_p.normalized, label, margin, &normalized, &normalized_p)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = s.model();
        let backbone = self
            .backbone_cases
            .iter()
            .map(|&(label, margin)| {
                pair_gradients(&model, &s.set, &s.partner, label, margin, self.mode, true)
                    .map(|(_, g)| g.backbone)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GradientSet {
            raw,
            normalized,
            loss,
            backbone,
        })
    }

    /// Central-difference derivatives with relative step `h`.
    pub fn numeric(&self, h: f64) -> Result<GradientSet> {
        let mode = self.mode;
        let (omega, mu, sigma, x) = self.fv_params();
        let fv_block = |params: &[Param], normalized: bool| -> Result<Vec<f64>> {
            let mut out = Vec::new();
            for &p in params {
                out.extend(central_difference(&self.state, p, h, |s| {
                    let raw = fisher::fv_unnormalized(&s.set, &s.gmm, mode)?;
                    if normalized {
                        Ok(fisher::fv_normalize(raw)?.normalized)
                    } else {
                        Ok(raw)
                    }
                })?);
            }
            Ok(out)
        };
        let s = &self.state;
        let shape = |normalized: bool| -> Result<FvGradients> {
            Ok(FvGradients {
                clusters: s.gmm.num_clusters(),
                dim: s.gmm.dim(),
                count: s.set.count(),
                d_omega: fv_block(&omega, normalized)?,
                d_mu: fv_block(&mu, normalized)?,
                d_sigma: fv_block(&sigma, normalized)?,
                d_x: fv_block(&x, normalized)?,
            })
        };
        let raw = shape(false)?;
        let normalized = shape(true)?;

        let scalar = |params: &[Param], f: &dyn Fn(&State) -> Result<f64>| -> Result<Vec<f64>> {
            params
                .iter()
                .map(|&p| central_difference(s, p, h, |st| Ok(vec![f(st)?])).map(|v| v[0]))
                .collect()
        };
        let partner = self.partner_params();
        let mut loss = Vec::new();
        for &(label, margin) in &self.loss_cases {
            let f = move |st: &State| -> Result<f64> {
                let z = fisher::fv_encode(&st.set, &st.gmm, mode)?;
                let z_p = fisher::fv_encode(&st.partner, &st.gmm, mode)?;
                Ok(contrastive_loss(&z.normalized, &z_p.normalized, label, margin))
            };
            loss.push(LossGradients {
                omega: scalar(&omega, &f)?,
                mu: scalar(&mu, &f)?,
                sigma: scalar(&sigma, &f)?,
                x_left: scalar(&x, &f)?,
                x_right: scalar(&partner, &f)?,
            });
        }
        let mut backbone = Vec::new();
        let nw = s.backbone.weights.len();
        for &(label, margin) in &self.backbone_cases {
            let f = move |st: &State| -> Result<f64> {
                pair_loss(&st.model(), &st.set, &st.partner, label, margin, mode, true)
            };
            let all = scalar(&self.backbone_params(), &f)?;
            backbone.push(BackboneGradients {
                weights: all[..nw].to_vec(),
                bias: all[nw..].to_vec(),
            });
        }
        Ok(GradientSet {
            raw,
            normalized,
            loss,
            backbone,
        })
    }

    /// Compares two gradient sets of this probe.
    pub fn compare(&self, analytic: &GradientSet, numeric: &GradientSet) -> GradCheckReport {
        let (omega, mu, sigma, x) = self.fv_params();
        let mut tally = Tally::default();
        let n = analytic.raw.fv_len();
        let blocks = |g: &FvGradients| [g.d_omega.clone(), g.d_mu.clone(), g.d_sigma.clone(), g.d_x.clone()];
        let groups = [
            (Family::Omega, &omega),
            (Family::Mu, &mu),
            (Family::Sigma, &sigma),
            (Family::X, &x),
        ];
        let (ra, rn) = (blocks(&analytic.raw), blocks(&numeric.raw));
        let (na, nn) = (blocks(&analytic.normalized), blocks(&numeric.normalized));
        for (b, (family, params)) in groups.iter().enumerate() {
            for (i, p) in params.iter().enumerate() {
                let span = i * n..(i + 1) * n;
                tally.record(*family, p.to_string(), &ra[b][span.clone()], &rn[b][span.clone()]);
                tally.record(
                    Family::NormalizedChain,
                    format!("{}/{p}", Family::NormalizedChain.name()),
                    &na[b][span.clone()],
                    &nn[b][span],
                );
            }
        }

        let partner = self.partner_params();
        for (case, (a, m)) in analytic.loss.iter().zip(&numeric.loss).enumerate() {
            let pairs: [(&Vec<Param>, &Vec<f64>, &Vec<f64>); 5] = [
                (&omega, &a.omega, &m.omega),
                (&mu, &a.mu, &m.mu),
                (&sigma, &a.sigma, &m.sigma),
                (&x, &a.x_left, &m.x_left),
                (&partner, &a.x_right, &m.x_right),
            ];
            for (params, av, mv) in pairs {
                for (i, p) in params.iter().enumerate() {
                    tally.record(Family::Loss, format!("loss/case{case}/{p}"), &av[i..=i], &mv[i..=i]);
                }
            }
        }
        let bparams = self.backbone_params();
        for (case, (a, m)) in analytic.backbone.iter().zip(&numeric.backbone).enumerate() {
            let av: Vec<f64> = a.weights.iter().chain(&a.bias).copied().collect();
            let mv: Vec<f64> = m.weights.iter().chain(&m.bias).copied().collect();
            for (i, p) in bparams.iter().enumerate() {
                tally.record(Family::Backbone, format!("backbone/case{case}/{p}"), &av[i..=i], &mv[i..=i]);
            }
        }
        tally.into_report()
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = l2_norm(analytic).max(l2_norm(numeric)).max(DENOMINATOR_FLOOR);
    l2_norm(&diff) / denom
}

/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, floor)`.
pub fn pointwise_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(DENOMINATOR_FLOOR))
        .fold(0.0, f64::max)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Entry {
    family: Family,
    name: String,
    discrepancy: f64,
}

#[derive(Default)]
struct Tally {
    entries: Vec<Entry>,
    scale: BTreeMap<Family, f64>,
    pointwise: BTreeMap<Family, f64>,
}

impl Tally {
    fn record(&mut self, family: Family, name: String, analytic: &[f64], numeric: &[f64]) {
        let discrepancy = analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = self.scale.entry(family).or_insert(0.0);
        *scale = scale.max(max_abs(analytic)).max(max_abs(numeric));
        let pointwise = self.pointwise.entry(family).or_insert(0.0);
        *pointwise = pointwise.max(pointwise_relative_error(analytic, numeric));
        self.entries.push(Entry {
            family,
            name,
            discrepancy,
        });
    }

    fn into_report(self) -> GradCheckReport {
        let mut families: BTreeMap<Family, f64> = BTreeMap::new();
        let mut worst: Option<(f64, String)> = None;
        for e in self.entries {
            let err = e.discrepancy / self.scale[&e.family].max(DENOMINATOR_FLOOR);
            let slot = families.entry(e.family).or_insert(0.0);
            *slot = slot.max(err);
            if worst.as_ref().is_none_or(|(w, _)| err > *w) {
                worst = Some((err, e.name));
            }
        }
        let (max_rel_error, worst_parameter) = worst.unwrap_or((0.0, String::new()));
        let named = |m: BTreeMap<Family, f64>| m.into_iter().map(|(f, e)| (f.name().to_string(), e)).collect();
        GradCheckReport {
            max_rel_error,
            worst_parameter,
            per_family_errors: named(families),
            per_family_pointwise: named(self.pointwise),
        }
    }
}

pub fn finite_diff_check_mode(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    mode: PosteriorMode,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 1e-9 && h < 1e-2) {
        return Err(Error::InvalidInput(format!("finite-difference step {h} outside (1e-9, 1e-2)")));
    }
    let probe = GradProbe::new(set.clone(), gmm.clone(), mode, seed)?;
    Ok(probe.compare(&probe.analytic()?, &probe.numeric(h)?))
}

/// Certifies every gradient family on one instance in the default
/// posterior mode.
pub fn finite_diff_check(
    set: &LocalDescriptorSet,
    gmm: &GmmModel,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    finite_diff_check_mode(set, gmm, PosteriorMode::Unweighted, h, seed)
}
