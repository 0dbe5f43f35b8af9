//! Momentum SGD with weight decay, followed by projection of the GMM
//! parameters back onto their constraint set.

use log::warn;

use crate::gmm::GmmModel;
use crate::train::backbone::{BackboneGradients, BackboneModel};

/// Smallest mixture weight kept after an update.
pub const MIN_WEIGHT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Everything the trainer optimizes.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    pub gmm: GmmModel,
    pub backbone: BackboneModel,
}

/// Gradient (or velocity) with the same layout as [`SiameseModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub omega: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub backbone: BackboneGradients,
}

impl ModelGradients {
    pub fn zeros(model: &SiameseModel) -> Self {
        let n = model.gmm.fv_len();
        Self {
            omega: vec![0.0; model.gmm.num_clusters()],
            mu: vec![0.0; n],
            sigma: vec![0.0; n],
            backbone: BackboneGradients::zeros(&model.backbone),
        }
    }

    fn slices(&self) -> [&Vec<f64>; 5] {
        [
            &self.omega,
            &self.mu,
            &self.sigma,
            &self.backbone.weights,
            &self.backbone.bias,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Which parameter groups receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub gmm: bool,
    pub backbone: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

fn momentum_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: &SgdConfig) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v - cfg.learning_rate * (g + cfg.weight_decay * *p);
        *p += *v;
    }
}

/// `v ← μ·v − α·(g + λ·φ); φ ← φ + v`, then ω is clamped and renormalized
/// and σ floored. A non-finite gradient leaves model and velocity untouched.
pub fn sgd_step(
    model: &mut SiameseModel,
    grads: &ModelGradients,
    velocity: &mut ModelGradients,
    cfg: &SgdConfig,
    trainable: Trainable,
) -> StepOutcome {
    if !grads.is_finite() {
        warn!("non-finite gradient, skipping update");
        return StepOutcome::SkippedNonFinite;
    }
    if trainable.gmm {
        momentum_update(model.gmm.weights_mut(), &grads.omega, &mut velocity.omega, cfg);
        momentum_update(model.gmm.means_mut(), &grads.mu, &mut velocity.mu, cfg);
        momentum_update(model.gmm.stddevs_mut(), &grads.sigma, &mut velocity.sigma, cfg);
        model.gmm.project_to_constraints(MIN_WEIGHT);
    }
    if trainable.backbone {
        momentum_update(
            &mut model.backbone.weights,
            &grads.backbone.weights,
            &mut velocity.backbone.weights,
            cfg,
        );
        momentum_update(
            &mut model.backbone.bias,
            &grads.backbone.bias,
            &mut velocity.backbone.bias,
            cfg,
        );
    }
    StepOutcome::Applied
}
