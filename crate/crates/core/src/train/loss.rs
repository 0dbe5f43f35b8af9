//! Contrastive loss on pairs of normalized Fisher vectors and its gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::FvGradients;

/// Pair label. `Matching` multiplies the squared distance; `NonMatching`
/// the squared hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    NonMatching,
    Matching,
}

impl PairLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            PairLabel::Matching => 1.0,
            PairLabel::NonMatching => 0.0,
        }
    }

    pub fn from_binary(y: u8) -> Result<Self> {
        match y {
            1 => Ok(PairLabel::Matching),
            0 => Ok(PairLabel::NonMatching),
            other => Err(Error::InvalidInput(format!("pair label must be 0 or 1, got {other}"))),
        }
    }
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `½·Y·D² + ½·(1−Y)·max(0, β−D)²`.
pub fn contrastive_loss(z: &[f64], z_other: &[f64], label: PairLabel, margin: f64) -> f64 {
    assert_eq!(z.len(), z_other.len(), "contrastive loss on vectors of different length");
    let dist = euclidean_distance(z, z_other);
    match label {
        PairLabel::Matching => 0.5 * dist * dist,
        PairLabel::NonMatching => {
            let gap = (margin - dist).max(0.0);
            0.5 * gap * gap
        }
    }
}

/// Loss value with `∂L/∂z` and `∂L/∂z'`.
///
/// In the hinge branch the derivative is taken as zero at the kink
/// `D = β` and at `D = 0`, where the direction of `D` is undefined.
pub fn loss_and_upstream(
    z: &[f64],
    z_other: &[f64],
    label: PairLabel,
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let loss = contrastive_loss(z, z_other, label, margin);
    let diff: Vec<f64> = z.iter().zip(z_other).map(|(a, b)| a - b).collect();
    let scale = match label {
        // ∂(½D²)/∂z = z − z'
        PairLabel::Matching => 1.0,
        PairLabel::NonMatching => {
            let dist = euclidean_distance(z, z_other);
            if dist > 0.0 && dist < margin {
                // ∂L/∂D · ∂D/∂z = −(β − D) · (z − z') / D
                -(margin - dist) / dist
            } else {
                0.0
            }
        }
    };
    let g: Vec<f64> = diff.iter().map(|v| scale * v).collect();
    let g_other = g.iter().map(|v| -v).collect();
    (loss, g, g_other)
}

/// Gradient of the loss with respect to every shared GMM parameter and to
/// the descriptors of each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub omega: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub x_left: Vec<f64>,
    pub x_right: Vec<f64>,
}

fn contract(block: &[f64], upstream: &[f64]) -> Vec<f64> {
    block
        .chunks_exact(upstream.len())
        .map(|row| row.iter().zip(upstream).map(|(a, b)| a * b).sum())
        .collect()
}

/// Composes `∂L/∂ẑ` with the normalized-FV Jacobians of both branches.
///
/// `grads` and `grads_other` must come from
/// [`normalized_chain`](crate::grad::normalized_chain) and include the
/// input block.
pub fn loss_backward(
    z: &[f64],
    z_other: &[f64],
    label: PairLabel,
    margin: f64,
    grads: &FvGradients,
    grads_other: &FvGradients,
) -> Result<LossGradients> {
    if z.len() != grads.fv_len() || z_other.len() != grads_other.fv_len() || z.len() != z_other.len()
    {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            actual: grads.fv_len(),
        });
    }
    let (_, up, up_other) = loss_and_upstream(z, z_other, label, margin);
    let shared = |a: &[f64], b: &[f64]| -> Vec<f64> {
        contract(a, &up)
            .into_iter()
            .zip(contract(b, &up_other))
            .map(|(u, v)| u + v)
            .collect()
    };
    Ok(LossGradients {
        omega: shared(&grads.d_omega, &grads_other.d_omega),
        mu: shared(&grads.d_mu, &grads_other.d_mu),
        sigma: shared(&grads.d_sigma, &grads_other.d_sigma),
        x_left: contract(&grads.d_x, &up),
        x_right: contract(&grads_other.d_x, &up_other),
    })
}
