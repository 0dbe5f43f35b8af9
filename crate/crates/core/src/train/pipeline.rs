//! One Siamese evaluation: both branches through backbone and Fisher layer,
//! contrastive loss, and backpropagation to every trainable parameter.

use crate::descriptors::LocalDescriptorSet;
use crate::error::Result;
use crate::fisher::FisherVector;
use crate::gmm::PosteriorMode;
use crate::grad::FvForward;
use crate::train::backbone::BackboneGradients;
use crate::train::loss::{contrastive_loss, loss_and_upstream, PairLabel};
use crate::train::sgd::{ModelGradients, SiameseModel};

/// Descriptors of a raw input: through the backbone when `use_backbone`,
/// otherwise the input is already a descriptor set.
pub fn describe(
    model: &SiameseModel,
    raw: &LocalDescriptorSet,
    use_backbone: bool,
) -> Result<LocalDescriptorSet> {
    if use_backbone {
        model.backbone.forward(raw)
    } else {
        Ok(raw.clone())
    }
}

pub fn encode_item(
    model: &SiameseModel,
    raw: &LocalDescriptorSet,
    mode: PosteriorMode,
    use_backbone: bool,
) -> Result<FisherVector> {
    let x = describe(model, raw, use_backbone)?;
    crate::fisher::fv_encode(&x, &model.gmm, mode)
}

pub fn pair_loss(
    model: &SiameseModel,
    left: &LocalDescriptorSet,
    right: &LocalDescriptorSet,
    label: PairLabel,
    margin: f64,
    mode: PosteriorMode,
    use_backbone: bool,
) -> Result<f64> {
    let z = encode_item(model, left, mode, use_backbone)?;
    let z_other = encode_item(model, right, mode, use_backbone)?;
    Ok(contrastive_loss(&z.normalized, &z_other.normalized, label, margin))
}

/// Loss and its gradient with respect to the GMM and (when `use_backbone`)
/// the backbone weights.
pub fn pair_gradients(
    model: &SiameseModel,
    left: &LocalDescriptorSet,
    right: &LocalDescriptorSet,
    label: PairLabel,
    margin: f64,
    mode: PosteriorMode,
    use_backbone: bool,
) -> Result<(f64, ModelGradients)> {
    let xl = describe(model, left, use_backbone)?;
    let xr = describe(model, right, use_backbone)?;
    let fwd_l = FvForward::compute(&xl, &model.gmm, mode)?;
    let fwd_r = FvForward::compute(&xr, &model.gmm, mode)?;
    let zl = fwd_l.encode()?;
    let zr = fwd_r.encode()?;
    let (loss, up_l, up_r) = loss_and_upstream(&zl.normalized, &zr.normalized, label, margin);
    let gl = fwd_l.backward(&up_l)?;
    let gr = fwd_r.backward(&up_r)?;
    let sum = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u + v).collect::<Vec<_>>();
    let backbone = if use_backbone {
        let mut bg = model.backbone.backward(left, &gl.x)?;
        bg.accumulate(&model.backbone.backward(right, &gr.x)?);
        bg
    } else {
        BackboneGradients::zeros(&model.backbone)
    };
    Ok((
        loss,
        ModelGradients {
            omega: sum(&gl.omega, &gr.omega),
            mu: sum(&gl.mu, &gr.mu),
            sigma: sum(&gl.sigma, &gr.sigma),
            backbone,
        },
    ))
}
