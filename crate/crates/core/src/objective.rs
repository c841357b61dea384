//! One frame of the training objective: render, score, differentiate.

use crate::error::Result;
use crate::loss::{local_regularizers_backward, total_loss, LossBreakdown, LossWeights, PerceptualLoss};
use crate::pipeline::{backward, forward, ForwardPass, Model, ModelGrad, PassSettings};
use crate::rig::{Camera, RigParams, TriangleFrame};
use crate::Image;

pub struct FrameEval {
    pub loss: LossBreakdown,
    pub grad: ModelGrad,
    pub pass: ForwardPass,
}

/// Loss value only, for finite differences and evaluation.
#[allow(clippy::too_many_arguments)]
pub fn frame_loss(
    model: &Model,
    frames: Vec<TriangleFrame>,
    neutral: &[TriangleFrame],
    params: &RigParams,
    camera: &Camera,
    gt: &Image,
    weights: &LossWeights,
    settings: &PassSettings,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossBreakdown> {
    let pass = forward(model, frames, neutral, params, camera, settings)?;
    Ok(total_loss(&pass.image, gt, &model.gaussians, weights, perceptual)?.0)
}

/// Loss and gradient w.r.t. every trainable parameter.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_frame(
    model: &Model,
    frames: Vec<TriangleFrame>,
    neutral: &[TriangleFrame],
    params: &RigParams,
    camera: &Camera,
    gt: &Image,
    weights: &LossWeights,
    settings: &PassSettings,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<FrameEval> {
    let pass = forward(model, frames, neutral, params, camera, settings)?;
    let (loss, d_image) = total_loss(&pass.image, gt, &model.gaussians, weights, perceptual)?;
    let mut grad = backward(model, &pass, &d_image)?;
    local_regularizers_backward(
        &model.gaussians,
        weights.eps_position,
        weights.eps_scaling,
        weights.lambda_position,
        weights.lambda_scaling,
        &mut grad.gaussians,
    );
    Ok(FrameEval { loss, grad, pass })
}
