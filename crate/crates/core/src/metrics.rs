//! Image-quality metrics and dataset evaluation.

use crate::dataset::Frame;
use crate::error::Result;
use crate::loss::ssim;
use crate::pipeline::{forward, Model, PassSettings, RigState};
use crate::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let n = a.data.len().max(1) as f64;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

pub fn psnr_ssim(a: &Image, b: &Image) -> Result<(f64, f64)> {
    Ok((psnr(a, b)?, ssim(a, b)?))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Renders every frame, rounds it to 8 bits like a saved frame and scores
/// it against the ground truth.
pub fn evaluate_frames(model: &Model, rig: &mut RigState, frames: &[Frame], settings: &PassSettings) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let neutral = rig.neutral_frames().to_vec();
    for f in frames {
        let tri = rig.frames(&f.params, settings)?;
        let render = forward(model, tri, &neutral, &f.params, &f.camera, settings)?.image.quantized();
        let (p, s) = psnr_ssim(&render, &f.image)?;
        report.psnr.push(p);
        report.ssim.push(s);
    }
    Ok(report)
}
