//! Photometric and regularization losses with their gradients.

use crate::error::{Error, Result};
use crate::gaussian::{LocalGaussian, LocalGaussianGrad};
use crate::Image;
use serde::{Deserialize, Serialize};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weights and thresholds of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// D-SSIM share of the RGB term; L1 gets the rest.
    pub lambda_dssim: f64,
    pub lambda_perceptual: f64,
    pub lambda_position: f64,
    pub lambda_scaling: f64,
    pub eps_position: f64,
    pub eps_scaling: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            lambda_perceptual: 0.02,
            lambda_position: 0.01,
            lambda_scaling: 1.0,
            eps_position: 1.0,
            eps_scaling: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_dssim,
            self.lambda_perceptual,
            self.lambda_position,
            self.lambda_scaling,
            self.eps_position,
            self.eps_scaling,
        ];
        if all.iter().any(|w| !(*w >= 0.0)) || self.lambda_dssim > 1.0 {
            return Err(Error::Config("loss weights must be non-negative and lambda_dssim ≤ 1".into()));
        }
        Ok(())
    }
}

/// Image-space perceptual loss plugged into the objective.
pub trait PerceptualLoss: Send + Sync {
    /// Loss value and its gradient w.r.t. `render`.
    fn evaluate(&self, render: &Image, gt: &Image) -> Result<(f64, Image)>;
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
}

fn l1_grad(a: &Image, b: &Image) -> Vec<f64> {
    let n = a.data.len() as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            if x > y {
                1.0 / n
            } else if x < y {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Zero-padded "same" convolution of one `w × h` plane with the separable
/// SSIM window. The window is symmetric, so this is also its adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels and, optionally, its gradient w.r.t. `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.same_dims(b)?;
    let (w, h) = (a.width, a.height);
    let n = w * h;
    if n == 0 {
        return Ok((1.0, want_grad.then(|| Image::new(w, h))));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    let scale = 1.0 / (3 * n) as f64;
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let exx = blur(&xx, w, h, &k);
        let eyy = blur(&yy, w, h, &k);
        let exy = blur(&xy, w, h, &k);
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let sxx = exx[i] - mx[i] * mx[i];
            let syy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let (mxi, myi) = (mx[i], my[i]);
                d_mx[i] = scale
                    * (2.0 * myi * a2 / (b1 * b2) - 2.0 * mxi * s / b1 - 2.0 * myi * a1 / (b1 * b2)
                        + 2.0 * mxi * s / b2);
                d_exx[i] = -scale * s / b2;
                d_exy[i] = scale * 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = blur(&d_mx, w, h, &k);
            let gxx = blur(&d_exx, w, h, &k);
            let gxy = blur(&d_exy, w, h, &k);
            for i in 0..n {
                g.data[3 * i + ch] = gm[i] + 2.0 * x[i] * gxx[i] + y[i] * gxy[i];
            }
        }
    }
    Ok((total * scale, grad))
}

/// Gaussian-window SSIM (11×11, σ = 1.5, zero padding), averaged over pixels
/// and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient w.r.t. the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `(1 − SSIM) / 2`.
pub fn d_ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// `(1 − λ)·L1 + λ·D-SSIM`.
pub fn rgb_loss(render: &Image, gt: &Image, lambda_dssim: f64) -> Result<f64> {
    Ok((1.0 - lambda_dssim) * l1(render, gt)? + lambda_dssim * d_ssim(render, gt)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regularizers {
    pub position: f64,
    pub scaling: f64,
}

fn excess(v: f64, eps: f64) -> f64 {
    (v - eps).max(0.0)
}

/// ℓ2 norms of `max(|μ0| − ε_position, 0)` and `max(s0 − ε_scaling, 0)` over
/// every component of every Gaussian.
pub fn local_regularizers(gaussians: &[LocalGaussian], eps_position: f64, eps_scaling: f64) -> Regularizers {
    let mut pos = 0.0;
    let mut scl = 0.0;
    for g in gaussians {
        let s = g.scale();
        for c in 0..3 {
            pos += excess(g.mu0[c].abs(), eps_position).powi(2);
            scl += excess(s[c], eps_scaling).powi(2);
        }
    }
    Regularizers {
        position: pos.sqrt(),
        scaling: scl.sqrt(),
    }
}

/// Adds `w_position·∇L_position + w_scaling·∇L_scaling` into `grads`.
pub fn local_regularizers_backward(
    gaussians: &[LocalGaussian],
    eps_position: f64,
    eps_scaling: f64,
    w_position: f64,
    w_scaling: f64,
    grads: &mut [LocalGaussianGrad],
) {
    let r = local_regularizers(gaussians, eps_position, eps_scaling);
    for (g, d) in gaussians.iter().zip(grads.iter_mut()) {
        let s = g.scale();
        for c in 0..3 {
            if r.position > 0.0 {
                let e = excess(g.mu0[c].abs(), eps_position);
                if e > 0.0 {
                    d.mu0[c] += w_position * g.mu0[c].signum() * e / r.position;
                }
            }
            if r.scaling > 0.0 {
                let e = excess(s[c], eps_scaling);
                if e > 0.0 {
                    d.s0_raw[c] += w_scaling * s[c] * e / r.scaling;
                }
            }
        }
    }
}

/// Every term of the objective for one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dssim: f64,
    pub rgb: f64,
    pub perceptual: f64,
    pub position: f64,
    pub scaling: f64,
    pub total: f64,
}

/// `L_RGB + λ2·L_perceptual + λ3·L_position + λ4·L_scaling` and the gradient
/// of the image-space part w.r.t. `render`. Regularizer gradients are added
/// by [`local_regularizers_backward`].
pub fn total_loss(
    render: &Image,
    gt: &Image,
    gaussians: &[LocalGaussian],
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(LossBreakdown, Image)> {
    let l1v = l1(render, gt)?;
    let (ssim_v, ssim_g) = ssim_with_grad(render, gt)?;
    let dssim = (1.0 - ssim_v) / 2.0;
    let lam = weights.lambda_dssim;
    let rgb = (1.0 - lam) * l1v + lam * dssim;
    let mut d_render = Image::from_data(render.width, render.height, l1_grad(render, gt))?;
    for (d, s) in d_render.data.iter_mut().zip(&ssim_g.data) {
        *d = (1.0 - lam) * *d - lam * 0.5 * s;
    }
    let mut perceptual_v = 0.0;
    if let Some(p) = perceptual {
        let (v, g) = p.evaluate(render, gt)?;
        g.same_dims(render)?;
        perceptual_v = v;
        for (d, s) in d_render.data.iter_mut().zip(&g.data) {
            *d += weights.lambda_perceptual * s;
        }
    }
    let reg = local_regularizers(gaussians, weights.eps_position, weights.eps_scaling);
    let total = rgb
        + weights.lambda_perceptual * perceptual_v
        + weights.lambda_position * reg.position
        + weights.lambda_scaling * reg.scaling;
    Ok((
        LossBreakdown {
            l1: l1v,
            dssim,
            rgb,
            perceptual: perceptual_v,
            position: reg.position,
            scaling: reg.scaling,
            total,
        },
        d_render,
    ))
}
