//! Geometry morph adjuster: a multi-resolution tri-plane (or a Fourier
//! positional encoding) feeds a basis network that predicts a per-Gaussian
//! 10×d deformation basis; a second network maps the driving parameters to a
//! latent `f`. Their product offsets position, rotation and scale.

use crate::error::{check_len, Result};
use crate::gaussian::{GlobalGaussian, GlobalGaussianGrad};
use crate::math::{normalize_backward, normalize_quat, sigmoid, Quat, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Rows of a deformation basis: 3 position, 4 rotation, 3 scale.
pub const BASIS_ROWS: usize = 10;

const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    Triplane,
    Fourier,
}

/// Dense multi-resolution tri-plane over an axis-aligned box.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane {
    pub resolutions: Vec<usize>,
    pub channels: usize,
    pub domain_min: Vec3,
    pub domain_max: Vec3,
    /// Level-major, then plane (XY, XZ, YZ), row `v`, column `u`, channel.
    pub params: Vec<f64>,
}

/// One bilinear tap: parameter offset of the node's first channel and weight.
type Tap = (usize, f64);

impl TriPlane {
    pub fn new(resolutions: Vec<usize>, channels: usize, domain_min: Vec3, domain_max: Vec3) -> Self {
        let n = resolutions.iter().map(|r| 3 * r * r * channels).sum();
        Self {
            resolutions,
            channels,
            domain_min,
            domain_max,
            params: vec![0.0; n],
        }
    }

    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, range: f64) {
        for p in &mut self.params {
            *p = rng.gen_range(-range..range);
        }
    }

    pub fn feature_len(&self) -> usize {
        3 * self.resolutions.len() * self.channels
    }

    /// Position mapped to `[0, 1]³`, clamped to the domain.
    pub fn normalize(&self, x: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| {
            let span = self.domain_max[i] - self.domain_min[i];
            ((x[i] - self.domain_min[i]) / span).clamp(0.0, 1.0)
        })
    }

    fn taps(&self, x: &Vec3) -> Vec<[Tap; 4]> {
        let u = self.normalize(x);
        let mut out = Vec::with_capacity(3 * self.resolutions.len());
        let mut level_offset = 0;
        for &res in &self.resolutions {
            for (plane, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let base = level_offset + plane * res * res * self.channels;
                let cell = |t: f64| {
                    let g = t * (res - 1) as f64;
                    let i = (g.floor() as usize).min(res - 2);
                    (i, g - i as f64)
                };
                let (i, fu) = cell(u[a]);
                let (j, fv) = cell(u[b]);
                let node = |ii: usize, jj: usize| base + (jj * res + ii) * self.channels;
                out.push([
                    (node(i, j), (1.0 - fu) * (1.0 - fv)),
                    (node(i + 1, j), fu * (1.0 - fv)),
                    (node(i, j + 1), (1.0 - fu) * fv),
                    (node(i + 1, j + 1), fu * fv),
                ]);
            }
            level_offset += 3 * res * res * self.channels;
        }
        out
    }

    fn query(&self, x: &Vec3) -> Vec<f64> {
        let f = self.channels;
        let mut feat = vec![0.0; self.feature_len()];
        for (k, taps) in self.taps(x).iter().enumerate() {
            for &(off, w) in taps {
                for c in 0..f {
                    feat[k * f + c] += w * self.params[off + c];
                }
            }
        }
        feat
    }

    fn query_backward(&self, x: &Vec3, d_feat: &[f64], out: &mut Vec<(usize, f64)>) {
        let f = self.channels;
        for (k, taps) in self.taps(x).iter().enumerate() {
            for &(off, w) in taps {
                for c in 0..f {
                    out.push((off + c, w * d_feat[k * f + c]));
                }
            }
        }
    }

    fn fourier(&self, x: &Vec3, bands: usize) -> Vec<f64> {
        let p = self.normalize(x) * 2.0 - Vec3::from_element(1.0);
        let mut feat = Vec::with_capacity(3 + 6 * bands);
        feat.extend(p.iter());
        for k in 0..bands {
            let freq = (1u64 << k) as f64 * PI;
            for i in 0..3 {
                feat.push((freq * p[i]).sin());
                feat.push((freq * p[i]).cos());
            }
        }
        feat
    }

    /// Encodes a world position: concatenated bilinear tri-plane samples, or
    /// `[p, sin(2ᵏπp), cos(2ᵏπp)]` on domain-normalized coordinates.
    /// Positions outside the domain are clamped to its boundary.
    pub fn encode(&self, x: &Vec3, mode: EncodingMode, fourier_bands: usize) -> Vec<f64> {
        match mode {
            EncodingMode::Triplane => self.query(x),
            EncodingMode::Fourier => self.fourier(x, fourier_bands),
        }
    }

    pub fn encoded_len(&self, mode: EncodingMode, fourier_bands: usize) -> usize {
        match mode {
            EncodingMode::Triplane => self.feature_len(),
            EncodingMode::Fourier => 3 + 6 * fourier_bands,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fully connected network, softplus hidden activations, linear output.
/// Weights are stored row-major (out × in) followed by the bias, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform `±1/√fan_in` initialization; optionally zeroes the last layer.
    pub fn new<R: Rng>(sizes: Vec<usize>, rng: &mut R, zero_last: bool) -> Self {
        let mut params = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (n_in as f64).sqrt();
            for _ in 0..(n_in + 1) * n_out {
                params.push(if zero_last && l + 1 == layers {
                    0.0
                } else {
                    rng.gen_range(-bound..bound)
                });
            }
        }
        Self { sizes, params }
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += (self.sizes[k] + 1) * self.sizes[k + 1];
        }
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_len("mlp input", self.input_len(), input.len())?;
        let layers = self.sizes.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
        };
        let mut a = input.to_vec();
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                    self.params[b_off + o] + row.iter().zip(&a).map(|(w, x)| w * x).sum::<f64>()
                })
                .collect();
            cache.inputs.push(a);
            if l + 1 == layers {
                a = z;
            } else {
                a = z.iter().map(|&v| softplus(v)).collect();
                cache.pre.push(z);
            }
        }
        Ok((a, cache))
    }

    /// Accumulates parameter gradients into `d_params`; returns `dL/dinput`.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], d_params: &mut [f64]) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let input = &cache.inputs[l];
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                d_params[b_off + o] += d;
                let w_row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                let g_row = &mut d_params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for i in 0..n_in {
                    g_row[i] += d * input[i];
                    d_in[i] += d * w_row[i];
                }
            }
            if l > 0 {
                for (v, z) in d_in.iter_mut().zip(&cache.pre[l - 1]) {
                    *v *= sigmoid(*z);
                }
            }
            delta = d_in;
        }
        delta
    }
}

/// Per-Gaussian 10×d matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformBasis {
    pub latent_dim: usize,
    pub data: Vec<f64>,
}

impl DeformBasis {
    pub fn zeros(latent_dim: usize) -> Self {
        Self {
            latent_dim,
            data: vec![0.0; BASIS_ROWS * latent_dim],
        }
    }

    pub fn rows(&self) -> usize {
        BASIS_ROWS
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.latent_dim..(r + 1) * self.latent_dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.latent_dim..(r + 1) * self.latent_dim]
    }

    /// `(Δμ, Δr, Δs)` stacked as a 10-vector.
    pub fn times(&self, f: &[f64]) -> [f64; BASIS_ROWS] {
        std::array::from_fn(|r| self.row(r).iter().zip(f).map(|(a, b)| a * b).sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjusterConfig {
    pub latent_dim: usize,
    pub resolutions: [usize; 3],
    pub channels: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub fourier_bands: usize,
    pub scale_floor: f64,
    /// Half-width of the uniform tri-plane initialization.
    pub triplane_init: f64,
    /// Relative padding of the neutral bounding box used as tri-plane domain.
    pub domain_padding: f64,
}

impl Default for AdjusterConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            resolutions: [64, 128, 256],
            channels: 4,
            hidden_width: 64,
            hidden_layers: 2,
            fourier_bands: 8,
            scale_floor: 1e-6,
            triplane_init: 0.1,
            domain_padding: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphAdjuster {
    pub mode: EncodingMode,
    pub fourier_bands: usize,
    pub scale_floor: f64,
    pub triplane: TriPlane,
    pub basis_net: Mlp,
    pub latent_net: Mlp,
}

impl MorphAdjuster {
    /// Fresh adjuster over the box `[lo, hi]`, driven by `driving_len`
    /// parameters (expression plus joint rotations).
    pub fn new<R: Rng>(
        config: &AdjusterConfig,
        mode: EncodingMode,
        lo: Vec3,
        hi: Vec3,
        driving_len: usize,
        rng: &mut R,
    ) -> Self {
        let pad = (hi - lo) * config.domain_padding;
        let mut triplane = TriPlane::new(config.resolutions.to_vec(), config.channels, lo - pad, hi + pad);
        triplane.init_uniform(rng, config.triplane_init);
        let hidden = vec![config.hidden_width; config.hidden_layers];
        let mut basis_sizes = vec![triplane.encoded_len(mode, config.fourier_bands)];
        basis_sizes.extend(&hidden);
        basis_sizes.push(BASIS_ROWS * config.latent_dim);
        let mut latent_sizes = vec![driving_len];
        latent_sizes.extend(&hidden);
        latent_sizes.push(config.latent_dim);
        Self {
            mode,
            fourier_bands: config.fourier_bands,
            scale_floor: config.scale_floor,
            basis_net: Mlp::new(basis_sizes, rng, true),
            latent_net: Mlp::new(latent_sizes, rng, false),
            triplane,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_net.output_len()
    }

    pub fn encode_position(&self, x: &Vec3) -> Vec<f64> {
        self.triplane.encode(x, self.mode, self.fourier_bands)
    }

    /// Chains feature gradients into tri-plane parameter contributions
    /// (`(index, value)` pairs). Nothing to do in Fourier mode.
    pub fn encode_position_backward(&self, x: &Vec3, d_feat: &[f64], out: &mut Vec<(usize, f64)>) {
        if self.mode == EncodingMode::Triplane {
            self.triplane.query_backward(x, d_feat, out);
        }
    }

    pub fn predict_basis(&self, features: &[f64]) -> Result<(DeformBasis, MlpCache)> {
        let (out, cache) = self.basis_net.forward(features)?;
        Ok((
            DeformBasis {
                latent_dim: self.latent_dim(),
                data: out,
            },
            cache,
        ))
    }

    pub fn encode_driving(&self, psi: &[f64], theta: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let input: Vec<f64> = psi.iter().chain(theta).copied().collect();
        self.latent_net.forward(&input)
    }
}

fn rotation_delta(d: &[f64; BASIS_ROWS]) -> Option<Quat> {
    let dr = Quat::new(d[3], d[4], d[5], d[6]);
    (dr != Quat::zeros()).then_some(dr)
}

/// `μ = μ' + Δμ`, `r = normalize(r' + Δr)`, `s = max(s' + Δs, floor)`.
/// An exactly zero `Δr` leaves the (already unit) `r'` untouched so a zero
/// basis reproduces the coarse Gaussian bit for bit.
pub fn apply_deformation(g: &GlobalGaussian, basis: &DeformBasis, f: &[f64], scale_floor: f64) -> GlobalGaussian {
    let d = basis.times(f);
    let r = match rotation_delta(&d) {
        Some(dr) => normalize_quat(&(g.r + dr)).unwrap_or(g.r),
        None => g.r,
    };
    GlobalGaussian {
        mu: g.mu + Vec3::new(d[0], d[1], d[2]),
        r,
        s: Vec3::from_fn(|i, _| (g.s[i] + d[7 + i]).max(scale_floor)),
        opacity: g.opacity,
    }
}

/// Gradients of [`apply_deformation`]: w.r.t. the coarse Gaussian, the basis
/// (row-major like [`DeformBasis::data`]) and the latent.
pub fn apply_deformation_backward(
    g: &GlobalGaussian,
    basis: &DeformBasis,
    f: &[f64],
    scale_floor: f64,
    d_refined: &GlobalGaussianGrad,
) -> (GlobalGaussianGrad, Vec<f64>, Vec<f64>) {
    let d = basis.times(f);
    let r_sum = g.r + Quat::new(d[3], d[4], d[5], d[6]);
    let d_rsum = if normalize_quat(&r_sum).is_some() {
        normalize_backward(&r_sum, &d_refined.r)
    } else {
        Quat::zeros()
    };
    let d_coarse_r = if rotation_delta(&d).is_some() { d_rsum } else { d_refined.r };
    let d_s = Vec3::from_fn(|i, _| {
        if g.s[i] + d[7 + i] > scale_floor {
            d_refined.s[i]
        } else {
            0.0
        }
    });
    let d_delta = [
        d_refined.mu.x,
        d_refined.mu.y,
        d_refined.mu.z,
        d_rsum[0],
        d_rsum[1],
        d_rsum[2],
        d_rsum[3],
        d_s.x,
        d_s.y,
        d_s.z,
    ];
    let k = basis.latent_dim;
    let mut d_basis = vec![0.0; BASIS_ROWS * k];
    let mut d_f = vec![0.0; k];
    for r in 0..BASIS_ROWS {
        let row = basis.row(r);
        for c in 0..k {
            d_basis[r * k + c] = d_delta[r] * f[c];
            d_f[c] += row[c] * d_delta[r];
        }
    }
    (
        GlobalGaussianGrad {
            mu: d_refined.mu,
            r: d_coarse_r,
            s: d_s,
            opacity: d_refined.opacity,
            color: d_refined.color,
        },
        d_basis,
        d_f,
    )
}
