//! Tile-based differentiable splatting.
//!
//! Pixel `(i, j)` samples the continuous image plane at `(i + 0.5, j + 0.5)`.
//! Splats are composited front to back in `(depth, source_id)` order; the
//! same order is used for every pixel, so the per-tile lists are slices of
//! one global sort and the tiled renderer agrees with the per-pixel oracle.

use crate::buffer::Image;
use crate::error::{Error, Result};
use crate::gaussian::{build_covariance_backward, GlobalGaussian, GlobalGaussianGrad};
use crate::math::{Mat3, Vec3};
use crate::rig::Camera;
use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;
use std::hash::{Hash, Hasher};

pub const TILE_SIZE: usize = 16;
/// Added to the projected covariance diagonal (pixels²).
pub const LOW_PASS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// `[xx, xy, yy]` of the symmetric 2×2 covariance, low-pass included.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source_id: usize,
}

impl Splat2D {
    fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }
}

/// Gradient w.r.t. the splat fields. `cov2d[1]` is the derivative w.r.t. the
/// shared off-diagonal entry.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Splat2DGrad {
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub color: [f64; 3],
    pub opacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Mahalanobis radius beyond which a splat is ignored; `None` evaluates
    /// every splat at every pixel.
    pub cutoff: Option<f64>,
    /// Stop compositing once transmittance drops below this.
    pub saturation: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            cutoff: Some(3.0),
            saturation: Some(1e-4),
        }
    }
}

impl RenderOptions {
    pub fn exact() -> Self {
        Self {
            cutoff: None,
            saturation: None,
        }
    }
}

/// Camera-space mean and EWA projection terms of one Gaussian.
struct Projection {
    t: Vec3,
    jw: Matrix2x3<f64>,
}

fn projection_terms(mu: &Vec3, cam: &Camera) -> Projection {
    let t = cam.extrinsics.apply(mu);
    let iz = 1.0 / t.z;
    let j = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    );
    Projection {
        t,
        jw: j * cam.extrinsics.rotation,
    }
}

/// Local-affine projection of a 3D Gaussian; `None` when outside `[near, far]`.
pub fn project_gaussian(g: &GlobalGaussian, color: [f64; 3], cam: &Camera, source_id: usize) -> Option<Splat2D> {
    let p = projection_terms(&g.mu, cam);
    if !(p.t.z >= cam.near && p.t.z <= cam.far) {
        return None;
    }
    let cov = p.jw * g.covariance() * p.jw.transpose();
    Some(Splat2D {
        mean2d: [
            cam.fx * p.t.x / p.t.z + cam.cx,
            cam.fy * p.t.y / p.t.z + cam.cy,
        ],
        cov2d: [cov[(0, 0)] + LOW_PASS, cov[(0, 1)], cov[(1, 1)] + LOW_PASS],
        depth: p.t.z,
        color,
        opacity: g.opacity,
        source_id,
    })
}

/// Chains a splat gradient back onto the Gaussian that produced it.
pub fn project_backward(g: &GlobalGaussian, cam: &Camera, d: &Splat2DGrad) -> GlobalGaussianGrad {
    let p = projection_terms(&g.mu, cam);
    let (fx, fy) = (cam.fx, cam.fy);
    let (tx, ty, tz) = (p.t.x, p.t.y, p.t.z);
    let iz = 1.0 / tz;
    let iz2 = iz * iz;
    let sigma = g.covariance();

    let g2 = Matrix2::new(d.cov2d[0], 0.5 * d.cov2d[1], 0.5 * d.cov2d[1], d.cov2d[2]);
    let d_sigma: Mat3 = p.jw.transpose() * g2 * p.jw;
    let d_jw = 2.0 * g2 * p.jw * sigma;
    let d_j = d_jw * cam.extrinsics.rotation.transpose();

    let mut dt = Vec3::new(
        d.mean2d[0] * fx * iz - d_j[(0, 2)] * fx * iz2,
        d.mean2d[1] * fy * iz - d_j[(1, 2)] * fy * iz2,
        0.0,
    );
    dt.z = -d.mean2d[0] * fx * tx * iz2 - d.mean2d[1] * fy * ty * iz2
        - d_j[(0, 0)] * fx * iz2
        - d_j[(1, 1)] * fy * iz2
        + d_j[(0, 2)] * 2.0 * fx * tx * iz2 * iz
        + d_j[(1, 2)] * 2.0 * fy * ty * iz2 * iz;

    let (dr, ds) = build_covariance_backward(&g.r, &g.s, &d_sigma);
    GlobalGaussianGrad {
        mu: cam.extrinsics.rotation.transpose() * dt,
        r: dr,
        s: ds,
        opacity: d.opacity,
        color: d.color,
    }
}

/// Backward-pass bookkeeping produced by [`render_forward`].
#[derive(Clone, Debug)]
pub struct RenderAux {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub options: RenderOptions,
    /// Final transmittance per pixel.
    pub transmittance: Vec<f64>,
    /// Number of tile-list entries visited per pixel.
    pub contributors: Vec<u32>,
    /// Splat indices per tile, front to back.
    pub tiles: Vec<Vec<u32>>,
    fingerprint: u64,
}

impl RenderAux {
    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(TILE_SIZE)
    }
}

fn fingerprint(splats: &[Splat2D]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    splats.len().hash(&mut h);
    for s in splats {
        for v in s
            .mean2d
            .iter()
            .chain(&s.cov2d)
            .chain(&s.color)
            .chain([&s.depth, &s.opacity])
        {
            v.to_bits().hash(&mut h);
        }
        s.source_id.hash(&mut h);
    }
    h.finish()
}

/// Indices of `splats` sorted by depth, ties broken by source id.
pub fn depth_order(splats: &[Splat2D]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
        sa.depth
            .total_cmp(&sb.depth)
            .then(sa.source_id.cmp(&sb.source_id))
    });
    order
}

/// Inclusive pixel rectangle a splat can touch, or `None` if off-screen.
fn pixel_bounds(s: &Splat2D, cutoff: f64, width: usize, height: usize) -> Option<[usize; 4]> {
    let ex = cutoff * s.cov2d[0].sqrt();
    let ey = cutoff * s.cov2d[2].sqrt();
    let x0 = (s.mean2d[0] - ex - 0.5).ceil().max(0.0);
    let x1 = (s.mean2d[0] + ex - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (s.mean2d[1] - ey - 0.5).ceil().max(0.0);
    let y1 = (s.mean2d[1] + ey - 0.5).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

fn assign_tiles(splats: &[Splat2D], order: &[u32], width: usize, height: usize, cutoff: Option<f64>) -> Vec<Vec<u32>> {
    let tx = width.div_ceil(TILE_SIZE);
    let ty = height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for &i in order {
        let s = &splats[i as usize];
        if !s.mean2d.iter().chain(&s.cov2d).all(|v| v.is_finite()) {
            continue;
        }
        let Some(cutoff) = cutoff else {
            tiles.iter_mut().for_each(|t| t.push(i));
            continue;
        };
        let Some([x0, x1, y0, y1]) = pixel_bounds(s, cutoff, width, height) else {
            continue;
        };
        for ty_i in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx_i in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty_i * tx + tx_i].push(i);
            }
        }
    }
    tiles
}

#[inline]
fn mahalanobis(conic: &[f64; 3], dx: f64, dy: f64) -> f64 {
    conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
}

struct TileOutput {
    pixels: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    contributors: Vec<u32>,
}

fn tile_rect(tile: usize, tiles_x: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = (tile % tiles_x) * TILE_SIZE;
    let y0 = (tile / tiles_x) * TILE_SIZE;
    (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
}

pub fn render_forward(splats: &[Splat2D], cam: &Camera, background: [f64; 3], options: &RenderOptions) -> (Image, RenderAux) {
    let (width, height) = (cam.width, cam.height);
    let order = depth_order(splats);
    let tiles = assign_tiles(splats, &order, width, height, options.cutoff);
    let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();
    let tiles_x = width.div_ceil(TILE_SIZE);
    let cut2 = options.cutoff.map(|c| c * c);

    let outputs: Vec<TileOutput> = tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (x0, x1, y0, y1) = tile_rect(t, tiles_x, width, height);
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TileOutput {
                pixels: Vec::with_capacity(n),
                transmittance: Vec::with_capacity(n),
                contributors: Vec::with_capacity(n),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut color = [0.0; 3];
                    let mut trans = 1.0;
                    let mut visited = 0u32;
                    for &i in list {
                        visited += 1;
                        let s = &splats[i as usize];
                        let q = mahalanobis(&conics[i as usize], px - s.mean2d[0], py - s.mean2d[1]);
                        if cut2.is_some_and(|c| q > c) {
                            continue;
                        }
                        let alpha = s.opacity * (-0.5 * q).exp();
                        let w = alpha * trans;
                        for ch in 0..3 {
                            color[ch] += s.color[ch] * w;
                        }
                        trans *= 1.0 - alpha;
                        if options.saturation.is_some_and(|th| trans < th) {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        color[ch] += trans * background[ch];
                    }
                    out.pixels.push(color);
                    out.transmittance.push(trans);
                    out.contributors.push(visited);
                }
            }
            out
        })
        .collect();

    let mut image = Image::new(width, height);
    let mut transmittance = vec![0.0; width * height];
    let mut contributors = vec![0u32; width * height];
    for (t, out) in outputs.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_rect(t, tiles_x, width, height);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                image.set_pixel(x, y, out.pixels[k]);
                transmittance[y * width + x] = out.transmittance[k];
                contributors[y * width + x] = out.contributors[k];
                k += 1;
            }
        }
    }

    let aux = RenderAux {
        width,
        height,
        background,
        options: *options,
        transmittance,
        contributors,
        tiles,
        fingerprint: fingerprint(splats),
    };
    (image, aux)
}

/// Conic-space accumulator; converted to covariance gradients once per splat.
#[derive(Clone, Copy, Default)]
struct Accum {
    mean2d: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl Accum {
    fn add(&mut self, o: &Accum) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients of the image w.r.t. every splat. Non-contributing splats get
/// zeros. Reduction order is fixed (tile-major, then pixel-major), so the
/// result does not depend on the thread count.
pub fn render_backward(splats: &[Splat2D], aux: &RenderAux, d_image: &Image) -> Result<Vec<Splat2DGrad>> {
    if aux.fingerprint != fingerprint(splats) {
        return Err(Error::StaleAux);
    }
    if d_image.width != aux.width || d_image.height != aux.height {
        return Err(Error::Consistency("upstream gradient has wrong dimensions".into()));
    }
    let (width, height) = (aux.width, aux.height);
    let tiles_x = aux.tiles_x();
    let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();
    let cut2 = aux.options.cutoff.map(|c| c * c);
    let bg = aux.background;

    let per_tile: Vec<Vec<Accum>> = aux
        .tiles
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut acc = vec![Accum::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (x0, x1, y0, y1) = tile_rect(t, tiles_x, width, height);
            // (slot, alpha, gaussian value, dx, dy, transmittance before)
            let mut stack: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * width + x;
                    let dl: [f64; 3] = std::array::from_fn(|ch| d_image.data[3 * pix + ch]);
                    if dl == [0.0; 3] {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    stack.clear();
                    let mut trans = 1.0;
                    for (slot, &i) in list.iter().take(aux.contributors[pix] as usize).enumerate() {
                        let s = &splats[i as usize];
                        let (dx, dy) = (px - s.mean2d[0], py - s.mean2d[1]);
                        let q = mahalanobis(&conics[i as usize], dx, dy);
                        if cut2.is_some_and(|c| q > c) {
                            continue;
                        }
                        let gval = (-0.5 * q).exp();
                        let alpha = s.opacity * gval;
                        stack.push((slot, alpha, gval, dx, dy, trans));
                        trans *= 1.0 - alpha;
                    }
                    // color seen behind the current splat
                    let mut behind = bg;
                    for &(slot, alpha, gval, dx, dy, t_before) in stack.iter().rev() {
                        let s = &splats[list[slot] as usize];
                        let a = &mut acc[slot];
                        let w = alpha * t_before;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            a.color[ch] += dl[ch] * w;
                            d_alpha += dl[ch] * (s.color[ch] - behind[ch]);
                        }
                        d_alpha *= t_before;
                        for ch in 0..3 {
                            behind[ch] = s.color[ch] * alpha + (1.0 - alpha) * behind[ch];
                        }
                        a.opacity += d_alpha * gval;
                        let d_q = -0.5 * d_alpha * s.opacity * gval;
                        let c = &conics[list[slot] as usize];
                        a.mean2d[0] -= d_q * 2.0 * (c[0] * dx + c[1] * dy);
                        a.mean2d[1] -= d_q * 2.0 * (c[1] * dx + c[2] * dy);
                        a.conic[0] += d_q * dx * dx;
                        a.conic[1] += d_q * 2.0 * dx * dy;
                        a.conic[2] += d_q * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![Accum::default(); splats.len()];
    for (list, acc) in aux.tiles.iter().zip(&per_tile) {
        for (&i, a) in list.iter().zip(acc) {
            total[i as usize].add(a);
        }
    }

    Ok(total
        .iter()
        .zip(&conics)
        .map(|(a, c)| {
            // dL/dcov = -A (dL/dA) A with A the conic, all as full symmetric matrices
            let inv = Matrix2::new(c[0], c[1], c[1], c[2]);
            let g = Matrix2::new(a.conic[0], 0.5 * a.conic[1], 0.5 * a.conic[1], a.conic[2]);
            let d_cov = -(inv * g * inv);
            Splat2DGrad {
                mean2d: a.mean2d,
                cov2d: [d_cov[(0, 0)], d_cov[(0, 1)] + d_cov[(1, 0)], d_cov[(1, 1)]],
                color: a.color,
                opacity: a.opacity,
            }
        })
        .collect())
}

/// Per-pixel reference renderer: every splat at every pixel, exact sort,
/// no tiling and no cutoff. Only the saturation rule is configurable.
pub fn brute_force_render(splats: &[Splat2D], cam: &Camera, background: [f64; 3], saturation: Option<f64>) -> Image {
    let order = depth_order(splats);
    let mut image = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut color = [0.0; 3];
            let mut trans = 1.0;
            for &i in &order {
                let s = &splats[i as usize];
                let [a, b, c] = s.cov2d;
                let det = a * c - b * b;
                let (dx, dy) = (px - s.mean2d[0], py - s.mean2d[1]);
                // Δᵀ Σ⁻¹ Δ via the explicit inverse
                let q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
                let alpha = s.opacity * (-0.5 * q).exp();
                for ch in 0..3 {
                    color[ch] += s.color[ch] * alpha * trans;
                }
                trans *= 1.0 - alpha;
                if saturation.is_some_and(|th| trans < th) {
                    break;
                }
            }
            for ch in 0..3 {
                color[ch] += trans * background[ch];
            }
            image.set_pixel(x, y, color);
        }
    }
    image
}
