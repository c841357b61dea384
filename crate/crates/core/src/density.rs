//! Adaptive densification with binding inheritance and opacity reset.

use crate::error::{check_len, Error, Result};
use crate::gaussian::LocalGaussian;
use crate::math::{logit, quat_to_matrix, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyThresholds {
    /// Averaged view-space positional gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians whose world-space extent exceeds this fraction of the scene
    /// extent are split, smaller ones cloned.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub split_children: usize,
    pub prune_opacity: f64,
    pub opacity_reset_ceiling: f64,
    /// Densification stops adding Gaussians beyond this count.
    pub max_gaussians: usize,
}

impl Default for DensifyThresholds {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            split_children: 2,
            prune_opacity: 0.005,
            opacity_reset_ceiling: 0.01,
            max_gaussians: 200_000,
        }
    }
}

/// Accumulated view-space gradient norms since the last densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_norm: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count.is_empty()
    }

    /// Adds one frame of pixel-space mean gradients. They are rescaled to
    /// normalized device coordinates (`±1` across the image) so the threshold
    /// does not depend on resolution.
    pub fn accumulate(&mut self, mean2d: &[Option<[f64; 2]>], width: usize, height: usize) -> Result<()> {
        check_len("densify stats", self.len(), mean2d.len())?;
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for (i, g) in mean2d.iter().enumerate() {
            if let Some([gx, gy]) = g {
                self.grad_norm[i] += (gx * sx).hypot(gy * sy);
                self.count[i] += 1;
            }
        }
        Ok(())
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_norm[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Source row of every output Gaussian; `None` for offspring.
    pub origin: Vec<Option<usize>>,
}

/// Uniform sample in the unit ball by rejection.
fn unit_ball<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// Clones small and splits large high-gradient Gaussians, then prunes
/// transparent ones. `frame_scales[t]` is the neutral scale of triangle `t`,
/// used to measure each Gaussian's world-space extent. Every offspring keeps
/// its parent's triangle. Stats are reset to the new set.
pub fn densify_and_prune<R: Rng>(
    gaussians: &mut Vec<LocalGaussian>,
    stats: &mut DensifyStats,
    th: &DensifyThresholds,
    frame_scales: &[f64],
    extent: f64,
    rng: &mut R,
) -> Result<DensifyReport> {
    check_len("densify stats", gaussians.len(), stats.len())?;
    if let Some(g) = gaussians.iter().find(|g| g.parent_tri >= frame_scales.len()) {
        return Err(Error::Consistency(format!("parent triangle {} out of range", g.parent_tri)));
    }
    let n = gaussians.len();
    let mut budget = th.max_gaussians.saturating_sub(n);
    let mut clone = vec![false; n];
    let mut split = vec![false; n];
    for i in 0..n {
        if stats.average(i) < th.grad_threshold {
            continue;
        }
        let g = &gaussians[i];
        let world = frame_scales[g.parent_tri] * g.scale().max();
        if world <= th.percent_dense * extent {
            if budget >= 1 {
                clone[i] = true;
                budget -= 1;
            }
        } else if budget + 1 >= th.split_children && th.split_children > 0 {
            split[i] = true;
            budget = budget + 1 - th.split_children;
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut origin = Vec::with_capacity(n);
    for (i, g) in gaussians.iter().enumerate() {
        if !split[i] {
            out.push(g.clone());
            origin.push(Some(i));
        }
    }
    let mut report = DensifyReport::default();
    for (i, g) in gaussians.iter().enumerate() {
        if clone[i] {
            out.push(g.clone());
            origin.push(None);
            report.cloned += 1;
        }
    }
    for (i, g) in gaussians.iter().enumerate() {
        if !split[i] {
            continue;
        }
        report.split += 1;
        let s = g.scale();
        let rot = quat_to_matrix(&g.r0_raw.normalize());
        for _ in 0..th.split_children {
            let offset = rot * s.component_mul(&unit_ball(rng));
            out.push(LocalGaussian {
                mu0: g.mu0 + offset,
                s0_raw: (s / th.split_factor).map(f64::ln),
                ..g.clone()
            });
            origin.push(None);
        }
    }

    let mut kept = Vec::with_capacity(out.len());
    let mut kept_origin = Vec::with_capacity(out.len());
    for (g, o) in out.into_iter().zip(origin) {
        if g.opacity() < th.prune_opacity {
            report.pruned += 1;
        } else {
            kept.push(g);
            kept_origin.push(o);
        }
    }
    *gaussians = kept;
    report.origin = kept_origin;
    *stats = DensifyStats::new(gaussians.len());
    Ok(report)
}

/// Lowers every opacity above `ceiling` to `ceiling`; others are untouched.
pub fn reset_opacity(gaussians: &mut [LocalGaussian], ceiling: f64) {
    let raw = logit(ceiling);
    for g in gaussians {
        if g.opacity() > ceiling {
            g.o_raw = raw;
        }
    }
}
