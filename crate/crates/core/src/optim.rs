//! Adam with per-group moments and step counters.

use crate::error::{check_len, Result};
use crate::gaussian::{LocalGaussian, LocalGaussianGrad};
use crate::pipeline::{Model, ModelGrad};
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Moments of one parameter group, stored as `rows × row_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamGroup {
    pub row_len: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamGroup {
    pub fn new(rows: usize, row_len: usize) -> Self {
        Self {
            row_len,
            m: vec![0.0; rows * row_len],
            v: vec![0.0; rows * row_len],
            step: 0,
        }
    }

    pub fn rows(&self) -> usize {
        if self.row_len == 0 {
            0
        } else {
            self.m.len() / self.row_len
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        check_len("adam params", self.m.len(), params.len())?;
        check_len("adam grads", self.m.len(), grads.len())?;
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }

    /// Rebuilds the rows from `origin`: `Some(i)` keeps row `i`'s moments,
    /// `None` starts a fresh zero row.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let k = self.row_len;
        let mut m = Vec::with_capacity(origin.len() * k);
        let mut v = Vec::with_capacity(origin.len() * k);
        for o in origin {
            match o {
                Some(i) => {
                    m.extend_from_slice(&self.m[i * k..(i + 1) * k]);
                    v.extend_from_slice(&self.v[i * k..(i + 1) * k]);
                }
                None => {
                    m.extend(std::iter::repeat(0.0).take(k));
                    v.extend(std::iter::repeat(0.0).take(k));
                }
            }
        }
        self.m = m;
        self.v = v;
    }

    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Learning rate per parameter group for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub position: f64,
    pub scaling: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    pub mlp: f64,
    pub triplane: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub position: AdamGroup,
    pub rotation: AdamGroup,
    pub scaling: AdamGroup,
    pub opacity: AdamGroup,
    pub sh: AdamGroup,
    pub triplane: AdamGroup,
    pub basis_net: AdamGroup,
    pub latent_net: AdamGroup,
}

/// Gathers one field of every Gaussian into a flat buffer, updates it and
/// scatters it back.
fn step_rows(
    group: &mut AdamGroup,
    gaussians: &mut [LocalGaussian],
    grads: &[LocalGaussianGrad],
    lr: f64,
    gather: impl Fn(&LocalGaussian, &LocalGaussianGrad, &mut Vec<f64>, &mut Vec<f64>),
    scatter: impl Fn(&mut LocalGaussian, &[f64]),
) -> Result<()> {
    let mut p = Vec::with_capacity(group.m.len());
    let mut d = Vec::with_capacity(group.m.len());
    for (g, dg) in gaussians.iter().zip(grads) {
        gather(g, dg, &mut p, &mut d);
    }
    group.update(&mut p, &d, lr)?;
    let k = group.row_len;
    for (i, g) in gaussians.iter_mut().enumerate() {
        scatter(g, &p[i * k..(i + 1) * k]);
    }
    Ok(())
}

fn sh_row_len(gs: &[LocalGaussian]) -> usize {
    gs.first().map_or(3, |g| 3 * g.sh.len())
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        let n = model.gaussians.len();
        Self {
            position: AdamGroup::new(n, 3),
            rotation: AdamGroup::new(n, 4),
            scaling: AdamGroup::new(n, 3),
            opacity: AdamGroup::new(n, 1),
            sh: AdamGroup::new(n, sh_row_len(&model.gaussians)),
            triplane: AdamGroup::new(1, model.adjuster.triplane.params.len()),
            basis_net: AdamGroup::new(1, model.adjuster.basis_net.params.len()),
            latent_net: AdamGroup::new(1, model.adjuster.latent_net.params.len()),
        }
    }

    fn gaussian_groups(&mut self) -> [&mut AdamGroup; 5] {
        [
            &mut self.position,
            &mut self.rotation,
            &mut self.scaling,
            &mut self.opacity,
            &mut self.sh,
        ]
    }

    /// Applies one step to every Gaussian parameter group.
    pub fn step_gaussians(&mut self, gaussians: &mut [LocalGaussian], grad: &ModelGrad, lr: &GroupRates) -> Result<()> {
        check_len("gaussian gradients", gaussians.len(), grad.gaussians.len())?;
        for g in gaussians.iter() {
            check_len("sh coefficients", self.sh.row_len, 3 * g.sh.len())?;
        }
        let d = &grad.gaussians;
        step_rows(&mut self.position, gaussians, d, lr.position, |g, dg, p, q| {
            p.extend(g.mu0.iter());
            q.extend(dg.mu0.iter());
        }, |g, v| g.mu0.copy_from_slice(v))?;
        step_rows(&mut self.rotation, gaussians, d, lr.rotation, |g, dg, p, q| {
            p.extend(g.r0_raw.iter());
            q.extend(dg.r0_raw.iter());
        }, |g, v| g.r0_raw.copy_from_slice(v))?;
        step_rows(&mut self.scaling, gaussians, d, lr.scaling, |g, dg, p, q| {
            p.extend(g.s0_raw.iter());
            q.extend(dg.s0_raw.iter());
        }, |g, v| g.s0_raw.copy_from_slice(v))?;
        step_rows(&mut self.opacity, gaussians, d, lr.opacity, |g, dg, p, q| {
            p.push(g.o_raw);
            q.push(dg.o_raw);
        }, |g, v| g.o_raw = v[0])?;
        step_rows(&mut self.sh, gaussians, d, lr.sh, |g, dg, p, q| {
            p.extend(g.sh.iter().flatten());
            q.extend(dg.sh.iter().flatten());
        }, |g, v| {
            for (c, chunk) in g.sh.iter_mut().zip(v.chunks_exact(3)) {
                c.copy_from_slice(chunk);
            }
        })
    }

    /// Applies one step to the tri-plane and both networks.
    pub fn step_adjuster(&mut self, model: &mut Model, grad: &ModelGrad, lr: &GroupRates) -> Result<()> {
        let adj = &mut model.adjuster;
        self.triplane.update(&mut adj.triplane.params, &grad.triplane, lr.triplane)?;
        self.basis_net.update(&mut adj.basis_net.params, &grad.basis_net, lr.mlp)?;
        self.latent_net.update(&mut adj.latent_net.params, &grad.latent_net, lr.mlp)
    }

    /// Follows a densification: see [`AdamGroup::remap`].
    pub fn remap_gaussians(&mut self, origin: &[Option<usize>]) {
        for g in self.gaussian_groups() {
            g.remap(origin);
        }
    }

    /// All groups in a fixed order, for serialization.
    pub fn groups(&self) -> [&AdamGroup; 8] {
        [
            &self.position,
            &self.rotation,
            &self.scaling,
            &self.opacity,
            &self.sh,
            &self.triplane,
            &self.basis_net,
            &self.latent_net,
        ]
    }

    pub fn from_groups(groups: [AdamGroup; 8]) -> Self {
        let [position, rotation, scaling, opacity, sh, triplane, basis_net, latent_net] = groups;
        Self {
            position,
            rotation,
            scaling,
            opacity,
            sh,
            triplane,
            basis_net,
            latent_net,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_is_lr_sized() {
        let mut g = AdamGroup::new(1, 1);
        let mut p = [0.0];
        g.update(&mut p, &[1.0], 0.1).unwrap();
        assert_relative_eq!(p[0], -0.1 / (1.0 + ADAM_EPS), epsilon = 1e-15);
        assert_eq!(g.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut g = AdamGroup::new(2, 2);
        let mut p = [0.3, -1.0, 2.0, 0.0];
        g.update(&mut p, &[0.0; 4], 0.5).unwrap();
        assert_eq!(p, [0.3, -1.0, 2.0, 0.0]);
        assert!(g.update(&mut p, &[0.0; 3], 0.5).is_err());
    }

    #[test]
    fn moments_decay() {
        let mut g = AdamGroup::new(1, 1);
        let mut p = [0.0];
        g.update(&mut p, &[2.0], 0.1).unwrap();
        let (m, v) = (g.m[0], g.v[0]);
        g.update(&mut p, &[0.0], 0.1).unwrap();
        assert_relative_eq!(g.m[0], 0.9 * m, epsilon = 1e-15);
        assert_relative_eq!(g.v[0], 0.999 * v, epsilon = 1e-15);
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut g = AdamGroup::new(1, 3);
            let mut p = [0.1, 0.2, 0.3];
            for t in 0..50 {
                let grads = p.map(|x| (x * 3.0 + t as f64).sin());
                g.update(&mut p, &grads, 0.01).unwrap();
            }
            (p, g)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn remap_keeps_and_zeroes_rows() {
        let mut g = AdamGroup::new(3, 2);
        g.m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        g.v = g.m.clone();
        g.remap(&[Some(2), None, Some(0)]);
        assert_eq!(g.m, vec![5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(g.rows(), 3);
    }
}
