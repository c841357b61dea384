//! Iteration schedule: learning rates, densification, opacity resets and
//! the adjuster start. Iterations are counted from 0.

use crate::error::{Error, Result};
use crate::optim::GroupRates;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub total_iters: usize,
    pub adjuster_start: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    pub densify_stride: usize,
    pub opacity_reset_stride: usize,
    /// Initial position learning rate; also the (constant) scaling rate.
    pub lr_position_scaling: f64,
    /// Fraction of the initial position rate reached at `lr_decay_end`.
    pub lr_decay_target_fraction: f64,
    pub lr_decay_end: usize,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
    pub lr_mlp: f64,
    pub lr_triplane: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iters: 120_000,
            adjuster_start: 5_000,
            densify_start: 500,
            densify_end: 60_000,
            densify_stride: 100,
            opacity_reset_stride: 3_000,
            lr_position_scaling: 5e-3,
            lr_decay_target_fraction: 0.01,
            lr_decay_end: 60_000,
            lr_rotation: 1e-3,
            lr_opacity: 0.05,
            lr_sh: 2.5e-3,
            lr_mlp: 1e-4,
            lr_triplane: 5e-3,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.densify_stride == 0 || self.opacity_reset_stride == 0 || self.lr_decay_end == 0 {
            return Err(Error::Config("strides and lr_decay_end must be positive".into()));
        }
        if self.densify_start > self.densify_end {
            return Err(Error::Config("densify_start must not exceed densify_end".into()));
        }
        let rates = [
            self.lr_position_scaling,
            self.lr_decay_target_fraction,
            self.lr_rotation,
            self.lr_opacity,
            self.lr_sh,
            self.lr_mlp,
            self.lr_triplane,
        ];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// `lr0 · fraction^(min(t, T)/T)`; exactly `lr0 · fraction` from `T` on.
    pub fn position_lr(&self, t: usize) -> f64 {
        let end = self.lr_position_scaling * self.lr_decay_target_fraction;
        if t >= self.lr_decay_end {
            end
        } else {
            self.lr_position_scaling * self.lr_decay_target_fraction.powf(t as f64 / self.lr_decay_end as f64)
        }
    }

    pub fn rates(&self, t: usize) -> GroupRates {
        GroupRates {
            position: self.position_lr(t),
            scaling: self.lr_position_scaling,
            rotation: self.lr_rotation,
            opacity: self.lr_opacity,
            sh: self.lr_sh,
            mlp: self.lr_mlp,
            triplane: self.lr_triplane,
        }
    }

    /// Densify after iteration `t`.
    pub fn is_densify_iter(&self, t: usize) -> bool {
        t >= self.densify_start && t <= self.densify_end && (t - self.densify_start) % self.densify_stride == 0
    }

    /// Reset opacities after iteration `t`; only while densification runs.
    pub fn is_opacity_reset_iter(&self, t: usize) -> bool {
        t > 0 && t % self.opacity_reset_stride == 0 && t <= self.densify_end
    }

    pub fn adjuster_active(&self, t: usize) -> bool {
        t >= self.adjuster_start
    }
}
