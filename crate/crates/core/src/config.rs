//! Training configuration, read from and written to TOML.

use crate::adjuster::AdjusterConfig;
use crate::density::DensifyThresholds;
use crate::error::{Error, Result};
use crate::gaussian::MAX_SH_DEGREE;
use crate::loss::LossWeights;
use crate::schedule::Schedule;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Component switches for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Never build or train the morph adjuster.
    pub no_adjuster: bool,
    /// Encode positions with Fourier features instead of the tri-plane.
    pub no_triplane: bool,
    /// Keep Gaussians on the neutral mesh; only the head pose and the
    /// adjuster move them.
    pub no_lbs: bool,
    /// Skip the Gaussian-only warm-up; the adjuster trains from iteration 0.
    pub no_init: bool,
    /// During the warm-up, pose the mesh with zero expression instead of the
    /// frame's own coefficients.
    pub strict_zero_expression: bool,
}

/// How Gaussians are seeded on the mesh before training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub gaussians_per_triangle: usize,
    /// Isotropic local-frame scale.
    pub scale: f64,
    pub opacity: f64,
    /// Initial RGB color, converted to the constant SH band.
    pub color: [f64; 3],
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            gaussians_per_triangle: 1,
            scale: 0.4,
            opacity: 0.1,
            color: [0.5; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Worker threads for rendering and gradients; 0 uses every core.
    pub threads: usize,
    pub sh_degree: usize,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub density: DensifyThresholds,
    pub adjuster: AdjusterConfig,
    pub ablation: Ablation,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            sh_degree: 0,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            schedule: Schedule::default(),
            density: DensifyThresholds::default(),
            adjuster: AdjusterConfig::default(),
            ablation: Ablation::default(),
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree must be at most {MAX_SH_DEGREE}")));
        }
        if self.init.gaussians_per_triangle == 0 || !(self.init.scale > 0.0) {
            return Err(Error::Config("init needs at least one Gaussian per triangle and a positive scale".into()));
        }
        if !(self.init.opacity > 0.0 && self.init.opacity < 1.0) {
            return Err(Error::Config("init opacity must lie in (0, 1)".into()));
        }
        let d = &self.density;
        if d.split_factor <= 0.0 || d.percent_dense < 0.0 || d.grad_threshold < 0.0 {
            return Err(Error::Config("densification thresholds must be non-negative, split_factor positive".into()));
        }
        let a = &self.adjuster;
        if a.latent_dim == 0 || a.channels == 0 || a.resolutions.iter().any(|&r| r < 2) {
            return Err(Error::Config("adjuster needs a latent, channels and resolutions of at least 2".into()));
        }
        Ok(())
    }

    /// Iteration from which the adjuster trains, `None` when it never does.
    pub fn adjuster_start(&self) -> Option<usize> {
        if self.ablation.no_adjuster {
            None
        } else if self.ablation.no_init {
            Some(0)
        } else {
            Some(self.schedule.adjuster_start)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}
