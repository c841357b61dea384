//! Analytic-vs-finite-difference checks of the full objective on a tiny
//! scene, per trainable parameter class.

use crate::adjuster::{AdjusterConfig, EncodingMode, MorphAdjuster};
use crate::error::Result;
use crate::gaussian::LocalGaussian;
use crate::loss::LossWeights;
use crate::math::{Quat, RigidTransform, Vec3};
use crate::loss::total_loss;
use crate::objective::evaluate_frame;
use crate::pipeline::{forward_with_queries, Model, ModelGrad, PassSettings, RigState};
use crate::raster::RenderOptions;
use crate::rig::{Camera, Joint, ParamRig, RigParams};
use crate::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    Mu0,
    R0Raw,
    S0Raw,
    ORaw,
    Sh,
    Triplane,
    BasisNet,
    LatentNet,
}

impl ParamClass {
    pub const ALL: [ParamClass; 8] = [
        ParamClass::Mu0,
        ParamClass::R0Raw,
        ParamClass::S0Raw,
        ParamClass::ORaw,
        ParamClass::Sh,
        ParamClass::Triplane,
        ParamClass::BasisNet,
        ParamClass::LatentNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::Mu0 => "mu0",
            ParamClass::R0Raw => "r0_raw",
            ParamClass::S0Raw => "s0_raw",
            ParamClass::ORaw => "o_raw",
            ParamClass::Sh => "sh",
            ParamClass::Triplane => "triplane",
            ParamClass::BasisNet => "basis_net",
            ParamClass::LatentNet => "latent_net",
        }
    }

    /// Classes belonging to a named module; `None` for unknown names.
    pub fn for_module(name: &str) -> Option<Vec<ParamClass>> {
        use ParamClass::*;
        match name {
            "all" | "training" => Some(Self::ALL.to_vec()),
            "gaussian-core" | "gaussian" => Some(vec![Mu0, R0Raw, S0Raw, ORaw, Sh]),
            "morph-adjuster" | "adjuster" => Some(vec![Triplane, BasisNet, LatentNet]),
            _ => Self::ALL.iter().copied().find(|c| c.name() == name).map(|c| vec![c]),
        }
    }

    fn len(self, m: &Model) -> usize {
        let n = m.gaussians.len();
        match self {
            ParamClass::Mu0 | ParamClass::S0Raw => 3 * n,
            ParamClass::R0Raw => 4 * n,
            ParamClass::ORaw => n,
            ParamClass::Sh => m.gaussians.iter().map(|g| 3 * g.sh.len()).sum(),
            ParamClass::Triplane => m.adjuster.triplane.params.len(),
            ParamClass::BasisNet => m.adjuster.basis_net.params.len(),
            ParamClass::LatentNet => m.adjuster.latent_net.params.len(),
        }
    }

    fn value_mut(self, m: &mut Model, i: usize) -> &mut f64 {
        match self {
            ParamClass::Mu0 => &mut m.gaussians[i / 3].mu0[i % 3],
            ParamClass::R0Raw => &mut m.gaussians[i / 4].r0_raw[i % 4],
            ParamClass::S0Raw => &mut m.gaussians[i / 3].s0_raw[i % 3],
            ParamClass::ORaw => &mut m.gaussians[i].o_raw,
            ParamClass::Sh => {
                let (g, k) = sh_index(&m.gaussians, i);
                &mut m.gaussians[g].sh[k / 3][k % 3]
            }
            ParamClass::Triplane => &mut m.adjuster.triplane.params[i],
            ParamClass::BasisNet => &mut m.adjuster.basis_net.params[i],
            ParamClass::LatentNet => &mut m.adjuster.latent_net.params[i],
        }
    }

    fn gradient(self, m: &Model, g: &ModelGrad, i: usize) -> f64 {
        match self {
            ParamClass::Mu0 => g.gaussians[i / 3].mu0[i % 3],
            ParamClass::R0Raw => g.gaussians[i / 4].r0_raw[i % 4],
            ParamClass::S0Raw => g.gaussians[i / 3].s0_raw[i % 3],
            ParamClass::ORaw => g.gaussians[i].o_raw,
            ParamClass::Sh => {
                let (gi, k) = sh_index(&m.gaussians, i);
                g.gaussians[gi].sh[k / 3][k % 3]
            }
            ParamClass::Triplane => g.triplane[i],
            ParamClass::BasisNet => g.basis_net[i],
            ParamClass::LatentNet => g.latent_net[i],
        }
    }
}

fn sh_index(gs: &[LocalGaussian], mut i: usize) -> (usize, usize) {
    for (g, x) in gs.iter().enumerate() {
        if i < 3 * x.sh.len() {
            return (g, i);
        }
        i -= 3 * x.sh.len();
    }
    panic!("sh index out of range");
}

/// Outcome for one parameter class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: ParamClass,
    pub checked: usize,
    /// Entries whose analytic gradient is nonzero.
    pub active: usize,
    pub max_rel_err: f64,
    /// Analytic and finite-difference values at the worst entry.
    pub worst: (f64, f64),
    pub tolerance: f64,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.active > 0 && self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for ClassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} checked {:>5} (nonzero {:>5})  max rel err {:.3e} [{:.6e} vs {:.6e}]  {}",
            self.class.name(),
            self.checked,
            self.active,
            self.max_rel_err,
            self.worst.0,
            self.worst.1,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// A small fully specified scene for gradient checks.
pub struct GradScene {
    pub state: RigState,
    pub model: Model,
    pub params: RigParams,
    pub camera: Camera,
    pub gt: Image,
    pub weights: LossWeights,
    pub settings: PassSettings,
}

fn octahedron_rig() -> Result<ParamRig> {
    let verts = vec![
        Vec3::new(0.8, 0.0, 0.0),
        Vec3::new(-0.8, 0.0, 0.0),
        Vec3::new(0.0, 0.8, 0.0),
        Vec3::new(0.0, -0.8, 0.0),
        Vec3::new(0.0, 0.0, 0.8),
        Vec3::new(0.0, 0.0, -0.8),
    ];
    let faces = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    let bs = vec![
        verts.iter().map(|v| Vec3::new(0.1 * v.y, 0.05, 0.1 * v.x)).collect(),
        verts.iter().map(|v| v * 0.15).collect(),
    ];
    let joints = vec![
        Joint {
            parent: None,
            rest: RigidTransform::identity(),
        },
        Joint {
            parent: Some(0),
            rest: RigidTransform::new(crate::math::Mat3::identity(), Vec3::new(0.0, -0.3, 0.0)),
        },
    ];
    let weights = verts
        .iter()
        .map(|v| if v.y < -0.1 { vec![(0, 0.3), (1, 0.7)] } else { vec![(0, 1.0)] })
        .collect();
    ParamRig::new(verts, faces, bs, joints, weights)
}

impl GradScene {
    /// `n ≤ 8` Gaussians on an octahedron rig, `size × size` image.
    pub fn tiny(seed: u64, n: usize, size: usize, sh_degree: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = RigState::new(octahedron_rig()?)?;
        let (lo, hi) = state.neutral_bounds();
        let mut adjuster = MorphAdjuster::new(
            &AdjusterConfig {
                latent_dim: 3,
                resolutions: [3, 5, 7],
                channels: 2,
                hidden_width: 6,
                hidden_layers: 2,
                ..Default::default()
            },
            EncodingMode::Triplane,
            lo,
            hi,
            2 + 6,
            &mut rng,
        );
        // nonzero final layer
        let last = adjuster.basis_net.params.len() - (6 + 1) * 30;
        for p in &mut adjuster.basis_net.params[last..] {
            *p = rng.gen_range(-0.05..0.05);
        }
        let n_sh = (sh_degree + 1) * (sh_degree + 1);
        let gaussians = (0..n)
            .map(|i| LocalGaussian {
                mu0: Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.1..0.1), rng.gen_range(-0.3..0.3)),
                r0_raw: Quat::new(
                    1.0,
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                ),
                s0_raw: Vec3::new(rng.gen_range(-1.2..-0.4), rng.gen_range(-1.2..-0.4), rng.gen_range(-1.2..-0.4)),
                o_raw: rng.gen_range(-0.5..1.0),
                sh: (0..n_sh)
                    .map(|k| {
                        let amp = if k == 0 { 0.4 } else { 0.1 };
                        std::array::from_fn(|_| rng.gen_range(-amp..amp))
                    })
                    .collect(),
                parent_tri: i % 8,
            })
            .collect::<Vec<_>>();
        let mut model = Model { gaussians, adjuster };
        // push one Gaussian past both regularizer thresholds
        model.gaussians[0].mu0.x = 1.2;
        model.gaussians[0].s0_raw.y = 0.7f64.ln();
        let camera = Camera::look_at(
            Vec3::new(0.4, -0.3, 3.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            size as f64 * 1.4,
            size,
            size,
        );
        let gt = Image::from_data(size, size, (0..size * size * 3).map(|_| rng.gen_range(0.1..0.9)).collect())?;
        Ok(Self {
            state,
            model,
            params: RigParams {
                psi: vec![0.5, -0.4],
                theta: vec![0.0, 0.1, 0.05, 0.2, 0.0, -0.1],
                head_pose: RigidTransform::from_axis_angle(Vec3::new(0.05, -0.1, 0.0), Vec3::new(0.05, 0.0, 0.1)),
            },
            camera,
            gt,
            weights: LossWeights::default(),
            settings: PassSettings {
                use_adjuster: true,
                use_lbs: true,
                zero_expression: false,
                render: RenderOptions::exact(),
                background: [0.3, 0.5, 0.7],
            },
        })
    }

    fn loss(&mut self, model: &Model, queries: &[Vec3]) -> Result<f64> {
        let frames = self.state.frames(&self.params, &self.settings)?;
        let neutral = self.state.neutral_frames().to_vec();
        let pass = forward_with_queries(
            model,
            frames,
            &neutral,
            Some(queries),
            &self.params,
            &self.camera,
            &self.settings,
        )?;
        Ok(total_loss(&pass.image, &self.gt, &model.gaussians, &self.weights, None)?.0.total)
    }

    pub fn gradient(&mut self) -> Result<ModelGrad> {
        let frames = self.state.frames(&self.params, &self.settings)?;
        let neutral = self.state.neutral_frames().to_vec();
        Ok(evaluate_frame(
            &self.model,
            frames,
            &neutral,
            &self.params,
            &self.camera,
            &self.gt,
            &self.weights,
            &self.settings,
            None,
        )?
        .grad)
    }

    /// Central differences with step `h` on every entry of each class. The
    /// relative error of each entry is `|a − fd| / max(|a|, |fd|, REL_FLOOR)`.
    /// Adjuster query positions stay at their unperturbed values, matching
    /// the stop-gradient of the analytic pass.
    pub fn check(&mut self, classes: &[ParamClass], h: f64, tolerance: f64) -> Result<Vec<ClassReport>> {
        self.check_stencil(classes, h, tolerance, false)
    }

    /// Like [`GradScene::check`] with the five-point stencil
    /// `(8(f(h) − f(−h)) − (f(2h) − f(−2h))) / 12h`, whose truncation error
    /// is fourth order in `h`.
    pub fn check_five_point(&mut self, classes: &[ParamClass], h: f64, tolerance: f64) -> Result<Vec<ClassReport>> {
        self.check_stencil(classes, h, tolerance, true)
    }

    fn check_stencil(&mut self, classes: &[ParamClass], h: f64, tolerance: f64, five_point: bool) -> Result<Vec<ClassReport>> {
        let grad = self.gradient()?;
        let queries = self.model.neutral_positions(self.state.neutral_frames())?;
        let mut work = self.model.clone();
        let mut reports = Vec::new();
        for &class in classes {
            let mut report = ClassReport {
                class,
                checked: 0,
                active: 0,
                max_rel_err: 0.0,
                worst: (0.0, 0.0),
                tolerance,
            };
            for i in 0..class.len(&work) {
                let analytic = class.gradient(&self.model, &grad, i);
                let orig = *class.value_mut(&mut work, i);
                let mut diff = |step: f64| -> Result<f64> {
                    *class.value_mut(&mut work, i) = orig + step;
                    let lp = self.loss(&work, &queries)?;
                    *class.value_mut(&mut work, i) = orig - step;
                    let lm = self.loss(&work, &queries)?;
                    *class.value_mut(&mut work, i) = orig;
                    Ok(lp - lm)
                };
                let fd = if five_point {
                    (8.0 * diff(h)? - diff(2.0 * h)?) / (12.0 * h)
                } else {
                    diff(h)? / (2.0 * h)
                };
                report.checked += 1;
                if analytic != 0.0 {
                    report.active += 1;
                }
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.worst = (analytic, fd);
                }
            }
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-7;
