//! Synthetic rigs, Gaussian configurations and datasets with known ground
//! truth, used for recovery experiments and tests.

use crate::dataset::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::gaussian::{activate_params, bind_to_global, rgb_to_sh_dc, sh_coeff_count, sh_to_color, LocalGaussian};
use crate::math::{logit, Quat, RigidTransform, Vec3};
use crate::pipeline::{PassSettings, RigState};
use crate::raster::{brute_force_render, project_gaussian};
use crate::rig::{Camera, Joint, ParamRig, RigParams};
use crate::Image;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyRigDims {
    /// Approximate vertex count of the sphere.
    pub vertex_budget: usize,
    pub blendshapes: usize,
    pub joints: usize,
    /// Largest blendshape displacement.
    pub amplitude: f64,
}

impl Default for ToyRigDims {
    fn default() -> Self {
        Self {
            vertex_budget: 254,
            blendshapes: 4,
            joints: 2,
            amplitude: 0.15,
        }
    }
}

/// Ellipsoid axes of the toy head.
const HEAD_AXES: [f64; 3] = [0.85, 1.0, 0.9];

/// UV sphere stretched to a head-like ellipsoid, with smooth random
/// blendshapes and a vertical joint chain. Deterministic for a seed.
pub fn make_toy_rig(seed: u64, dims: &ToyRigDims) -> Result<ParamRig> {
    if dims.joints == 0 {
        return Err(Error::InvalidRig("a toy rig needs at least one joint".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slices = ((1.25 * dims.vertex_budget as f64).sqrt().round() as usize).max(4);
    let stacks = (dims.vertex_budget.saturating_sub(2) / slices + 1).max(3);

    let axes = Vec3::from(HEAD_AXES);
    let mut unit = vec![Vec3::y()];
    for i in 1..stacks {
        let polar = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let az = 2.0 * PI * j as f64 / slices as f64;
            unit.push(Vec3::new(polar.sin() * az.cos(), polar.cos(), polar.sin() * az.sin()));
        }
    }
    unit.push(-Vec3::y());
    let vertices: Vec<Vec3> = unit.iter().map(|u| u.component_mul(&axes)).collect();
    let south = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;

    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
        faces.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        for i in 1..stacks - 1 {
            faces.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            faces.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    for f in &mut faces {
        let [a, b, c] = f.map(|i| vertices[i]);
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            f.swap(1, 2);
        }
    }

    let blendshapes = (0..dims.blendshapes)
        .map(|_| {
            let bumps: Vec<(Vec3, f64)> = (0..3)
                .map(|_| {
                    let c = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    (c.normalize(), rng.gen_range(-1.0..1.0))
                })
                .collect();
            let raw: Vec<Vec3> = unit
                .iter()
                .map(|u| {
                    let w: f64 = bumps.iter().map(|(c, a)| a * (-(u - c).norm_squared() / 0.5).exp()).sum();
                    u.component_mul(&axes) * w
                })
                .collect();
            let peak = raw.iter().map(|d| d.norm()).fold(0.0, f64::max);
            let k = if peak > 0.0 { dims.amplitude / peak } else { 0.0 };
            raw.into_iter().map(|d| d * k).collect()
        })
        .collect();

    let joints = (0..dims.joints)
        .map(|j| Joint {
            parent: j.checked_sub(1),
            rest: RigidTransform::new(
                crate::math::Mat3::identity(),
                if j == 0 { Vec3::zeros() } else { Vec3::new(0.0, -0.35, 0.1) },
            ),
        })
        .collect();

    let span = (dims.joints - 1) as f64;
    let skin = vertices
        .iter()
        .map(|v| {
            if dims.joints == 1 {
                return vec![(0, 1.0)];
            }
            let s = ((0.3 - v.y) / 1.0).clamp(0.0, 1.0) * span;
            let lo = (s.floor() as usize).min(dims.joints - 2);
            let t = s - lo as f64;
            let t = t * t * (3.0 - 2.0 * t);
            let mut row = Vec::new();
            if t < 1.0 {
                row.push((lo, 1.0 - t));
            }
            if t > 0.0 {
                row.push((lo + 1, t));
            }
            row
        })
        .collect();

    ParamRig::new(vertices, faces, blendshapes, joints, skin)
}

/// `count` cameras circling the head at `distance`, alternating between
/// three elevations, all looking at the origin.
pub fn toy_cameras(count: usize, size: usize, distance: f64) -> Vec<Camera> {
    (0..count)
        .map(|i| {
            let az = 2.0 * PI * i as f64 / count as f64;
            let el = 0.35 * ((i % 3) as f64 - 1.0);
            let eye = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * distance;
            Camera::look_at(eye, Vec3::zeros(), Vec3::y(), size as f64 * 1.3 * distance / 3.5, size, size)
        })
        .collect()
}

/// Ranges for random driving parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRanges {
    pub expression: f64,
    pub joint: f64,
    pub head_rotation: f64,
    pub head_translation: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            expression: 1.0,
            joint: 0.3,
            head_rotation: 0.15,
            head_translation: 0.05,
        }
    }
}

fn symmetric<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..r)
    } else {
        0.0
    }
}

pub fn toy_params(rig: &ParamRig, count: usize, seed: u64, ranges: &ParamRanges) -> Vec<RigParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let psi = (0..rig.expression_dim()).map(|_| symmetric(&mut rng, ranges.expression)).collect();
            let theta = (0..3 * rig.joint_count()).map(|_| symmetric(&mut rng, ranges.joint)).collect();
            let mut v = || Vec3::new(symmetric(&mut rng, 1.0), symmetric(&mut rng, 1.0), symmetric(&mut rng, 1.0));
            let head_pose = RigidTransform::from_axis_angle(v() * ranges.head_rotation, v() * ranges.head_translation);
            RigParams { psi, theta, head_pose }
        })
        .collect()
}

/// `count` ground-truth Gaussians on distinct random triangles: flattened
/// along the triangle normal, fairly opaque, random colors.
pub fn make_toy_gaussians(rig: &ParamRig, count: usize, sh_degree: usize, seed: u64) -> Vec<LocalGaussian> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tris = sample(&mut rng, rig.faces.len(), count.min(rig.faces.len())).into_vec();
    tris.into_iter()
        .map(|t| {
            let angle: f64 = rng.gen_range(-PI..PI);
            let mut sh = vec![[0.0; 3]; sh_coeff_count(sh_degree)];
            sh[0] = rgb_to_sh_dc([rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]);
            LocalGaussian {
                mu0: Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.05..0.05), rng.gen_range(-0.2..0.2)),
                r0_raw: Quat::new((angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0),
                s0_raw: Vec3::new(rng.gen_range(0.5f64..0.9).ln(), 0.2f64.ln(), rng.gen_range(0.5f64..0.9).ln()),
                o_raw: logit(rng.gen_range(0.6..0.95)),
                sh,
                parent_tri: t,
            }
        })
        .collect()
}

/// A localized displacement driven nonlinearly by the first expression
/// coefficient. No blendshape or joint motion of the rig can produce it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineDeformation {
    pub center: Vec3,
    pub radius: f64,
    pub direction: Vec3,
    pub amplitude: f64,
}

impl FineDeformation {
    /// A bulge on the front of the toy head.
    pub fn bulge(amplitude: f64) -> Self {
        Self {
            center: Vec3::new(0.0, 0.1, HEAD_AXES[2]),
            radius: 0.35,
            direction: Vec3::z(),
            amplitude,
        }
    }

    /// Offset of a point whose neutral position is `neutral`.
    pub fn offset(&self, neutral: &Vec3, params: &RigParams) -> Vec3 {
        let drive = params.psi.first().map_or(0.0, |p| (PI * p).sin());
        let falloff = (-(neutral - self.center).norm_squared() / (2.0 * self.radius * self.radius)).exp();
        self.direction * (self.amplitude * falloff * drive)
    }
}

/// Renders `gaussians` on the posed rig with the reference renderer, adding
/// `fine` on top of the rig motion when given.
pub fn render_ground_truth(
    rig: &mut RigState,
    gaussians: &[LocalGaussian],
    params: &RigParams,
    camera: &Camera,
    background: [f64; 3],
    fine: Option<&FineDeformation>,
) -> Result<Image> {
    let frames = rig.frames(params, &PassSettings::default())?;
    let cam = camera.with_head_pose(&params.head_pose);
    let center = cam.center();
    let mut splats = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        let frame = frames
            .get(g.parent_tri)
            .ok_or_else(|| Error::Consistency(format!("parent triangle {} out of range", g.parent_tri)))?;
        let a = activate_params(g)?;
        let mut global = bind_to_global(&a, frame);
        if let Some(fd) = fine {
            let neutral = bind_to_global(&a, &rig.neutral_frames()[g.parent_tri]).mu;
            global.mu += fd.offset(&neutral, params);
        }
        let color = sh_to_color(&g.sh, &(global.mu - center).normalize());
        splats.extend(project_gaussian(&global, color, &cam, i));
    }
    Ok(brute_force_render(&splats, &cam, background, None))
}

/// One frame per (parameter setting, camera) pair, parameter-major. Images
/// are rounded to 8 bits so saving and reloading is lossless; masks are all
/// foreground.
pub fn make_toy_dataset(
    rig: &ParamRig,
    gaussians: &[LocalGaussian],
    cameras: &[Camera],
    params: &[RigParams],
    background: [f64; 3],
    fine: Option<&FineDeformation>,
) -> Result<Dataset> {
    let mut state = RigState::new(rig.clone())?;
    let mut frames = Vec::with_capacity(cameras.len() * params.len());
    for p in params {
        for cam in cameras {
            let image = render_ground_truth(&mut state, gaussians, p, cam, background, fine)?.quantized();
            frames.push(Frame {
                mask: vec![true; image.width * image.height],
                image,
                params: p.clone(),
                camera: *cam,
            });
        }
    }
    Ok(Dataset {
        rig: rig.clone(),
        background,
        frames,
    })
}

/// Settings of a complete synthetic experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub seed: u64,
    pub dims: ToyRigDims,
    pub gt_gaussians: usize,
    pub sh_degree: usize,
    pub cameras: usize,
    pub resolution: usize,
    pub train_params: usize,
    pub heldout_params: usize,
    pub ranges: ParamRanges,
    pub background: [f64; 3],
    pub fine: Option<FineDeformation>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: ToyRigDims::default(),
            gt_gaussians: 64,
            sh_degree: 0,
            cameras: 20,
            resolution: 64,
            train_params: 10,
            heldout_params: 10,
            ranges: ParamRanges::default(),
            background: [0.0; 3],
            fine: None,
        }
    }
}

/// Generated rig, ground truth and driving sequences of a [`ToySpec`].
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub spec: ToySpec,
    pub rig: ParamRig,
    pub gaussians: Vec<LocalGaussian>,
    pub cameras: Vec<Camera>,
    pub train_params: Vec<RigParams>,
    pub heldout_params: Vec<RigParams>,
}

impl ToyScene {
    pub fn generate(spec: ToySpec) -> Result<Self> {
        let s = spec.seed;
        let rig = make_toy_rig(s, &spec.dims)?;
        let gaussians = make_toy_gaussians(&rig, spec.gt_gaussians, spec.sh_degree, s.wrapping_add(1));
        let cameras = toy_cameras(spec.cameras, spec.resolution, 3.5);
        let train_params = toy_params(&rig, spec.train_params, s.wrapping_add(2), &spec.ranges);
        let heldout_params = toy_params(&rig, spec.heldout_params, s.wrapping_add(3), &spec.ranges);
        Ok(Self {
            spec,
            rig,
            gaussians,
            cameras,
            train_params,
            heldout_params,
        })
    }

    pub fn train_dataset(&self) -> Result<Dataset> {
        self.dataset(&self.train_params)
    }

    pub fn heldout_dataset(&self) -> Result<Dataset> {
        self.dataset(&self.heldout_params)
    }

    fn dataset(&self, params: &[RigParams]) -> Result<Dataset> {
        make_toy_dataset(
            &self.rig,
            &self.gaussians,
            &self.cameras,
            params,
            self.spec.background,
            self.spec.fine.as_ref(),
        )
    }
}
