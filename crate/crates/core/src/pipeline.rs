//! End-to-end differentiable rendering of a bound Gaussian model.
//!
//! Forward: rig pose → triangle frames → local→global binding → optional
//! morph-adjuster refinement → view-dependent color → EWA projection →
//! tiled compositing. [`backward`] walks the same chain in reverse and
//! returns gradients for every trainable parameter.

use crate::adjuster::{apply_deformation, apply_deformation_backward, DeformBasis, MlpCache, MorphAdjuster};
use crate::error::{check_len, Error, Result};
use crate::gaussian::{
    activate_backward, activate_params, bind_backward, bind_to_global, sh_backward, sh_to_color, ActivatedGaussian,
    GlobalGaussian, LocalGaussian, LocalGaussianGrad,
};
use crate::math::Vec3;
use crate::raster::{project_backward, project_gaussian, render_backward, render_forward, RenderAux, RenderOptions, Splat2D};
use crate::rig::{Camera, FrameCache, ParamRig, RigParams, TriangleFrame};
use crate::Image;
use rayon::prelude::*;

/// Gaussians processed per parallel work unit in the backward pass. Fixed so
/// the reduction order does not depend on the thread count.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub gaussians: Vec<LocalGaussian>,
    pub adjuster: MorphAdjuster,
}

/// Per-call switches of the rendering chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PassSettings {
    pub use_adjuster: bool,
    /// When false, Gaussians stay on the neutral mesh and only the head pose
    /// (camera) and the adjuster move them.
    pub use_lbs: bool,
    /// Pose the mesh with ψ = 0 regardless of the frame's expression.
    pub zero_expression: bool,
    pub render: RenderOptions,
    pub background: [f64; 3],
}

impl Default for PassSettings {
    fn default() -> Self {
        Self {
            use_adjuster: true,
            use_lbs: true,
            zero_expression: false,
            render: RenderOptions::default(),
            background: [0.0; 3],
        }
    }
}

/// A rig together with its neutral frames and the degenerate-frame cache.
#[derive(Clone, Debug)]
pub struct RigState {
    rig: ParamRig,
    neutral: Vec<TriangleFrame>,
    cache: FrameCache,
}

impl RigState {
    pub fn new(rig: ParamRig) -> Result<Self> {
        let neutral = FrameCache::new().frames(&rig.template_vertices, &rig.faces)?;
        Ok(Self {
            rig,
            neutral,
            cache: FrameCache::new(),
        })
    }

    pub fn rig(&self) -> &ParamRig {
        &self.rig
    }

    pub fn neutral_frames(&self) -> &[TriangleFrame] {
        &self.neutral
    }

    /// Axis-aligned bounds of the neutral mesh.
    pub fn neutral_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::from_element(f64::INFINITY);
        let mut hi = Vec3::from_element(f64::NEG_INFINITY);
        for v in &self.rig.template_vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Model-space frames for one frame's parameters (head pose excluded).
    pub fn frames(&mut self, params: &RigParams, settings: &PassSettings) -> Result<Vec<TriangleFrame>> {
        if !settings.use_lbs {
            check_len("psi", self.rig.expression_dim(), params.psi.len())?;
            check_len("theta", 3 * self.rig.joint_count(), params.theta.len())?;
            return Ok(self.neutral.clone());
        }
        let vertices = if settings.zero_expression {
            let neutral_psi = RigParams {
                psi: vec![0.0; params.psi.len()],
                ..params.clone()
            };
            self.rig.pose_vertices(&neutral_psi)?
        } else {
            self.rig.pose_vertices(params)?
        };
        self.cache.frames(&vertices, &self.rig.faces)
    }
}

impl Model {
    /// Neutral global positions used to query the adjuster's encoding.
    pub fn neutral_positions(&self, neutral: &[TriangleFrame]) -> Result<Vec<Vec3>> {
        self.gaussians
            .iter()
            .map(|g| {
                let frame = neutral.get(g.parent_tri).ok_or(Error::Consistency(format!(
                    "parent triangle {} out of range",
                    g.parent_tri
                )))?;
                Ok(bind_to_global(&activate_params(g)?, frame).mu)
            })
            .collect()
    }
}

struct AdjusterPass {
    neutral: Vec<Vec3>,
    bases: Vec<DeformBasis>,
    basis_caches: Vec<MlpCache>,
    latent: Vec<f64>,
    latent_cache: MlpCache,
}

/// Everything [`backward`] needs from a forward call.
pub struct ForwardPass {
    pub image: Image,
    pub splats: Vec<Splat2D>,
    pub aux: RenderAux,
    /// Camera with the head pose folded in.
    pub camera: Camera,
    /// Refined global Gaussians (coarse ones when the adjuster is off).
    pub refined: Vec<GlobalGaussian>,
    /// Splat index per Gaussian, `None` when culled.
    pub splat_of: Vec<Option<usize>>,
    frames: Vec<TriangleFrame>,
    activated: Vec<ActivatedGaussian>,
    coarse: Vec<GlobalGaussian>,
    adjuster: Option<AdjusterPass>,
}

/// Gradients for every trainable parameter class.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub gaussians: Vec<LocalGaussianGrad>,
    pub triplane: Vec<f64>,
    pub basis_net: Vec<f64>,
    pub latent_net: Vec<f64>,
    /// Pixel-space gradient of each Gaussian's projected mean, `None` when culled.
    pub mean2d: Vec<Option<[f64; 2]>>,
}

fn view_dir(mu: &Vec3, center: &Vec3) -> Vec3 {
    (mu - center).normalize()
}

/// Renders one frame. `frames` come from [`RigState::frames`]; `neutral`
/// from [`RigState::neutral_frames`].
pub fn forward(
    model: &Model,
    frames: Vec<TriangleFrame>,
    neutral: &[TriangleFrame],
    params: &RigParams,
    camera: &Camera,
    settings: &PassSettings,
) -> Result<ForwardPass> {
    forward_with_queries(model, frames, neutral, None, params, camera, settings)
}

/// [`forward`] with the adjuster's query positions supplied by the caller
/// instead of recomputed from the current Gaussians. The queries carry no
/// gradient either way.
pub fn forward_with_queries(
    model: &Model,
    frames: Vec<TriangleFrame>,
    neutral: &[TriangleFrame],
    queries: Option<&[Vec3]>,
    params: &RigParams,
    camera: &Camera,
    settings: &PassSettings,
) -> Result<ForwardPass> {
    camera.validate()?;
    for g in &model.gaussians {
        if g.parent_tri >= frames.len() {
            return Err(Error::Consistency(format!("parent triangle {} out of range", g.parent_tri)));
        }
    }
    let cam = camera.with_head_pose(&params.head_pose);
    let activated: Vec<ActivatedGaussian> = model.gaussians.iter().map(activate_params).collect::<Result<_>>()?;
    let coarse: Vec<GlobalGaussian> = activated
        .iter()
        .zip(&model.gaussians)
        .map(|(a, g)| bind_to_global(a, &frames[g.parent_tri]))
        .collect();

    let (refined, adjuster) = if settings.use_adjuster {
        let adj = &model.adjuster;
        let neutral_pos = match queries {
            Some(q) => {
                check_len("query positions", model.gaussians.len(), q.len())?;
                q.to_vec()
            }
            None => model.neutral_positions(neutral)?,
        };
        let (latent, latent_cache) = adj.encode_driving(&params.psi, &params.theta)?;
        let predicted: Vec<(DeformBasis, MlpCache)> = neutral_pos
            .par_iter()
            .map(|x| adj.predict_basis(&adj.encode_position(x)))
            .collect::<Result<_>>()?;
        let (bases, basis_caches): (Vec<_>, Vec<_>) = predicted.into_iter().unzip();
        let refined = coarse
            .iter()
            .zip(&bases)
            .map(|(g, w)| apply_deformation(g, w, &latent, adj.scale_floor))
            .collect();
        (
            refined,
            Some(AdjusterPass {
                neutral: neutral_pos,
                bases,
                basis_caches,
                latent,
                latent_cache,
            }),
        )
    } else {
        (coarse.clone(), None)
    };

    let center = cam.center();
    let mut splats = Vec::with_capacity(refined.len());
    let mut splat_of = vec![None; refined.len()];
    for (i, (g, local)) in refined.iter().zip(&model.gaussians).enumerate() {
        let color = sh_to_color(&local.sh, &view_dir(&g.mu, &center));
        if let Some(s) = project_gaussian(g, color, &cam, i) {
            splat_of[i] = Some(splats.len());
            splats.push(s);
        }
    }
    let (image, aux) = render_forward(&splats, &cam, settings.background, &settings.render);
    Ok(ForwardPass {
        image,
        splats,
        aux,
        camera: cam,
        refined,
        splat_of,
        frames,
        activated,
        coarse,
        adjuster,
    })
}

struct ChunkGrad {
    gaussians: Vec<LocalGaussianGrad>,
    basis_net: Vec<f64>,
    triplane: Vec<(usize, f64)>,
    latent: Vec<f64>,
}

/// Gradients of `Σ d_image ⊙ image` w.r.t. all trainable parameters.
pub fn backward(model: &Model, fp: &ForwardPass, d_image: &Image) -> Result<ModelGrad> {
    check_len("gaussian count", fp.refined.len(), model.gaussians.len())?;
    let splat_grads = render_backward(&fp.splats, &fp.aux, d_image)?;
    let center = fp.camera.center();
    let adj = &model.adjuster;
    let n = model.gaussians.len();
    let basis_len = adj.basis_net.params.len();

    let chunks: Vec<ChunkGrad> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = ChunkGrad {
                gaussians: Vec::with_capacity(CHUNK),
                basis_net: if fp.adjuster.is_some() { vec![0.0; basis_len] } else { Vec::new() },
                triplane: Vec::new(),
                latent: fp.adjuster.as_ref().map_or(Vec::new(), |a| vec![0.0; a.latent.len()]),
            };
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let local = &model.gaussians[i];
                let Some(k) = fp.splat_of[i] else {
                    out.gaussians.push(LocalGaussianGrad::zeros(local.sh.len()));
                    continue;
                };
                let refined = &fp.refined[i];
                let mut d_global = project_backward(refined, &fp.camera, &splat_grads[k]);
                let offset = refined.mu - center;
                let dir = offset.normalize();
                let (d_sh, d_dir) = sh_backward(&local.sh, &dir, &d_global.color);
                d_global.mu += (d_dir - dir * dir.dot(&d_dir)) / offset.norm();

                let d_coarse = match &fp.adjuster {
                    Some(ap) => {
                        let (d_coarse, d_basis, d_f) = apply_deformation_backward(
                            &fp.coarse[i],
                            &ap.bases[i],
                            &ap.latent,
                            adj.scale_floor,
                            &d_global,
                        );
                        let d_feat = adj.basis_net.backward(&ap.basis_caches[i], &d_basis, &mut out.basis_net);
                        adj.encode_position_backward(&ap.neutral[i], &d_feat, &mut out.triplane);
                        for (acc, v) in out.latent.iter_mut().zip(&d_f) {
                            *acc += v;
                        }
                        d_coarse
                    }
                    None => d_global,
                };
                let frame = &fp.frames[local.parent_tri];
                let (d_mu0, d_r0, d_s0) = bind_backward(frame, &d_coarse);
                let (mu0, r0_raw, s0_raw, o_raw) =
                    activate_backward(local, &fp.activated[i], &d_mu0, &d_r0, &d_s0, d_coarse.opacity);
                out.gaussians.push(LocalGaussianGrad {
                    mu0,
                    r0_raw,
                    s0_raw,
                    o_raw,
                    sh: d_sh,
                });
            }
            out
        })
        .collect();

    let mut grad = ModelGrad {
        gaussians: Vec::with_capacity(n),
        triplane: Vec::new(),
        basis_net: Vec::new(),
        latent_net: Vec::new(),
        mean2d: fp.splat_of.iter().map(|k| k.map(|k| splat_grads[k].mean2d)).collect(),
    };
    if let Some(ap) = &fp.adjuster {
        grad.triplane = vec![0.0; adj.triplane.params.len()];
        grad.basis_net = vec![0.0; basis_len];
        let mut d_latent = vec![0.0; ap.latent.len()];
        for chunk in chunks {
            grad.gaussians.extend(chunk.gaussians);
            for (acc, v) in grad.basis_net.iter_mut().zip(&chunk.basis_net) {
                *acc += v;
            }
            for (idx, v) in chunk.triplane {
                grad.triplane[idx] += v;
            }
            for (acc, v) in d_latent.iter_mut().zip(&chunk.latent) {
                *acc += v;
            }
        }
        grad.latent_net = vec![0.0; adj.latent_net.params.len()];
        adj.latent_net.backward(&ap.latent_cache, &d_latent, &mut grad.latent_net);
    } else {
        for chunk in chunks {
            grad.gaussians.extend(chunk.gaussians);
        }
    }
    Ok(grad)
}
