//! Parametric triangle-mesh rig (expression blendshapes + linear blend
//! skinning), per-triangle frames and the pinhole camera.

use crate::error::{check_len, Error, Result};
use crate::math::{axis_angle_to_matrix, Mat3, RigidTransform, Vec3};
use serde::{Deserialize, Serialize};

/// Triangles with area below this (model units²) have no usable frame.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub parent: Option<usize>,
    /// Rest transform relative to the parent joint (or the model origin).
    pub rest: RigidTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRig {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// `blendshapes[k][v]` is the displacement of vertex `v` for expression `k`.
    pub blendshapes: Vec<Vec<Vec3>>,
    pub joints: Vec<Joint>,
    /// Sparse `(joint, weight)` rows, one per vertex.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
}

impl ParamRig {
    /// Validates and builds a rig. Joints must be listed parents-first.
    pub fn new(
        template_vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        blendshapes: Vec<Vec<Vec3>>,
        joints: Vec<Joint>,
        skin_weights: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        let n = template_vertices.len();
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::InvalidRig(format!("face {i} index out of range")));
            }
        }
        for (k, b) in blendshapes.iter().enumerate() {
            if b.len() != n {
                return Err(Error::InvalidRig(format!(
                    "blendshape {k} has {} deltas for {n} vertices",
                    b.len()
                )));
            }
        }
        for (j, joint) in joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= j {
                    return Err(Error::InvalidRig(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )));
                }
            }
        }
        if skin_weights.len() != n {
            return Err(Error::InvalidRig(format!(
                "{} skin weight rows for {n} vertices",
                skin_weights.len()
            )));
        }
        for (v, row) in skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= joints.len() {
                    return Err(Error::InvalidRig(format!("vertex {v} weights joint {j}")));
                }
                if w < 0.0 || !w.is_finite() {
                    return Err(Error::InvalidRig(format!("vertex {v} has weight {w}")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidRig(format!(
                    "vertex {v} skin weights sum to {sum}"
                )));
            }
        }
        Ok(Self {
            template_vertices,
            faces,
            blendshapes,
            joints,
            skin_weights,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn expression_dim(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Zero expression, identity joints, identity head pose.
    pub fn neutral_params(&self) -> RigParams {
        RigParams {
            psi: vec![0.0; self.expression_dim()],
            theta: vec![0.0; 3 * self.joint_count()],
            head_pose: RigidTransform::identity(),
        }
    }

    fn check_params(&self, params: &RigParams) -> Result<()> {
        check_len("psi", self.expression_dim(), params.psi.len())?;
        check_len("theta", 3 * self.joint_count(), params.theta.len())
    }

    /// Blendshapes then LBS, in model space (head pose not applied).
    pub fn pose_vertices(&self, params: &RigParams) -> Result<Vec<Vec3>> {
        self.check_params(params)?;

        let mut verts = self.template_vertices.clone();
        for (coeff, deltas) in params.psi.iter().zip(&self.blendshapes) {
            if *coeff == 0.0 {
                continue;
            }
            for (v, d) in verts.iter_mut().zip(deltas) {
                *v += d * *coeff;
            }
        }

        if params.theta.iter().all(|&t| t == 0.0) {
            return Ok(verts);
        }

        let skin = self.skinning_transforms(&params.theta);
        Ok(verts
            .iter()
            .zip(&self.skin_weights)
            .map(|(v, row)| {
                row.iter()
                    .fold(Vec3::zeros(), |acc, &(j, w)| acc + skin[j].apply(v) * w)
            })
            .collect())
    }

    /// Per-joint `G_posed ∘ G_rest⁻¹`.
    fn skinning_transforms(&self, theta: &[f64]) -> Vec<RigidTransform> {
        let mut rest: Vec<RigidTransform> = Vec::with_capacity(self.joints.len());
        let mut posed: Vec<RigidTransform> = Vec::with_capacity(self.joints.len());
        for (j, joint) in self.joints.iter().enumerate() {
            let aa = Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]);
            let local = joint
                .rest
                .compose(&RigidTransform::new(axis_angle_to_matrix(&aa), Vec3::zeros()));
            let (r, p) = match joint.parent {
                Some(pj) => (rest[pj].compose(&joint.rest), posed[pj].compose(&local)),
                None => (joint.rest, local),
            };
            rest.push(r);
            posed.push(p);
        }
        posed
            .iter()
            .zip(&rest)
            .map(|(p, r)| p.compose(&r.inverse()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigParams {
    pub psi: Vec<f64>,
    /// Axis-angle per joint, radians.
    pub theta: Vec<f64>,
    #[serde(with = "rigid_serde")]
    pub head_pose: RigidTransform,
}

/// Posed mesh instance.
#[derive(Clone, Debug)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// Template + Σψ·blendshape, LBS over the joints, then the head pose.
pub fn evaluate_rig(rig: &ParamRig, params: &RigParams) -> Result<PosedMesh> {
    let vertices = rig
        .pose_vertices(params)?
        .iter()
        .map(|v| params.head_pose.apply(v))
        .collect();
    Ok(PosedMesh {
        vertices,
        faces: rig.faces.clone(),
    })
}

/// Orthonormal frame attached to one triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    /// Centroid.
    pub origin: Vec3,
    /// Columns: edge direction, unit normal, their cross product.
    pub rotation: Mat3,
    pub scale: f64,
}

impl TriangleFrame {
    pub fn identity() -> Self {
        Self {
            origin: Vec3::zeros(),
            rotation: Mat3::identity(),
            scale: 1.0,
        }
    }
}

pub fn triangle_frame(v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Option<TriangleFrame> {
    let a10 = v1 - v0;
    let a20 = v2 - v0;
    let a21 = v2 - v1;
    let cross = a10.cross(&a20);
    if 0.5 * cross.norm() <= DEGENERATE_AREA {
        return None;
    }
    let n0 = a10.normalize();
    let n1 = cross.normalize();
    let n2 = n0.cross(&n1);
    let scale = 0.5 * (a20.norm() + n2.dot(&a21).abs());
    Some(TriangleFrame {
        origin: (v0 + v1 + v2) / 3.0,
        rotation: Mat3::from_columns(&[n0, n1, n2]),
        scale,
    })
}

/// Remembers the last valid frame of each triangle so degenerate poses reuse it.
#[derive(Clone, Debug, Default)]
pub struct FrameCache {
    last: Vec<Option<TriangleFrame>>,
}

impl FrameCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames(&mut self, vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<TriangleFrame>> {
        if self.last.len() != faces.len() {
            self.last = vec![None; faces.len()];
        }
        faces
            .iter()
            .enumerate()
            .map(|(t, f)| {
                match triangle_frame(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]) {
                    Some(frame) => {
                        self.last[t] = Some(frame);
                        Ok(frame)
                    }
                    None => self.last[t].ok_or(Error::DegenerateTriangle(t)),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera transform; the camera looks down +z, image y points down.
    #[serde(with = "rigid_serde")]
    pub extrinsics: RigidTransform,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub in_frustum: bool,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        if !(self.near < self.far) {
            return Err(Error::Config("camera near must be below far".into()));
        }
        Ok(())
    }

    /// Camera looking at `target` from `eye` with world `up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            extrinsics: RigidTransform::new(rotation, -(rotation * eye)),
            width,
            height,
            near: 0.01,
            far: 100.0,
        }
    }

    /// Folds a rigid head pose into the extrinsics: model space becomes the
    /// camera's world space.
    pub fn with_head_pose(&self, head_pose: &RigidTransform) -> Camera {
        Camera {
            extrinsics: self.extrinsics.compose(head_pose),
            ..*self
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.extrinsics.rotation.transpose() * self.extrinsics.translation)
    }

    pub fn world_to_pixel(&self, x: &Vec3) -> PixelProjection {
        let c = self.extrinsics.apply(x);
        PixelProjection {
            pixel: [self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy],
            depth: c.z,
            in_frustum: c.z >= self.near && c.z <= self.far,
        }
    }
}

/// Serde form of a rigid transform: `rotation` is written as a row-major
/// 3×3 matrix (exact round trip) and read either as a matrix or as an
/// axis-angle 3-vector in radians.
pub mod rigid_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Rotation {
        Matrix([[f64; 3]; 3]),
        AxisAngle([f64; 3]),
    }

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Repr {
        rotation: Rotation,
        translation: [f64; 3],
    }

    pub fn serialize<S: Serializer>(t: &RigidTransform, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &t.rotation;
        Repr {
            rotation: Rotation::Matrix(std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<RigidTransform, D::Error> {
        let r = Repr::deserialize(d)?;
        let translation = Vec3::from(r.translation);
        Ok(match r.rotation {
            Rotation::Matrix(m) => RigidTransform::new(Mat3::from_fn(|i, j| m[i][j]), translation),
            Rotation::AxisAngle(aa) => RigidTransform::from_axis_angle(Vec3::from(aa), translation),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    fn two_triangle_rig() -> ParamRig {
        let verts = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 1.0, 1.0),
        ];
        let faces = vec![[0, 1, 2], [1, 3, 2]];
        let shapes = vec![
            vec![Vec3::new(0.1, 0.0, 0.0); 4],
            vec![
                Vec3::new(0.0, 0.2, 0.0),
                Vec3::zeros(),
                Vec3::new(0.0, 0.0, -0.3),
                Vec3::new(0.05, 0.05, 0.05),
            ],
        ];
        let joints = vec![Joint {
            parent: None,
            rest: RigidTransform::identity(),
        }];
        let weights = vec![vec![(0, 1.0)]; 4];
        ParamRig::new(verts, faces, shapes, joints, weights).unwrap()
    }

    #[test]
    fn identity_params_return_template() {
        let rig = two_triangle_rig();
        let mesh = evaluate_rig(&rig, &rig.neutral_params()).unwrap();
        assert_eq!(mesh.vertices, rig.template_vertices);
        assert_eq!(mesh.faces, rig.faces);
    }

    #[test]
    fn unit_expression_adds_one_blendshape() {
        let rig = two_triangle_rig();
        let mut p = rig.neutral_params();
        p.psi[1] = 1.0;
        let mesh = evaluate_rig(&rig, &p).unwrap();
        for (i, v) in mesh.vertices.iter().enumerate() {
            assert_eq!(*v, rig.template_vertices[i] + rig.blendshapes[1][i]);
        }
    }

    #[test]
    fn lbs_quarter_turn_about_z() {
        let rig = ParamRig::new(
            vec![Vec3::new(1.0, 0.0, 0.0)],
            vec![],
            vec![],
            vec![Joint {
                parent: None,
                rest: RigidTransform::identity(),
            }],
            vec![vec![(0, 1.0)]],
        )
        .unwrap();
        let p = RigParams {
            psi: vec![],
            theta: vec![0.0, 0.0, FRAC_PI_2],
            head_pose: RigidTransform::identity(),
        };
        let v = evaluate_rig(&rig, &p).unwrap().vertices[0];
        assert_relative_eq!(v, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn child_joint_rotates_about_its_own_pivot() {
        let rig = ParamRig::new(
            vec![Vec3::new(2.0, 0.0, 0.0)],
            vec![],
            vec![],
            vec![
                Joint {
                    parent: None,
                    rest: RigidTransform::identity(),
                },
                Joint {
                    parent: Some(0),
                    rest: RigidTransform::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)),
                },
            ],
            vec![vec![(1, 1.0)]],
        )
        .unwrap();
        let p = RigParams {
            psi: vec![],
            theta: vec![0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2],
            head_pose: RigidTransform::identity(),
        };
        let v = evaluate_rig(&rig, &p).unwrap().vertices[0];
        assert_relative_eq!(v, Vec3::new(1.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let rig = two_triangle_rig();
        let mut p = rig.neutral_params();
        p.psi.push(0.0);
        assert!(matches!(evaluate_rig(&rig, &p), Err(Error::Size { .. })));
        let mut p = rig.neutral_params();
        p.theta.pop();
        assert!(matches!(evaluate_rig(&rig, &p), Err(Error::Size { .. })));
    }

    #[test]
    fn invalid_rigs_are_rejected() {
        let v = vec![Vec3::zeros(); 3];
        let j = vec![Joint {
            parent: None,
            rest: RigidTransform::identity(),
        }];
        let w = vec![vec![(0, 1.0)]; 3];
        assert!(ParamRig::new(v.clone(), vec![[0, 1, 3]], vec![], j.clone(), w.clone()).is_err());
        assert!(ParamRig::new(v.clone(), vec![], vec![vec![Vec3::zeros(); 2]], j.clone(), w).is_err());
        let bad_w = vec![vec![(0, 0.5)]; 3];
        assert!(ParamRig::new(v, vec![], vec![], j, bad_w).is_err());
    }

    #[test]
    fn unit_right_triangle_frame() {
        let f = triangle_frame(
            &Vec3::zeros(),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert_relative_eq!(f.origin, Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(f.rotation.column(0).into_owned(), Vec3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(f.rotation.column(1).into_owned(), Vec3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(f.rotation.column(2).into_owned(), Vec3::new(0.0, -1.0, 0.0));
        assert_relative_eq!(f.scale, 1.0);
    }

    #[test]
    fn frame_scales_homogeneously() {
        let (a, b, c) = (
            Vec3::new(0.2, -0.1, 0.4),
            Vec3::new(1.3, 0.2, -0.2),
            Vec3::new(-0.1, 0.9, 0.3),
        );
        let f = triangle_frame(&a, &b, &c).unwrap();
        let k = 3.7;
        let g = triangle_frame(&(a * k), &(b * k), &(c * k)).unwrap();
        assert_relative_eq!(g.rotation, f.rotation, epsilon = 1e-12);
        assert_relative_eq!(g.scale, f.scale * k, epsilon = 1e-12);
        assert_relative_eq!(g.origin, f.origin * k, epsilon = 1e-12);
        assert_relative_eq!(f.rotation.transpose() * f.rotation, Mat3::identity(), epsilon = 1e-12);
        assert_relative_eq!(f.rotation.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_triangle_reuses_cached_frame() {
        let faces = vec![[0, 1, 2]];
        let good = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let bad = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        assert!(triangle_frame(&bad[0], &bad[1], &bad[2]).is_none());

        let mut cache = FrameCache::new();
        assert!(matches!(
            cache.frames(&bad, &faces),
            Err(Error::DegenerateTriangle(0))
        ));
        let first = cache.frames(&good, &faces).unwrap();
        let reused = cache.frames(&bad, &faces).unwrap();
        assert_eq!(first, reused);
    }

    #[test]
    fn pinhole_projection() {
        let cam = Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 256.0,
            cy: 256.0,
            extrinsics: RigidTransform::identity(),
            width: 512,
            height: 512,
            near: 0.1,
            far: 10.0,
        };
        let on_axis = cam.world_to_pixel(&Vec3::new(0.0, 0.0, 2.5));
        assert_eq!(on_axis.pixel, [256.0, 256.0]);
        assert_eq!(on_axis.depth, 2.5);
        assert!(on_axis.in_frustum);

        let p = cam.world_to_pixel(&Vec3::new(2.0, 0.0, 2.0));
        assert_eq!(p.pixel, [356.0, 256.0]);

        assert!(!cam.world_to_pixel(&Vec3::new(0.0, 0.0, 0.05)).in_frustum);
        assert!(!cam.world_to_pixel(&Vec3::new(0.0, 0.0, 11.0)).in_frustum);
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at(
            Vec3::new(0.5, 0.3, 3.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            80.0,
            64,
            64,
        );
        let p = cam.world_to_pixel(&Vec3::zeros());
        assert_relative_eq!(p.pixel[0], 32.0, epsilon = 1e-12);
        assert_relative_eq!(p.pixel[1], 32.0, epsilon = 1e-12);
        assert_relative_eq!(cam.center(), Vec3::new(0.5, 0.3, 3.0), epsilon = 1e-12);
        // world up maps to image up (negative y)
        let up = cam.world_to_pixel(&Vec3::new(0.0, 0.2, 0.0));
        assert!(up.pixel[1] < 32.0);
    }
}
