//! Gaussian primitives: triangle-local parameters, activation, covariance,
//! binding to a triangle frame and spherical-harmonics color.
//!
//! Every forward function here has a `*_backward` companion that maps an
//! upstream gradient onto its inputs. The rasterizer and trainer chain them.

use crate::error::{Error, Result};
use crate::math::{
    matrix_to_quat, normalize_backward, normalize_quat, quat_left_matrix, quat_mul,
    quat_to_matrix, quat_to_matrix_backward, sigmoid, Mat3, Quat, Vec3,
};
use crate::rig::TriangleFrame;

pub const MAX_SH_DEGREE: usize = 3;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Per-primitive parameters in triangle-local space.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGaussian {
    pub mu0: Vec3,
    /// Unnormalized rotation, scalar-first.
    pub r0_raw: Quat,
    /// Log-scale.
    pub s0_raw: Vec3,
    /// Pre-sigmoid opacity.
    pub o_raw: f64,
    /// RGB coefficients per SH basis function.
    pub sh: Vec<[f64; 3]>,
    pub parent_tri: usize,
}

impl LocalGaussian {
    pub fn sh_degree(&self) -> usize {
        let n = self.sh.len();
        (0..=MAX_SH_DEGREE)
            .find(|&d| sh_coeff_count(d) == n)
            .unwrap_or(0)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.o_raw)
    }

    pub fn scale(&self) -> Vec3 {
        self.s0_raw.map(f64::exp)
    }
}

/// Gradient with the same layout as [`LocalGaussian`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGaussianGrad {
    pub mu0: Vec3,
    pub r0_raw: Quat,
    pub s0_raw: Vec3,
    pub o_raw: f64,
    pub sh: Vec<[f64; 3]>,
}

impl LocalGaussianGrad {
    pub fn zeros(sh_len: usize) -> Self {
        Self {
            mu0: Vec3::zeros(),
            r0_raw: Quat::zeros(),
            s0_raw: Vec3::zeros(),
            o_raw: 0.0,
            sh: vec![[0.0; 3]; sh_len],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivatedGaussian {
    pub mu0: Vec3,
    pub r0: Quat,
    pub s0: Vec3,
    pub opacity: f64,
}

pub fn activate_params(g: &LocalGaussian) -> Result<ActivatedGaussian> {
    Ok(ActivatedGaussian {
        mu0: g.mu0,
        r0: normalize_quat(&g.r0_raw).ok_or(Error::ZeroQuaternion)?,
        s0: g.scale(),
        opacity: g.opacity(),
    })
}

/// Chains activated-space gradients back to the raw parameters.
pub fn activate_backward(
    g: &LocalGaussian,
    a: &ActivatedGaussian,
    d_mu0: &Vec3,
    d_r0: &Quat,
    d_s0: &Vec3,
    d_opacity: f64,
) -> (Vec3, Quat, Vec3, f64) {
    (
        *d_mu0,
        normalize_backward(&g.r0_raw, d_r0),
        d_s0.component_mul(&a.s0),
        d_opacity * a.opacity * (1.0 - a.opacity),
    )
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and positive scales.
pub fn build_covariance(r: &Quat, s: &Vec3) -> Mat3 {
    let m = quat_to_matrix(r) * Mat3::from_diagonal(s);
    m * m.transpose()
}

/// Gradient of `build_covariance` w.r.t. the quaternion components (as used
/// in the rotation formula) and the scales. `d_sigma` is the full-matrix
/// gradient and is symmetrized here.
pub fn build_covariance_backward(r: &Quat, s: &Vec3, d_sigma: &Mat3) -> (Quat, Vec3) {
    let rot = quat_to_matrix(r);
    let m = rot * Mat3::from_diagonal(s);
    let g = d_sigma + d_sigma.transpose();
    let d_m = g * m;
    let mut d_s = Vec3::zeros();
    let mut d_rot = d_m;
    for i in 0..3 {
        d_s[i] = d_m.column(i).dot(&rot.column(i));
        d_rot.column_mut(i).scale_mut(s[i]);
    }
    (quat_to_matrix_backward(r, &d_rot), d_s)
}

/// Bound (global) Gaussian geometry and opacity. Color is attached at
/// projection time since it depends on the viewing direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalGaussian {
    pub mu: Vec3,
    pub r: Quat,
    pub s: Vec3,
    pub opacity: f64,
}

impl GlobalGaussian {
    pub fn covariance(&self) -> Mat3 {
        build_covariance(&self.r, &self.s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalGaussianGrad {
    pub mu: Vec3,
    pub r: Quat,
    pub s: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// `r' = quat(R) ⊗ r0`, `μ' = S R μ0 + M`, `s' = S s0`.
pub fn bind_to_global(a: &ActivatedGaussian, frame: &TriangleFrame) -> GlobalGaussian {
    let q_frame = matrix_to_quat(&frame.rotation);
    GlobalGaussian {
        mu: frame.scale * (frame.rotation * a.mu0) + frame.origin,
        r: quat_mul(&q_frame, &a.r0),
        s: a.s0 * frame.scale,
        opacity: a.opacity,
    }
}

/// Gradient of `bind_to_global` w.r.t. `(μ0, r0, s0)`; the frame is constant.
pub fn bind_backward(frame: &TriangleFrame, d: &GlobalGaussianGrad) -> (Vec3, Quat, Vec3) {
    let q_frame = matrix_to_quat(&frame.rotation);
    (
        frame.rotation.transpose() * d.mu * frame.scale,
        quat_left_matrix(&q_frame).transpose() * d.r,
        d.s * frame.scale,
    )
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Constant-band coefficients that evaluate to `rgb` in every direction.
pub fn rgb_to_sh_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real SH basis values and their gradients w.r.t. the direction, up to
/// `n` coefficients.
fn sh_basis(dir: &Vec3, n: usize) -> (Vec<f64>, Vec<Vec3>) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut val = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n);
    val.push(SH_C0);
    grad.push(Vec3::zeros());
    if n > 1 {
        val.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
        grad.extend([
            Vec3::new(0.0, -SH_C1, 0.0),
            Vec3::new(0.0, 0.0, SH_C1),
            Vec3::new(-SH_C1, 0.0, 0.0),
        ]);
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        val.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
        grad.extend([
            Vec3::new(y, x, 0.0) * SH_C2[0],
            Vec3::new(0.0, z, y) * SH_C2[1],
            Vec3::new(-2.0 * x, -2.0 * y, 4.0 * z) * SH_C2[2],
            Vec3::new(z, 0.0, x) * SH_C2[3],
            Vec3::new(2.0 * x, -2.0 * y, 0.0) * SH_C2[4],
        ]);
    }
    if n > 9 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        val.extend([
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]);
        grad.extend([
            Vec3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0) * SH_C3[0],
            Vec3::new(y * z, x * z, x * y) * SH_C3[1],
            Vec3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z) * SH_C3[2],
            Vec3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy) * SH_C3[3],
            Vec3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z) * SH_C3[4],
            Vec3::new(2.0 * x * z, -2.0 * y * z, xx - yy) * SH_C3[5],
            Vec3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0) * SH_C3[6],
        ]);
    }
    val.truncate(n);
    grad.truncate(n);
    (val, grad)
}

/// `clamp(Σ Y_k(dir) c_k + 0.5, 0, 1)` per channel.
pub fn sh_to_color(sh: &[[f64; 3]], view_dir: &Vec3) -> [f64; 3] {
    let (basis, _) = sh_basis(view_dir, sh.len());
    let mut out = [0.5; 3];
    for (b, c) in basis.iter().zip(sh) {
        for ch in 0..3 {
            out[ch] += b * c[ch];
        }
    }
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Gradients of `sh_to_color` w.r.t. the coefficients and the direction.
/// Channels that hit the clamp pass no gradient.
pub fn sh_backward(sh: &[[f64; 3]], view_dir: &Vec3, d_color: &[f64; 3]) -> (Vec<[f64; 3]>, Vec3) {
    let (basis, basis_grad) = sh_basis(view_dir, sh.len());
    let mut raw = [0.5; 3];
    for (b, c) in basis.iter().zip(sh) {
        for ch in 0..3 {
            raw[ch] += b * c[ch];
        }
    }
    let pass: [f64; 3] = std::array::from_fn(|ch| {
        if raw[ch] > 0.0 && raw[ch] < 1.0 {
            d_color[ch]
        } else {
            0.0
        }
    });
    let d_sh = basis.iter().map(|b| pass.map(|g| g * b)).collect();
    let mut d_dir = Vec3::zeros();
    for (bg, c) in basis_grad.iter().zip(sh) {
        d_dir += bg * (pass[0] * c[0] + pass[1] * c[1] + pass[2] * c[2]);
    }
    (d_sh, d_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::axis_angle_to_matrix;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize()
    }

    fn local(mu0: Vec3, s0_raw: Vec3) -> LocalGaussian {
        LocalGaussian {
            mu0,
            r0_raw: Quat::new(1.0, 0.0, 0.0, 0.0),
            s0_raw,
            o_raw: 0.0,
            sh: vec![[0.0; 3]],
            parent_tri: 0,
        }
    }

    #[test]
    fn activation_examples() {
        let mut g = local(Vec3::zeros(), Vec3::zeros());
        g.r0_raw = Quat::new(2.0, 0.0, 0.0, 0.0);
        let a = activate_params(&g).unwrap();
        assert_eq!(a.s0, Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.r0, Quat::new(1.0, 0.0, 0.0, 0.0));

        g.r0_raw = Quat::zeros();
        assert!(matches!(activate_params(&g), Err(Error::ZeroQuaternion)));
    }

    #[test]
    fn axis_aligned_covariance() {
        let sigma = build_covariance(&Quat::new(1.0, 0.0, 0.0, 0.0), &Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(sigma, Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let r = random_quat(&mut rng);
            let s = Vec3::new(
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
            );
            let sigma = build_covariance(&r, &s);
            assert_eq!(sigma, sigma.transpose());
            let mut eig: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
            let mut expect: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            expect.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expect) {
                assert_relative_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let r = random_quat(&mut rng);
            let s = Vec3::new(0.5, 1.2, 0.8);
            let g = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let loss = |r: &Quat, s: &Vec3| build_covariance(r, s).component_mul(&g).sum();
            let (dr, ds) = build_covariance_backward(&r, &s, &g);
            let h = 1e-6;
            for i in 0..4 {
                let (mut a, mut b) = (r, r);
                a[i] += h;
                b[i] -= h;
                let fd = (loss(&a, &s) - loss(&b, &s)) / (2.0 * h);
                assert!((dr[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "dr[{i}]");
            }
            for i in 0..3 {
                let (mut a, mut b) = (s, s);
                a[i] += h;
                b[i] -= h;
                let fd = (loss(&r, &a) - loss(&r, &b)) / (2.0 * h);
                assert!((ds[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "ds[{i}]");
            }
        }
    }

    #[test]
    fn binding_examples() {
        let a = activate_params(&local(Vec3::new(0.2, -0.4, 0.1), Vec3::new(-0.5, 0.0, 0.3))).unwrap();
        let g = bind_to_global(&a, &TriangleFrame::identity());
        assert_eq!(g.mu, a.mu0);
        assert_eq!(g.r, a.r0);
        assert_eq!(g.s, a.s0);

        let frame = TriangleFrame {
            origin: Vec3::new(5.0, 0.0, 0.0),
            rotation: Mat3::identity(),
            scale: 2.0,
        };
        let mut l = local(Vec3::new(1.0, 0.0, 0.0), Vec3::from_element(0.1f64.ln()));
        l.mu0 = Vec3::new(1.0, 0.0, 0.0);
        let g = bind_to_global(&activate_params(&l).unwrap(), &frame);
        assert_eq!(g.mu, Vec3::new(7.0, 0.0, 0.0));
        assert_relative_eq!(g.s, Vec3::from_element(0.2), epsilon = 1e-15);
    }

    #[test]
    fn bound_covariance_is_conjugated_local_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rot = axis_angle_to_matrix(&Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ));
            let frame = TriangleFrame {
                origin: Vec3::new(0.1, 0.2, 0.3),
                rotation: rot,
                scale: rng.gen_range(0.1..3.0),
            };
            let a = ActivatedGaussian {
                mu0: Vec3::zeros(),
                r0: random_quat(&mut rng),
                s0: Vec3::new(0.3, 0.9, 1.4),
                opacity: 0.5,
            };
            let g = bind_to_global(&a, &frame);
            let sr = rot * frame.scale;
            let expect = sr * build_covariance(&a.r0, &a.s0) * sr.transpose();
            assert_relative_eq!(g.covariance(), expect, epsilon = 1e-9);
            assert_relative_eq!(g.r.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bind_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frame = TriangleFrame {
            origin: Vec3::new(0.3, -0.2, 1.0),
            rotation: axis_angle_to_matrix(&Vec3::new(0.4, -1.1, 0.7)),
            scale: 1.7,
        };
        let a = ActivatedGaussian {
            mu0: Vec3::new(0.2, 0.1, -0.3),
            r0: random_quat(&mut rng),
            s0: Vec3::new(0.3, 0.5, 0.7),
            opacity: 0.4,
        };
        let d = GlobalGaussianGrad {
            mu: Vec3::new(0.3, -0.8, 0.5),
            r: Quat::new(0.1, 0.4, -0.2, 0.9),
            s: Vec3::new(-0.6, 0.2, 0.4),
            ..Default::default()
        };
        let loss = |a: &ActivatedGaussian| {
            let g = bind_to_global(a, &frame);
            g.mu.dot(&d.mu) + g.r.dot(&d.r) + g.s.dot(&d.s)
        };
        let (dmu, dr, ds) = bind_backward(&frame, &d);
        let h = 1e-6;
        let check = |an: f64, fd: f64| assert!((an - fd).abs() <= 1e-5 * fd.abs().max(1e-3));
        for i in 0..3 {
            let (mut p, mut m) = (a, a);
            p.mu0[i] += h;
            m.mu0[i] -= h;
            check(dmu[i], (loss(&p) - loss(&m)) / (2.0 * h));
            let (mut p, mut m) = (a, a);
            p.s0[i] += h;
            m.s0[i] -= h;
            check(ds[i], (loss(&p) - loss(&m)) / (2.0 * h));
        }
        for i in 0..4 {
            let (mut p, mut m) = (a, a);
            p.r0[i] += h;
            m.r0[i] -= h;
            check(dr[i], (loss(&p) - loss(&m)) / (2.0 * h));
        }
    }

    #[test]
    fn sh_degree_zero() {
        let sh = vec![[0.0; 3]];
        assert_eq!(sh_to_color(&sh, &Vec3::new(0.0, 0.0, 1.0)), [0.5; 3]);
        let sh = vec![[0.3, -0.2, 0.7]];
        let a = sh_to_color(&sh, &Vec3::new(0.0, 0.0, 1.0));
        let b = sh_to_color(&sh, &Vec3::new(0.6, -0.8, 0.0));
        assert_eq!(a, b);
        assert_relative_eq!(a[0], 0.5 + SH_C0 * 0.3);
    }

    #[test]
    fn sh_band_one_is_odd() {
        let sh = vec![[0.0; 3], [0.1, 0.0, 0.2], [-0.2, 0.1, 0.0], [0.05, 0.1, -0.1]];
        let d = Vec3::new(0.48, -0.6, 0.64);
        let plus = sh_to_color(&sh, &d);
        let minus = sh_to_color(&sh, &-d);
        for ch in 0..3 {
            assert_relative_eq!(plus[ch] - 0.5, -(minus[ch] - 0.5), epsilon = 1e-15);
        }
    }

    #[test]
    fn sh_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sh: Vec<[f64; 3]> = (0..16)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.05..0.05)))
            .collect();
        let dir = Vec3::new(0.3, -0.5, 0.8).normalize();
        let dc = [0.7, -0.3, 0.5];
        let loss = |sh: &[[f64; 3]], dir: &Vec3| {
            let c = sh_to_color(sh, dir);
            c[0] * dc[0] + c[1] * dc[1] + c[2] * dc[2]
        };
        let (dsh, ddir) = sh_backward(&sh, &dir, &dc);
        let h = 1e-6;
        for k in 0..16 {
            for ch in 0..3 {
                let (mut p, mut m) = (sh.clone(), sh.clone());
                p[k][ch] += h;
                m[k][ch] -= h;
                let fd = (loss(&p, &dir) - loss(&m, &dir)) / (2.0 * h);
                assert_relative_eq!(dsh[k][ch], fd, epsilon = 1e-8);
            }
        }
        for i in 0..3 {
            let (mut p, mut m) = (dir, dir);
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&sh, &p) - loss(&sh, &m)) / (2.0 * h);
            assert_relative_eq!(ddir[i], fd, epsilon = 1e-8);
        }
    }
}
