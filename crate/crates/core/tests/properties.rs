//! Randomized invariants of the rig, binding, rasterizer, densification,
//! adjuster and losses.

use meshsplat::adjuster::{apply_deformation, DeformBasis, EncodingMode, TriPlane};
use meshsplat::density::{densify_and_prune, DensifyStats, DensifyThresholds};
use meshsplat::gaussian::{activate_params, bind_to_global, build_covariance, GlobalGaussian, LocalGaussian};
use meshsplat::loss::{d_ssim, local_regularizers, rgb_loss};
use meshsplat::math::{axis_angle_to_matrix, logit, Mat3, Quat, RigidTransform, Vec3};
use meshsplat::raster::{render_forward, RenderOptions, Splat2D};
use meshsplat::rig::{evaluate_rig, triangle_frame, Camera, Joint, ParamRig, RigParams};
use meshsplat::Image;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn rigid() -> impl Strategy<Value = RigidTransform> {
    (vec3(3.0), vec3(5.0)).prop_map(|(aa, t)| RigidTransform::from_axis_angle(aa, t))
}

fn triangle() -> impl Strategy<Value = [Vec3; 3]> {
    (vec3(2.0), vec3(2.0), vec3(2.0))
        .prop_map(|(a, b, c)| [a, b, c])
        .prop_filter("non-degenerate", |[a, b, c]| (b - a).cross(&(c - a)).norm() > 1e-2)
}

fn local_gaussian() -> impl Strategy<Value = LocalGaussian> {
    (vec3(1.5), (-1.0..1.0, -1.0..1.0, -1.0..1.0, -1.0..1.0), vec3(2.0), -4.0..4.0)
        .prop_filter("non-zero rotation", |(_, (w, x, y, z), _, _)| w * w + x * x + y * y + z * z > 1e-2)
        .prop_map(|(mu0, (w, x, y, z), s0_raw, o_raw)| LocalGaussian {
            mu0,
            r0_raw: Quat::new(w, x, y, z),
            s0_raw,
            o_raw,
            sh: vec![[0.1, -0.2, 0.3]],
            parent_tri: 0,
        })
}

fn mat_close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
    (a - b).abs().max() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn triangle_frames_are_rigidly_equivariant(tri in triangle(), q in rigid()) {
        let f = triangle_frame(&tri[0], &tri[1], &tri[2]).unwrap();
        let moved = tri.map(|v| q.apply(&v));
        let g = triangle_frame(&moved[0], &moved[1], &moved[2]).unwrap();
        prop_assert!(mat_close(&g.rotation, &(q.rotation * f.rotation), 1e-9));
        prop_assert!((g.origin - q.apply(&f.origin)).norm() <= 1e-9);
        prop_assert!((g.scale - f.scale).abs() <= 1e-9);
    }

    #[test]
    fn binding_commutes_with_rigid_motion(tri in triangle(), q in rigid(), g in local_gaussian()) {
        let a = activate_params(&g).unwrap();
        let f = triangle_frame(&tri[0], &tri[1], &tri[2]).unwrap();
        let moved = tri.map(|v| q.apply(&v));
        let fm = triangle_frame(&moved[0], &moved[1], &moved[2]).unwrap();
        let before = bind_to_global(&a, &f);
        let after = bind_to_global(&a, &fm);
        prop_assert!((after.mu - q.apply(&before.mu)).norm() <= 1e-9);
        prop_assert!((after.s - before.s).norm() <= 1e-9 * before.s.norm().max(1.0));
        let cov_rot = q.rotation * before.covariance() * q.rotation.transpose();
        let tol = 1e-9 * before.covariance().abs().max().max(1.0);
        prop_assert!(mat_close(&after.covariance(), &cov_rot, tol));
    }

    #[test]
    fn bound_covariance_is_conjugated(tri in triangle(), g in local_gaussian()) {
        let a = activate_params(&g).unwrap();
        let f = triangle_frame(&tri[0], &tri[1], &tri[2]).unwrap();
        let bound = bind_to_global(&a, &f);
        let sr = f.rotation * f.scale;
        let expected = sr * build_covariance(&a.r0, &a.s0) * sr.transpose();
        let tol = 1e-9 * expected.abs().max().max(1.0);
        prop_assert!(mat_close(&bound.covariance(), &expected, tol));
    }

    #[test]
    fn expression_is_affine_in_psi(
        psi1 in prop::collection::vec(-2.0..2.0f64, 2),
        psi2 in prop::collection::vec(-2.0..2.0f64, 2),
        alpha in -2.0..2.0f64,
        beta in -2.0..2.0f64,
    ) {
        let rig = small_rig();
        let eval = |psi: Vec<f64>| evaluate_rig(&rig, &RigParams { psi, ..rig.neutral_params() }).unwrap().vertices;
        let mixed: Vec<f64> = psi1.iter().zip(&psi2).map(|(a, b)| alpha * a + beta * b).collect();
        let (v1, v2, vm) = (eval(psi1), eval(psi2), eval(mixed));
        for i in 0..vm.len() {
            let rhs = v1[i] * alpha + v2[i] * beta - rig.template_vertices[i] * (alpha + beta - 1.0);
            prop_assert!((vm[i] - rhs).norm() <= 1e-9);
        }
    }

    #[test]
    fn root_rotation_moves_every_vertex_rigidly(aa in vec3(2.0), psi in prop::collection::vec(-1.0..1.0f64, 2)) {
        let rig = small_rig();
        let base = RigParams { psi: psi.clone(), ..rig.neutral_params() };
        let mut posed = base.clone();
        posed.theta[..3].copy_from_slice(aa.as_slice());
        let r = axis_angle_to_matrix(&aa);
        let v0 = evaluate_rig(&rig, &base).unwrap().vertices;
        let v1 = evaluate_rig(&rig, &posed).unwrap().vertices;
        for (a, b) in v0.iter().zip(&v1) {
            prop_assert!((r * a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn weights_and_transmittance_sum_to_one(seed in 0u64..10_000, n in 1usize..40) {
        let (splats, cam) = random_splats(seed, n, 24, [1.0; 3]);
        let (img, aux) = render_forward(&splats, &cam, [0.0; 3], &RenderOptions::default());
        for (p, t) in aux.transmittance.iter().enumerate() {
            prop_assert!((img.data[3 * p] + t - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn more_opacity_never_raises_transmittance(seed in 0u64..10_000, n in 1usize..30, k in 0usize..30, bump in 0.0..0.5f64) {
        let (mut splats, cam) = random_splats(seed, n, 20, [0.5; 3]);
        let opts = RenderOptions::exact();
        let (_, before) = render_forward(&splats, &cam, [0.0; 3], &opts);
        let k = k % n;
        splats[k].opacity = (splats[k].opacity + bump).min(0.99);
        let (_, after) = render_forward(&splats, &cam, [0.0; 3], &opts);
        for (a, b) in after.transmittance.iter().zip(&before.transmittance) {
            prop_assert!(*a <= *b + 1e-15);
        }
    }

    #[test]
    fn densification_keeps_bindings_valid(seed in 0u64..10_000, n in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let tris = 7;
        let mut gs: Vec<LocalGaussian> = (0..n)
            .map(|_| LocalGaussian {
                mu0: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                r0_raw: Quat::new(1.0, rng.gen_range(-0.5..0.5), 0.0, 0.0),
                s0_raw: Vec3::from_element(rng.gen_range(-6.0f64..0.0)),
                o_raw: logit(rng.gen_range(0.001..0.99)),
                sh: vec![[0.0; 3]],
                parent_tri: rng.gen_range(0..tris),
            })
            .collect();
        let parents: Vec<usize> = gs.iter().map(|g| g.parent_tri).collect();
        let mut stats = DensifyStats {
            grad_norm: (0..n).map(|_| rng.gen_range(0.0..1e-3)).collect(),
            count: vec![1; n],
        };
        let th = DensifyThresholds::default();
        let scales = vec![1.0; tris];
        densify_and_prune(&mut gs, &mut stats, &th, &scales, 1.0, &mut rng).unwrap();
        for g in &gs {
            prop_assert!(parents.contains(&g.parent_tri));
        }
        let snapshot = gs.clone();
        densify_and_prune(&mut gs, &mut stats, &th, &scales, 1.0, &mut rng).unwrap();
        prop_assert_eq!(gs, snapshot);
    }

    #[test]
    fn triplane_cells_agree_on_shared_faces(seed in 0u64..1000, y in 0.0..1.0f64, z in 0.0..1.0f64, cell in 1usize..7) {
        let mut tp = TriPlane::new(vec![8], 2, Vec3::zeros(), Vec3::from_element(1.0));
        tp.init_uniform(&mut ChaCha8Rng::seed_from_u64(seed), 1.0);
        let x = cell as f64 / 7.0;
        let at = |x: f64| tp.encode(&Vec3::new(x, y, z), EncodingMode::Triplane, 0);
        let (left, right) = (at(x - 1e-13), at(x + 1e-13));
        for (a, b) in left.iter().zip(&right) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn deformed_rotation_is_unit(g in local_gaussian(), seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = activate_params(&g).unwrap();
        let global = GlobalGaussian { mu: a.mu0, r: a.r0, s: a.s0, opacity: a.opacity };
        let mut basis = DeformBasis::zeros(3);
        basis.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let f = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let out = apply_deformation(&global, &basis, &f, 1e-6);
        prop_assert!((out.r.norm() - 1.0).abs() <= 1e-6);
        prop_assert!(out.s.min() >= 1e-6);
    }

    #[test]
    fn position_regularizer_is_flat_inside_the_ball(g in local_gaussian(), d in vec3(1.0)) {
        let mut inside = g.clone();
        inside.mu0 = g.mu0.map(|v| v.clamp(-0.5, 0.5));
        let mut moved = inside.clone();
        moved.mu0 = (inside.mu0 + d * 0.5).map(|v| v.clamp(-1.0, 1.0));
        let a = local_regularizers(&[inside], 1.0, 0.6).position;
        let b = local_regularizers(&[moved], 1.0, 0.6).position;
        prop_assert_eq!(a, 0.0);
        prop_assert_eq!(b, 0.0);
    }

    #[test]
    fn losses_are_non_negative_and_symmetric(seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Image::from_data(12, 12, (0..432).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (a, b) = (img(), img());
        prop_assert!(rgb_loss(&a, &b, 0.2).unwrap() >= 0.0);
        let (ab, ba) = (d_ssim(&a, &b).unwrap(), d_ssim(&b, &a).unwrap());
        prop_assert!(ab >= 0.0 && ab <= 1.0);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert_eq!(d_ssim(&a, &a).unwrap().abs() < 1e-12, true);
    }
}

/// Two triangles, two blendshapes, a root joint and a child joint.
fn small_rig() -> ParamRig {
    let verts = vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
        Vec3::new(1.0, 1.0, 0.5),
    ];
    let shapes = vec![
        vec![Vec3::new(0.1, 0.0, 0.0), Vec3::zeros(), Vec3::new(0.0, 0.2, 0.1), Vec3::new(0.0, 0.0, 0.3)],
        vec![Vec3::new(0.0, -0.1, 0.0), Vec3::new(0.05, 0.05, 0.0), Vec3::zeros(), Vec3::new(0.1, 0.0, 0.0)],
    ];
    let joints = vec![
        Joint {
            parent: None,
            rest: RigidTransform::identity(),
        },
        Joint {
            parent: Some(0),
            rest: RigidTransform::new(Mat3::identity(), Vec3::new(0.5, 0.5, 0.0)),
        },
    ];
    let weights = vec![
        vec![(0, 1.0)],
        vec![(0, 0.5), (1, 0.5)],
        vec![(0, 0.7), (1, 0.3)],
        vec![(1, 1.0)],
    ];
    ParamRig::new(verts, vec![[0, 1, 2], [1, 3, 2]], shapes, joints, weights).unwrap()
}

fn random_splats(seed: u64, n: usize, size: usize, color: [f64; 3]) -> (Vec<Splat2D>, Camera) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::y(), size as f64, size, size);
    let splats = (0..n)
        .map(|i| {
            let a = rng.gen_range(0.5..20.0);
            let c = rng.gen_range(0.5..20.0);
            let b = rng.gen_range(-0.9..0.9) * (a * c as f64).sqrt();
            Splat2D {
                mean2d: [rng.gen_range(-2.0..size as f64 + 2.0), rng.gen_range(-2.0..size as f64 + 2.0)],
                cov2d: [a, b, c],
                depth: rng.gen_range(1.0..5.0),
                color,
                opacity: rng.gen_range(0.01..0.99),
                source_id: i,
            }
        })
        .collect();
    (splats, cam)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn renders_do_not_depend_on_thread_count(seed in 0u64..10_000, n in 1usize..120) {
        let (splats, cam) = random_splats(seed, n, 40, [0.3, 0.6, 0.9]);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| render_forward(&splats, &cam, [0.1; 3], &RenderOptions::default()).0)
        };
        prop_assert_eq!(run(1).data, run(3).data);
    }

    #[test]
    fn adjuster_gradients_match_differences(seed in 0u64..10_000, n in 2usize..=10) {
        use meshsplat::gradcheck::{GradScene, ParamClass};
        // Wide step, fourth-order stencil, D-SSIM as the only image term.
        let mut scene = GradScene::tiny(seed, n, 8, 0).unwrap();
        scene.weights.lambda_dssim = 1.0;
        let classes = ParamClass::for_module("morph-adjuster").unwrap();
        for report in scene.check_five_point(&classes, 1e-3, 1e-5).unwrap() {
            prop_assert!(report.max_rel_err <= 1e-5, "{}", report);
        }
    }
}
