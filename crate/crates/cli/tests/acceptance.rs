//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero when any criterion fails.

use meshsplat::config::TrainConfig;
use meshsplat::dataset::Dataset;
use meshsplat::gaussian::{activate_params, bind_to_global, LocalGaussian};
use meshsplat::gradcheck::{GradScene, ParamClass, DEFAULT_STEP};
use meshsplat::loss::total_loss;
use meshsplat::math::{quat_to_matrix, Quat, RigidTransform, Vec3};
use meshsplat::metrics::evaluate_frames;
use meshsplat::pipeline::{forward, RigState};
use meshsplat::raster::{brute_force_render, project_gaussian, render_forward, RenderOptions, Splat2D};
use meshsplat::rig::{triangle_frame, Camera};
use meshsplat::schedule::Schedule;
use meshsplat::toy::{FineDeformation, ToyRigDims, ToyScene, ToySpec};
use meshsplat::trainer::{inference_settings, train, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::process::Command;
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient suite", gradient_suite),
        ("2 rasterizer oracle", rasterizer_oracle),
        ("3 binding equivariance", binding_equivariance),
        ("4 synthetic recovery", synthetic_recovery),
        ("5 ablation direction", ablation_direction),
        ("6 schedule wiring", schedule_wiring),
        ("7 loss constants", loss_constants),
        ("8 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut scene = GradScene::tiny(1, 8, 8, 1).map_err(|e| e.to_string())?;
    let reports = scene
        .check(&ParamClass::ALL, DEFAULT_STEP, 1e-4)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.class.name()).collect();
    check(
        reports.len() == 8 && failing.is_empty() && secs < 60.0,
        format!("8 classes, worst rel err {worst:.2e}, failing {failing:?}, {secs:.1}s < 60s"),
    )
}

/// Random 3D Gaussians in front of a 64×64 camera, projected to splats.
fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<Splat2D>, Camera) {
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 80.0, 64, 64);
    let n = rng.gen_range(1..=200);
    let mut splats = Vec::with_capacity(n);
    for id in 0..n {
        let g = LocalGaussian {
            mu0: Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.0..1.0)),
            r0_raw: Quat::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0),
            s0_raw: Vec3::from_fn(|_, _| rng.gen_range(-4.0..-1.5)),
            o_raw: rng.gen_range(-3.0..4.0),
            sh: vec![[0.0; 3]],
            parent_tri: 0,
        };
        let a = activate_params(&g).unwrap();
        let global = meshsplat::gaussian::GlobalGaussian {
            mu: a.mu0,
            r: a.r0,
            s: a.s0,
            opacity: a.opacity,
        };
        let color = [rng.gen(), rng.gen(), rng.gen()];
        if let Some(s) = project_gaussian(&global, color, &cam, id) {
            splats.push(s);
        }
    }
    (splats, cam)
}

fn rasterizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bg = [0.2, 0.4, 0.6];
    let mut worst_exact = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let (splats, cam) = random_scene(&mut rng);
        let oracle = brute_force_render(&splats, &cam, bg, None);
        let exact = RenderOptions {
            cutoff: None,
            saturation: None,
        };
        let (tiled, _) = render_forward(&splats, &cam, bg, &exact);
        worst_exact = worst_exact.max(max_diff(&tiled.data, &oracle.data));
        let cut = RenderOptions {
            cutoff: Some(3.0),
            saturation: None,
        };
        let (tiled, _) = render_forward(&splats, &cam, bg, &cut);
        let bound = (-4.5f64).exp() * splats.iter().map(|s| s.opacity).sum::<f64>();
        worst_ratio = worst_ratio.max(max_diff(&tiled.data, &oracle.data) / bound);
    }
    check(
        worst_exact <= 1e-6 && worst_ratio <= 1.0,
        format!("100 scenes, no cutoff max diff {worst_exact:.2e} <= 1e-6, 3-sigma cutoff uses {worst_ratio:.3} of exp(-4.5)*sum(o)"),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn binding_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let tri: [Vec3; 3] = std::array::from_fn(|_| Vec3::from_fn(|_, _| rng.gen_range(-2.0..2.0)));
        let Some(frame) = triangle_frame(&tri[0], &tri[1], &tri[2]) else {
            continue;
        };
        let q = RigidTransform::from_axis_angle(
            Vec3::from_fn(|_, _| rng.gen_range(-3.0..3.0)),
            Vec3::from_fn(|_, _| rng.gen_range(-5.0..5.0)),
        );
        let moved = tri.map(|v| q.apply(&v));
        let Some(moved_frame) = triangle_frame(&moved[0], &moved[1], &moved[2]) else {
            return Err("rigid motion made a triangle degenerate".into());
        };
        worst = worst
            .max((moved_frame.rotation - q.rotation * frame.rotation).abs().max())
            .max((moved_frame.origin - q.apply(&frame.origin)).abs().max())
            .max((moved_frame.scale - frame.scale).abs());
        let g = LocalGaussian {
            mu0: Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
            r0_raw: Quat::new(1.0, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            s0_raw: Vec3::from_fn(|_, _| rng.gen_range(-3.0..0.0)),
            o_raw: 0.0,
            sh: vec![[0.0; 3]],
            parent_tri: 0,
        };
        let a = activate_params(&g).unwrap();
        let before = bind_to_global(&a, &frame);
        let after = bind_to_global(&a, &moved_frame);
        let rot_expected = q.rotation * quat_to_matrix(&before.r);
        worst = worst
            .max((after.mu - q.apply(&before.mu)).abs().max())
            .max((quat_to_matrix(&after.r) - rot_expected).abs().max())
            .max((after.s - before.s).abs().max());
        checked += 1;
    }
    check(
        worst <= 1e-9,
        format!("{checked} triangles, max deviation {worst:.2e} <= 1e-9"),
    )
}

/// Desk-scale schedule: adjuster from `T/2`, densification over
/// `[T/10, 3T/20]`, tri-plane 16/32/64 with a 16-dimensional latent.
fn recovery_config(iters: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.threads = 1;
    let s = &mut c.schedule;
    s.total_iters = iters;
    s.adjuster_start = iters / 2;
    s.densify_start = iters / 10;
    s.densify_end = iters * 3 / 20;
    s.lr_decay_end = iters;
    c.adjuster.resolutions = [16, 32, 64];
    c.adjuster.latent_dim = 16;
    c.adjuster.hidden_width = 32;
    c
}

fn synthetic_recovery() -> Outcome {
    let start = Instant::now();
    let scene = ToyScene::generate(ToySpec::default()).map_err(|e| e.to_string())?;
    let faces = scene.rig.faces.len();
    let train_set = scene.train_dataset().map_err(|e| e.to_string())?;
    let held = scene.heldout_dataset().map_err(|e| e.to_string())?;
    let out = train(recovery_config(5000), &train_set, None).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let ck = &out.checkpoint;
    let settings = inference_settings(ck);
    let mut rig = RigState::new(ck.rig.clone()).map_err(|e| e.to_string())?;
    let on_train = evaluate_frames(&ck.model, &mut rig, &train_set.frames, &settings).map_err(|e| e.to_string())?;
    let on_held = evaluate_frames(&ck.model, &mut rig, &held.frames, &settings).map_err(|e| e.to_string())?;
    let (pt, ph) = (on_train.mean_psnr(), on_held.mean_psnr());
    check(
        pt >= 35.0 && ph >= 30.0 && minutes < 20.0,
        format!(
            "{faces} triangles, {} frames, train {pt:.2} dB >= 35, held-out {ph:.2} dB >= 30, {minutes:.1} min < 20",
            train_set.frames.len()
        ),
    )
}

/// Mean total loss of a trained model over every frame of its dataset.
fn dataset_loss(config: TrainConfig, data: &Dataset) -> Result<f64, String> {
    let out = train(config, data, None).map_err(|e| e.to_string())?;
    let ck = &out.checkpoint;
    let settings = inference_settings(ck);
    let mut rig = RigState::new(ck.rig.clone()).map_err(|e| e.to_string())?;
    let neutral = rig.neutral_frames().to_vec();
    let mut sum = 0.0;
    for f in &data.frames {
        let frames = rig.frames(&f.params, &settings).map_err(|e| e.to_string())?;
        let pass = forward(&ck.model, frames, &neutral, &f.params, &f.camera, &settings).map_err(|e| e.to_string())?;
        let (loss, _) = total_loss(&pass.image, &f.image, &ck.model.gaussians, &ck.config.loss, None).map_err(|e| e.to_string())?;
        sum += loss.total;
    }
    Ok(sum / data.frames.len() as f64)
}

fn ablation_direction() -> Outcome {
    let scene = ToyScene::generate(ToySpec {
        resolution: 32,
        cameras: 10,
        fine: Some(FineDeformation::bulge(0.08)),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let data = scene.train_dataset().map_err(|e| e.to_string())?;
    let full = dataset_loss(recovery_config(2000), &data)?;
    let mut c = recovery_config(2000);
    c.ablation.no_triplane = true;
    let no_triplane = dataset_loss(c, &data)?;
    let mut c = recovery_config(2000);
    c.ablation.no_adjuster = true;
    let no_adjuster = dataset_loss(c, &data)?;
    let (gap_tp, gap_adj) = (no_triplane - full, no_adjuster - full);
    check(
        full < no_triplane && full < no_adjuster && gap_adj > 3.0 * gap_tp,
        format!("loss full {full:.6}, no_triplane {no_triplane:.6}, no_adjuster {no_adjuster:.6}, gap ratio {:.2} > 3", gap_adj / gap_tp),
    )
}

fn schedule_wiring() -> Outcome {
    let s = Schedule::default();
    let mut problems = Vec::new();
    if s.position_lr(0) != 5e-3 {
        problems.push(format!("lr(0) = {:e}", s.position_lr(0)));
    }
    if s.position_lr(60_000) != 5e-5 {
        problems.push(format!("lr(60000) = {:e}", s.position_lr(60_000)));
    }
    let densify: Vec<usize> = (0..=120_000).filter(|&t| s.is_densify_iter(t)).collect();
    let expected: Vec<usize> = (500..=60_000).step_by(100).collect();
    if densify != expected {
        problems.push(format!("{} densification events", densify.len()));
    }
    let resets: Vec<usize> = (0..=120_000).filter(|&t| s.is_opacity_reset_iter(t)).collect();
    let expected: Vec<usize> = (3_000..=60_000).step_by(3_000).collect();
    if resets != expected {
        problems.push(format!("opacity resets at {resets:?}"));
    }
    if (0..5_000).any(|t| s.adjuster_active(t)) || !s.adjuster_active(5_000) {
        problems.push("adjuster activation is not at 5000".into());
    }
    match adjuster_frozen_until_start() {
        Ok(()) => {}
        Err(e) => problems.push(e),
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "lr 5e-3 -> 5e-5, densify 500..=60000 step 100, resets every 3000, adjuster first updated at 5000".into()
        } else {
            problems.join("; ")
        },
    )
}

/// Runs the default schedule on a tiny scene and checks that no adjuster
/// parameter moves during the first 5000 iterations, and that they move on
/// the iteration after.
fn adjuster_frozen_until_start() -> Result<(), String> {
    let scene = ToyScene::generate(ToySpec {
        dims: ToyRigDims {
            vertex_budget: 40,
            ..Default::default()
        },
        gt_gaussians: 8,
        cameras: 2,
        resolution: 12,
        train_params: 2,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let data = scene.train_dataset().map_err(|e| e.to_string())?;
    let mut config = TrainConfig::default();
    config.adjuster.resolutions = [4, 8, 16];
    config.density.max_gaussians = 400;
    let mut trainer = Trainer::new(config, &data).map_err(|e| e.to_string())?;
    let initial = trainer.model().adjuster.clone();
    while trainer.iteration() < 5_000 {
        trainer.step().map_err(|e| e.to_string())?;
    }
    if trainer.model().adjuster != initial {
        return Err("adjuster changed before iteration 5000".into());
    }
    trainer.step().map_err(|e| e.to_string())?;
    if trainer.model().adjuster == initial {
        return Err("adjuster did not change at iteration 5000".into());
    }
    Ok(())
}

fn loss_constants() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_meshsplat"))
        .arg("--print-config")
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let loss = table.get("loss").and_then(|v| v.as_table()).ok_or("no [loss] table")?;
    let expected = [
        ("lambda_dssim", 0.2),
        ("lambda_perceptual", 0.02),
        ("lambda_position", 0.01),
        ("lambda_scaling", 1.0),
        ("eps_position", 1.0),
        ("eps_scaling", 0.6),
    ];
    let mut wrong = Vec::new();
    for (key, want) in expected {
        let got = loss.get(key).and_then(|v| v.as_float());
        if got != Some(want) {
            wrong.push(format!("{key} = {got:?}, want {want}"));
        }
    }
    check(
        wrong.is_empty(),
        if wrong.is_empty() {
            "λ1 0.2, λ2 0.02, λ3 0.01, λ4 1, ε_position 1, ε_scaling 0.6".into()
        } else {
            wrong.join("; ")
        },
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scene = ToyScene::generate(ToySpec {
        dims: ToyRigDims {
            vertex_budget: 80,
            ..Default::default()
        },
        gt_gaussians: 16,
        cameras: 4,
        resolution: 24,
        train_params: 3,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    scene.train_dataset().and_then(|d| d.save(&data)).map_err(|e| e.to_string())?;
    let mut config = recovery_config(300);
    config.threads = 2;
    config.seed = 11;
    let config_path = dir.path().join("config.toml");
    std::fs::write(&config_path, config.to_toml_string()).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_meshsplat"))
            .env("RUST_LOG", "warn")
            .args(["train", "--config"])
            .arg(&config_path)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("train run {run} failed"));
        }
        let ckpt = std::fs::read(out.join("final.ckpt")).map_err(|e| e.to_string())?;
        let log = std::fs::read(out.join("loss.csv")).map_err(|e| e.to_string())?;
        files.push((ckpt, log));
    }
    let (a, b) = (&files[0], &files[1]);
    check(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "checkpoints {} bytes identical: {}, loss logs identical: {}",
            a.0.len(),
            a.0 == b.0,
            a.1 == b.1
        ),
    )
}
