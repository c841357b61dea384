use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use meshsplat::checkpoint::Checkpoint;
use meshsplat::config::TrainConfig;
use meshsplat::dataset::{load_params, Dataset};
use meshsplat::gradcheck::{GradScene, ParamClass, DEFAULT_STEP};
use meshsplat::imageio::save_png;
use meshsplat::metrics::evaluate_frames;
use meshsplat::pipeline::{forward, RigState};
use meshsplat::rig::{Camera, RigParams};
use meshsplat::toy::{FineDeformation, ToyScene, ToySpec};
use meshsplat::trainer::{inference_settings, thread_pool, train};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Mesh-bound deformable Gaussian avatars.
#[derive(Parser)]
#[command(name = "meshsplat", version)]
struct Cli {
    /// Print the default training configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an avatar on a dataset directory.
    Train {
        /// TOML configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a checkpoint for each parameter record in a JSON-lines file.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// One `{psi, theta, head_pose}` object per line.
        #[arg(long)]
        params: PathBuf,
        /// A JSON camera.
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive a checkpoint with the parameter sequence of another dataset.
    Reenact {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding a `params.jsonl` with cameras.
        #[arg(long)]
        driving: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report PSNR and SSIM of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-frame metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a tiny scene.
    Gradcheck {
        /// `all`, `gaussian-core`, `morph-adjuster`, or one parameter class.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write a synthetic dataset with known ground truth.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Add a fine deformation of this amplitude outside the rig's span.
        #[arg(long)]
        fine: Option<f64>,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.print_config {
        print!("{}", TrainConfig::default().to_toml_string());
        return Ok(());
    }
    match cli.command {
        None => bail!("no subcommand given; see --help"),
        Some(Command::Train { config, data, out }) => cmd_train(config.as_deref(), &data, &out),
        Some(Command::Render {
            ckpt,
            params,
            camera,
            out,
        }) => cmd_render(&ckpt, &params, &camera, &out),
        Some(Command::Reenact { ckpt, driving, out }) => cmd_reenact(&ckpt, &driving, &out),
        Some(Command::Eval { ckpt, data, csv }) => cmd_eval(&ckpt, &data, csv.as_deref()),
        Some(Command::Gradcheck {
            module,
            seed,
            tolerance,
        }) => cmd_gradcheck(&module, seed, tolerance),
        Some(Command::Synth {
            seed,
            out,
            fine,
            resolution,
        }) => cmd_synth(seed, &out, fine, resolution),
    }
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let config = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    log::info!("configuration:\n{}", config.to_toml_string());
    let dataset = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    log::info!("{} frames", dataset.frames.len());
    let start = Instant::now();
    let result = train(config, &dataset, Some(out))?;
    let last = result.history.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "trained {} iterations in {:.1}s, final loss {last}, {} Gaussians",
        result.checkpoint.iteration,
        start.elapsed().as_secs_f64(),
        result.checkpoint.model.gaussians.len()
    );
    Ok(())
}

/// Renders every `(params, camera)` pair to `out/NNNNNN.png`.
fn render_all(ck: &Checkpoint, jobs: &[(RigParams, Camera)], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let settings = inference_settings(ck);
    let pool = thread_pool(ck.config.threads)?;
    pool.install(|| -> Result<()> {
        let mut rig = RigState::new(ck.rig.clone())?;
        let neutral = rig.neutral_frames().to_vec();
        for (i, (params, camera)) in jobs.iter().enumerate() {
            let frames = rig.frames(params, &settings)?;
            let pass = forward(&ck.model, frames, &neutral, params, camera, &settings)?;
            save_png(&pass.image, &out.join(format!("{i:06}.png")))?;
        }
        Ok(())
    })?;
    println!("rendered {} frames to {}", jobs.len(), out.display());
    Ok(())
}

fn read_params(path: &Path) -> Result<Vec<RigParams>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), n + 1)))
        .collect()
}

fn cmd_render(ckpt: &Path, params: &Path, camera: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let text = std::fs::read_to_string(camera).with_context(|| format!("reading {}", camera.display()))?;
    let camera: Camera = serde_json::from_str(&text).context("parsing camera")?;
    let jobs: Vec<_> = read_params(params)?.into_iter().map(|p| (p, camera)).collect();
    render_all(&ck, &jobs, out)
}

fn cmd_reenact(ckpt: &Path, driving: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let records = load_params(&driving.join("params.jsonl"))?;
    let jobs: Vec<_> = records.iter().map(|r| (r.params(), r.camera)).collect();
    render_all(&ck, &jobs, out)
}

fn cmd_eval(ckpt: &Path, data: &Path, csv: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dataset = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut settings = inference_settings(&ck);
    settings.background = dataset.background;
    let pool = thread_pool(ck.config.threads)?;
    let report = pool.install(|| {
        let mut rig = RigState::new(dataset.rig.clone())?;
        evaluate_frames(&ck.model, &mut rig, &dataset.frames, &settings)
    })?;
    if let Some(path) = csv {
        let mut text = String::from("frame,psnr,ssim\n");
        for (i, (p, s)) in report.psnr.iter().zip(&report.ssim).enumerate() {
            text.push_str(&format!("{i},{p},{s}\n"));
        }
        std::fs::write(path, text)?;
    }
    println!("frames {}", report.psnr.len());
    println!("psnr {}", report.mean_psnr());
    println!("ssim {}", report.mean_ssim());
    Ok(())
}

fn cmd_gradcheck(module: &str, seed: u64, tolerance: f64) -> Result<()> {
    let Some(classes) = ParamClass::for_module(module) else {
        bail!("unknown module '{module}'");
    };
    let start = Instant::now();
    let mut scene = GradScene::tiny(seed, 8, 8, 1)?;
    let reports = scene.check(&classes, DEFAULT_STEP, tolerance)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    println!("{} in {:.2}s", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    if !ok {
        bail!("gradient check failed");
    }
    Ok(())
}

fn cmd_synth(seed: u64, out: &Path, fine: Option<f64>, resolution: usize) -> Result<()> {
    let scene = ToyScene::generate(ToySpec {
        seed,
        resolution,
        fine: fine.map(FineDeformation::bulge),
        ..Default::default()
    })?;
    let train = scene.train_dataset()?;
    let held = scene.heldout_dataset()?;
    train.save(&out.join("train"))?;
    held.save(&out.join("heldout"))?;
    println!(
        "wrote {} training and {} held-out frames to {}",
        train.frames.len(),
        held.frames.len(),
        out.display()
    );
    Ok(())
}
