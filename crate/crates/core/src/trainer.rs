//! Training orchestration: mesh initialization, the Gaussian-only warm-up,
//! joint refinement with the morph adjuster, densification and logging.

use crate::adjuster::{EncodingMode, MorphAdjuster};
use crate::checkpoint::Checkpoint;
use crate::config::{InitConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::density::{densify_and_prune, reset_opacity, DensifyStats};
use crate::error::{Error, Result};
use crate::gaussian::{rgb_to_sh_dc, sh_coeff_count, LocalGaussian};
use crate::loss::{LossBreakdown, PerceptualLoss};
use crate::math::{logit, quat_identity, Vec3};
use crate::objective::evaluate_frame;
use crate::optim::OptimState;
use crate::pipeline::{Model, PassSettings, RigState};
use crate::raster::RenderOptions;
use crate::rig::TriangleFrame;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const LOSS_LOG_HEADER: &str = "iter,l1,dssim,l_position,l_scaling,total,lr";

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, l.l1, l.dssim, l.position, l.scaling, l.total, self.lr
        )
    }
}

/// Seeds `per_triangle` Gaussians at uniform random points of every neutral
/// triangle, expressed in that triangle's frame.
pub fn init_gaussians<R: Rng>(
    rig: &RigState,
    init: &InitConfig,
    sh_degree: usize,
    rng: &mut R,
) -> Vec<LocalGaussian> {
    let verts = &rig.rig().template_vertices;
    let mut out = Vec::with_capacity(rig.rig().faces.len() * init.gaussians_per_triangle);
    let mut sh = vec![[0.0; 3]; sh_coeff_count(sh_degree)];
    sh[0] = rgb_to_sh_dc(init.color);
    for (t, (face, frame)) in rig.rig().faces.iter().zip(rig.neutral_frames()).enumerate() {
        for _ in 0..init.gaussians_per_triangle {
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            let p = verts[face[0]] * (1.0 - u - v) + verts[face[1]] * u + verts[face[2]] * v;
            out.push(LocalGaussian {
                mu0: frame.rotation.transpose() * (p - frame.origin) / frame.scale,
                r0_raw: quat_identity(),
                s0_raw: Vec3::from_element(init.scale.ln()),
                o_raw: logit(init.opacity),
                sh: sh.clone(),
                parent_tri: t,
            });
        }
    }
    out
}

/// Sequential training loop over one dataset. Rendering and gradients run
/// on the rayon pool the caller installs.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    rig: RigState,
    neutral: Vec<TriangleFrame>,
    frame_scales: Vec<f64>,
    extent: f64,
    model: Model,
    optim: OptimState,
    stats: DensifyStats,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    iteration: usize,
    perceptual: Option<Box<dyn PerceptualLoss>>,
    dump_dir: PathBuf,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        if dataset.frames.is_empty() {
            return Err(Error::Dataset("no frames to train on".into()));
        }
        let rig = RigState::new(dataset.rig.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gaussians = init_gaussians(&rig, &config.init, config.sh_degree, &mut rng);
        let (lo, hi) = rig.neutral_bounds();
        let mode = if config.ablation.no_triplane {
            EncodingMode::Fourier
        } else {
            EncodingMode::Triplane
        };
        let driving = dataset.rig.expression_dim() + 3 * dataset.rig.joint_count();
        let adjuster = MorphAdjuster::new(&config.adjuster, mode, lo, hi, driving, &mut rng);
        let model = Model { gaussians, adjuster };
        let optim = OptimState::new(&model);
        let neutral = rig.neutral_frames().to_vec();
        Ok(Self {
            stats: DensifyStats::new(model.gaussians.len()),
            frame_scales: neutral.iter().map(|f| f.scale).collect(),
            extent: 0.5 * (hi - lo).norm(),
            neutral,
            rig,
            model,
            optim,
            rng,
            order: Vec::new(),
            iteration: 0,
            perceptual: None,
            dump_dir: std::env::temp_dir(),
            config,
            dataset,
        })
    }

    /// Installs a perceptual loss, applied once the adjuster is active.
    pub fn with_perceptual(mut self, p: Box<dyn PerceptualLoss>) -> Self {
        self.perceptual = Some(p);
        self
    }

    /// Where a snapshot goes if the loss becomes non-finite.
    pub fn with_dump_dir(mut self, dir: PathBuf) -> Self {
        self.dump_dir = dir;
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adjuster_active(&self, t: usize) -> bool {
        self.config.adjuster_start().is_some_and(|s| t >= s)
    }

    pub fn settings(&self, t: usize) -> PassSettings {
        let active = self.adjuster_active(t);
        PassSettings {
            use_adjuster: active,
            use_lbs: !self.config.ablation.no_lbs,
            zero_expression: self.config.ablation.strict_zero_expression && !active,
            render: RenderOptions::default(),
            background: self.dataset.background,
        }
    }

    fn next_frame(&mut self) -> usize {
        let n = self.dataset.frames.len();
        if self.iteration % n == 0 || self.order.len() != n {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
        }
        self.order[self.iteration % n]
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            config: self.config.clone(),
            rig: self.dataset.rig.clone(),
            background: self.dataset.background,
            model: self.model.clone(),
            optim: self.optim.clone(),
        }
    }

    /// Runs one iteration and returns its log row.
    pub fn step(&mut self) -> Result<LogRow> {
        let t = self.iteration;
        let settings = self.settings(t);
        let frame = &self.dataset.frames[self.next_frame()];
        let tri = self.rig.frames(&frame.params, &settings)?;
        let perceptual = if settings.use_adjuster { self.perceptual.as_deref() } else { None };
        let eval = evaluate_frame(
            &self.model,
            tri,
            &self.neutral,
            &frame.params,
            &frame.camera,
            &frame.image,
            &self.config.loss,
            &settings,
            perceptual,
        )?;
        if !eval.loss.total.is_finite() {
            let dump = self.dump_dir.join(format!("nonfinite-{t:06}.ckpt"));
            self.checkpoint().save(&dump)?;
            return Err(Error::NonFiniteLoss {
                iteration: t,
                dump: dump.display().to_string(),
            });
        }

        let schedule = self.config.schedule;
        let rates = schedule.rates(t);
        if t <= schedule.densify_end {
            self.stats.accumulate(&eval.grad.mean2d, frame.camera.width, frame.camera.height)?;
        }
        self.optim.step_gaussians(&mut self.model.gaussians, &eval.grad, &rates)?;
        if settings.use_adjuster {
            let adj = &mut self.model.adjuster;
            if adj.mode == EncodingMode::Triplane {
                self.optim.triplane.update(&mut adj.triplane.params, &eval.grad.triplane, rates.triplane)?;
            }
            self.optim.basis_net.update(&mut adj.basis_net.params, &eval.grad.basis_net, rates.mlp)?;
            self.optim.latent_net.update(&mut adj.latent_net.params, &eval.grad.latent_net, rates.mlp)?;
        }

        if schedule.is_densify_iter(t) {
            let report = densify_and_prune(
                &mut self.model.gaussians,
                &mut self.stats,
                &self.config.density,
                &self.frame_scales,
                self.extent,
                &mut self.rng,
            )?;
            self.optim.remap_gaussians(&report.origin);
            log::debug!(
                "iter {t}: cloned {}, split {}, pruned {}, {} Gaussians",
                report.cloned,
                report.split,
                report.pruned,
                self.model.gaussians.len()
            );
        }
        if schedule.is_opacity_reset_iter(t) {
            reset_opacity(&mut self.model.gaussians, self.config.density.opacity_reset_ceiling);
            self.optim.opacity.reset_moments();
        }

        self.iteration += 1;
        Ok(LogRow {
            iter: t,
            loss: eval.loss,
            lr: rates.position,
        })
    }
}

/// Result of a complete run.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<LogRow>,
}

/// Builds the worker pool described by `threads` (0: every core).
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Trains for `config.schedule.total_iters` iterations. With `out`, the loss
/// log goes to `out/loss.csv` row by row, periodic checkpoints to
/// `out/ckpt-NNNNNN.ckpt` and the final state to `out/final.ckpt`.
pub fn train(config: TrainConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutput> {
    let pool = thread_pool(config.threads)?;
    pool.install(|| {
        let mut trainer = Trainer::new(config, dataset)?;
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                trainer = trainer.with_dump_dir(dir.to_path_buf());
                let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("loss.csv"))?);
                writeln!(f, "{LOSS_LOG_HEADER}")?;
                Some(f)
            }
            None => None,
        };
        let total = trainer.config().schedule.total_iters;
        let every = trainer.config().checkpoint_every;
        let mut history = Vec::with_capacity(total);
        for _ in 0..total {
            let row = trainer.step()?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", row.csv())?;
            }
            if row.iter % 100 == 0 {
                log::info!("iter {} loss {:.6} gaussians {}", row.iter, row.loss.total, trainer.model().gaussians.len());
            }
            history.push(row);
            if let (Some(dir), true) = (out, every > 0 && trainer.iteration() % every == 0) {
                trainer.checkpoint().save(&dir.join(format!("ckpt-{:06}.ckpt", trainer.iteration())))?;
            }
        }
        if let Some(mut f) = log {
            f.flush()?;
        }
        let checkpoint = trainer.checkpoint();
        if let Some(dir) = out {
            checkpoint.save(&dir.join("final.ckpt"))?;
        }
        Ok(TrainOutput { checkpoint, history })
    })
}

/// Renders the loss history in the log format, header included.
pub fn history_csv(history: &[LogRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{LOSS_LOG_HEADER}").unwrap();
    for row in history {
        writeln!(s, "{}", row.csv()).unwrap();
    }
    s
}

/// Settings for rendering a checkpoint: the adjuster is used once training
/// has reached its start.
pub fn inference_settings(ck: &Checkpoint) -> PassSettings {
    PassSettings {
        use_adjuster: ck.config.adjuster_start().is_some_and(|s| ck.iteration as usize > s),
        use_lbs: !ck.config.ablation.no_lbs,
        zero_expression: false,
        render: RenderOptions::default(),
        background: ck.background,
    }
}
