use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use motionsplat::articulation::Pose;
use motionsplat::gradcheck::{run_gradcheck, GradcheckConfig};
use motionsplat::model::{AvatarModel, ModelConfig};
use motionsplat::render::{Camera, RenderSettings};
use motionsplat::synthdata::{read_dataset, read_scene, synthesize, write_dataset, write_scene, Dataset, SynthConfig};
use motionsplat::train::{evaluate, Checkpoint, EvalReport, LossRecord, TrajectoryGradient, Trainer};
use serde::Serialize;

use crate::config::{self, usage, RunConfig};
use crate::{EvalArgs, GradcheckArgs, RenderArgs, SweepArgs, SynthArgs, TrainArgs, TrainOptions};

/// Ground-truth cloud stored next to every synthesized dataset.
pub const SCENE_FILE: &str = "scene.json";
pub const SYNTH_CONFIG_FILE: &str = "synth.toml";

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => config::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.frames {
        cfg.frames = v;
    }
    if let Some(v) = a.blur_size {
        cfg.blur_size = v;
    }
    if let Some(v) = a.width {
        cfg.scene.width = v;
    }
    if let Some(v) = a.height {
        cfg.scene.height = v;
    }
    if let Some(v) = a.gaussians {
        cfg.scene.num_gaussians = v;
    }
    if let Some(v) = a.pose_noise {
        cfg.pose_noise = v;
    }
    if cfg.frames == 0 || cfg.blur_size % 2 == 0 || cfg.scene.width == 0 || cfg.scene.height == 0 {
        return Err(usage("need at least one frame, a non-empty image and an odd blur size"));
    }

    let t = Instant::now();
    let (scene, data) = synthesize(&cfg)?;
    write_dataset(&a.out, &data)?;
    write_scene(&a.out.join(SCENE_FILE), &scene)?;
    config::save_toml(&a.out.join(SYNTH_CONFIG_FILE), &cfg)?;
    println!(
        "wrote {} frames ({}x{}, m={}, seed {}) to {} in {:.1?}",
        cfg.frames,
        cfg.scene.width,
        cfg.scene.height,
        cfg.blur_size,
        cfg.seed,
        a.out.display(),
        t.elapsed()
    );
    Ok(())
}

fn resolve_run_config(opts: &TrainOptions) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &opts.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if opts.compact {
        cfg.model = ModelConfig::compact();
    }
    if let Some(v) = opts.gaussians {
        cfg.model.num_gaussians = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = opts.iters {
        *t = t.rescaled(v);
    }
    if let Some(v) = opts.seed {
        t.seed = v;
    }
    if let Some(v) = opts.n {
        t.virtual_poses = v;
    }
    if let Some(v) = opts.interpolation {
        t.interpolation = v;
    }
    if opts.no_motion_model {
        t.motion_model = false;
    }
    if opts.no_fusion {
        t.fusion = false;
    }
    if let Some(v) = opts.max_gaussians {
        t.densify.max_gaussians = v;
    }
    if opts.fd_trajectories {
        t.trajectory_gradient = TrajectoryGradient::FiniteDifference;
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.model.num_gaussians == 0 {
        return Err(usage("the initial cloud needs at least one Gaussian"));
    }
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

struct RunSummary {
    checkpoint: Checkpoint,
    report: EvalReport,
    log: Vec<LossRecord>,
    seconds: f64,
}

/// Trains on `data`, writes the run directory and scores the result.
fn run_training(data: &Dataset, cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config::save_toml(&out.join("config.toml"), cfg)?;

    let t = Instant::now();
    let frames = data.train_frames();
    let model = AvatarModel::new(
        data.manifest.chain.clone(),
        cfg.model.clone(),
        frames.len(),
        RenderSettings::default(),
        cfg.train.seed,
    )?;
    let mut trainer = Trainer::new(model, &frames, cfg.train.clone())?;
    let checkpoint = trainer.run(Some(out))?;
    let seconds = t.elapsed().as_secs_f64();

    let report = evaluate(&checkpoint.model, &data.eval_frames(|f| checkpoint.frame_pose(f)))?;
    report.write_csv(&out.join("metrics.csv"))?;
    Ok(RunSummary {
        checkpoint,
        report,
        log: std::mem::take(&mut trainer.log),
        seconds,
    })
}

fn default_run_dir(data: &Path) -> PathBuf {
    let name = data.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(name)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_run_config(&a.opts)?;
    let data = load_dataset(&a.data)?;
    let out = a.out.unwrap_or_else(|| default_run_dir(&a.data));
    let run = run_training(&data, &cfg, &out)?;
    println!(
        "{} iterations in {:.1}s, {} gaussians; eval psnr {:.3} dB, ssim {:.4}; run in {}",
        run.checkpoint.iteration,
        run.seconds,
        run.checkpoint.model.cloud.len(),
        run.report.mean_psnr,
        run.report.mean_ssim,
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick_camera(spec: &str, data: Option<&Dataset>) -> Result<Camera> {
    let from_data = |what: &str| data.ok_or_else(|| usage(format!("camera {what:?} needs --data")));
    if spec == "train" {
        return Ok(from_data(spec)?.train_camera);
    }
    if let Some(k) = spec.strip_prefix("eval") {
        if let Ok(k) = k.parse::<usize>() {
            let d = from_data(spec)?;
            return d
                .eval_cameras
                .get(k)
                .copied()
                .ok_or_else(|| usage(format!("dataset has {} eval cameras, asked for {k}", d.eval_cameras.len())));
        }
    }
    config::load(Path::new(spec))
}

pub fn render(a: RenderArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = a.data.as_deref().map(load_dataset).transpose()?;
    let camera = pick_camera(&a.camera, data.as_ref())?;
    let pose: Pose = match (a.frame, &a.pose) {
        (Some(j), _) => {
            if j >= ckpt.input_poses.len() {
                return Err(usage(format!("frame {j} out of range, checkpoint has {}", ckpt.input_poses.len())));
            }
            ckpt.frame_pose(j)
        }
        (None, Some(p)) => config::load(p)?,
        (None, None) => unreachable!("clap requires --frame or --pose"),
    };
    pose.validate(&ckpt.model.chain).map_err(|e| usage(format!("pose does not fit the skeleton: {e}")))?;

    let img = ckpt.model.render_sharp(&pose, &camera)?;
    match a.out.extension().and_then(|e| e.to_str()) {
        Some("pfm") => img.write_pfm(&a.out)?,
        Some("png") => img.write_png(&a.out)?,
        _ => return Err(usage("--out must end in .png or .pfm")),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let report = match &a.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.input_poses.len() != data.num_frames() {
                bail!("checkpoint covers {} frames, dataset has {}", ckpt.input_poses.len(), data.num_frames());
            }
            evaluate(&ckpt.model, &data.eval_frames(|f| ckpt.frame_pose(f)))?
        }
        None => {
            let scene = read_scene(&a.data.join(SCENE_FILE))?;
            evaluate(&scene, &data.eval_frames(|f| data.center_poses[f].clone()))?
        }
    };
    report.write_csv(&a.out)?;
    println!("mean psnr {:.3} dB, ssim {:.4} over {} images", report.mean_psnr, report.mean_ssim, report.frames.len());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let cfg = GradcheckConfig {
        scope: a.module,
        seeds: a.seeds,
        first_seed: a.first_seed,
        tolerance: a.tolerance,
        ..GradcheckConfig::default()
    };
    let t = Instant::now();
    let report = run_gradcheck(&cfg)?;
    for g in &report.groups {
        println!("{:<22} compared {:>6}  kinks {:>3}  max rel err {:.3e}", g.name, g.compared, g.kinks, g.max_rel_err);
    }
    println!(
        "max rel err {:.3e} over {} entries, {} seeds, {:.1?}",
        report.max_rel_err(),
        report.compared(),
        report.seeds,
        t.elapsed()
    );
    if !report.passed() {
        bail!("gradient check failed: max rel err {:.3e} exceeds {:.1e}", report.max_rel_err(), cfg.tolerance);
    }
    println!("passed");
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    n: usize,
    iterations: usize,
    gaussians: usize,
    /// Mean total loss over the last tenth of the run.
    tail_loss: f64,
    mean_psnr: f64,
    mean_ssim: f64,
    seconds: f64,
}

fn tail_loss(log: &[LossRecord]) -> f64 {
    let k = (log.len() / 10).max(1).min(log.len());
    if k == 0 {
        return f64::NAN;
    }
    log[log.len() - k..].iter().map(|r| r.total).sum::<f64>() / k as f64
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    if a.opts.n.is_some() {
        return Err(usage("sweep takes its virtual-pose counts from --ns, not --n"));
    }
    if a.ns.is_empty() || a.ns.contains(&0) {
        return Err(usage("--ns needs positive counts"));
    }
    let base = resolve_run_config(&a.opts)?;
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let csv_path = a.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    for &n in &a.ns {
        let mut cfg = base.clone();
        cfg.train.virtual_poses = n;
        cfg.train.validate().map_err(|e| usage(e.to_string()))?;

        let run = run_training(&data, &cfg, &a.out.join(format!("n{n:02}")))?;
        let row = SweepRow {
            n,
            iterations: run.checkpoint.iteration,
            gaussians: run.checkpoint.model.cloud.len(),
            tail_loss: tail_loss(&run.log),
            mean_psnr: run.report.mean_psnr,
            mean_ssim: run.report.mean_ssim,
            seconds: run.seconds,
        };
        println!("n={n:<3} psnr {:.3} dB  ssim {:.4}  loss {:.5}  {:.1}s", row.mean_psnr, row.mean_ssim, row.tail_loss, row.seconds);
        w.serialize(&row)?;
        w.flush()?;
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
