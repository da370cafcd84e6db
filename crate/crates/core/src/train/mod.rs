//! Staged optimization of an [`AvatarModel`] against blurred frames.
//!
//! Every iteration picks one frame and runs one of three stages:
//!
//! * [`Stage::Sharp`]: a single render at the input pose.
//! * [`Stage::Blur`]: the mean of `n` renders along the frame's exposure
//!   trajectory is compared to the blurred image.
//! * [`Stage::Fusion`]: a per-pixel mask blends the middle-of-exposure
//!   render with that mean before the comparison.
//!
//! All gradients are analytic. Trajectory gradients can alternatively be
//! taken by central differences.

pub mod loss;
pub mod metrics;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::articulation::{prior_skin_weights, Pose, PoseGrad};
use crate::blur::{
    blend, blur_path_counters, fusion_backward, fusion_forward, sample_virtual_poses, synthesize_blur,
    trajectory_gradients, virtual_time, ExposureTrajectory, Interpolation, DEFAULT_VIRTUAL_POSES, LATENT_DIM,
};
use crate::error::{check_len, Error, Result};
use crate::geom::{build_covariance, build_covariance_backward, normalize_backward, Mat3, Vec3};
use crate::imagebuf::ImageBuffer;
use crate::model::{param_groups_mut, AvatarModel, DeformUpstream, Deformed, ModelGrads};
use crate::render::{render_backward, Camera, RenderTape};
use crate::synthdata::SharpRenderer;
use crate::scene::{densify_and_prune, knn_edges, DensifyConfig, DensifyStats};
use crate::tinynet::Adam;

pub use loss::{
    loss_isometric, loss_mask, loss_rgb, loss_skin, skin_weight_schedule, total_loss, IsometricInputs, LossParts,
    LossWeights,
};
pub use metrics::{psnr, ssim, PSNR_CAP};

/// Per-group learning rates. Position rates are multiplied by the scene
/// diameter and decay exponentially from `position_init` to
/// `position_final`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub feature: f64,
    pub network: f64,
    pub embedding: f64,
    pub trajectory: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            feature: 2.5e-3,
            network: 1e-3,
            embedding: 1e-3,
            trajectory: 1e-4,
        }
    }
}

/// How trajectory knots receive their gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryGradient {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// First iteration of the blur stage.
    pub trajectory_start: usize,
    /// First iteration of the fusion stage.
    pub fusion_start: usize,
    pub virtual_poses: usize,
    pub interpolation: Interpolation,
    /// Off: every iteration is a sharp render at the input pose.
    pub motion_model: bool,
    pub fusion: bool,
    pub lambda_mask: f64,
    pub lambda_skin_start: f64,
    pub lambda_skin_end: f64,
    pub lambda_isopos: f64,
    pub lambda_isocov: f64,
    /// Neighbours per Gaussian in the isometric edge graph.
    pub isometric_k: usize,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub trajectory_gradient: TrajectoryGradient,
    pub finite_difference_step: f64,
    /// Initial half-width of each exposure trajectory, in frame intervals
    /// of the input pose sequence.
    pub trajectory_init_spread: f64,
    /// Steps fitting the skinning net to the distance prior before training.
    pub skin_warmup_steps: usize,
    pub skin_warmup_lr: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15000,
            trajectory_start: 3000,
            fusion_start: 7000,
            virtual_poses: DEFAULT_VIRTUAL_POSES,
            interpolation: Interpolation::Slerp,
            motion_model: true,
            fusion: true,
            lambda_mask: 0.1,
            lambda_skin_start: 10.0,
            lambda_skin_end: 0.1,
            lambda_isopos: 1.0,
            lambda_isocov: 100.0,
            isometric_k: 5,
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
            trajectory_gradient: TrajectoryGradient::Analytic,
            finite_difference_step: 1e-4,
            trajectory_init_spread: 0.5,
            skin_warmup_steps: 200,
            skin_warmup_lr: 1e-2,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the stage starts and densification window scaled to a
    /// run of `iterations`.
    pub fn scaled(iterations: usize) -> Self {
        Self::default().rescaled(iterations)
    }

    /// The same schedule stretched or shrunk to `iterations` steps.
    pub fn rescaled(&self, iterations: usize) -> Self {
        let ratio = iterations as f64 / self.iterations.max(1) as f64;
        let scale = |v: usize| ((v as f64 * ratio).round() as usize).max(1);
        Self {
            iterations,
            trajectory_start: scale(self.trajectory_start),
            fusion_start: scale(self.fusion_start),
            densify: DensifyConfig {
                interval: scale(self.densify.interval),
                start: scale(self.densify.start),
                stop: scale(self.densify.stop),
                ..self.densify
            },
            checkpoint_every: scale(self.checkpoint_every),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if !(0 < self.trajectory_start && self.trajectory_start < self.iterations) {
            return Err(Error::invalid("trajectory stage must start inside the run"));
        }
        if !(0 < self.fusion_start && self.fusion_start < self.iterations) {
            return Err(Error::invalid("fusion stage must start inside the run"));
        }
        if self.virtual_poses == 0 {
            return Err(Error::invalid("number of virtual poses must be at least 1"));
        }
        let lambdas = [
            self.lambda_mask,
            self.lambda_skin_start,
            self.lambda_skin_end,
            self.lambda_isopos,
            self.lambda_isocov,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.trajectory_gradient == TrajectoryGradient::FiniteDifference && !(self.finite_difference_step > 0.0) {
            return Err(Error::invalid("finite-difference step must be positive"));
        }
        Ok(())
    }

    /// Stage run at `iteration`.
    pub fn stage(&self, iteration: usize) -> Stage {
        if !self.motion_model || self.virtual_poses == 1 || iteration < self.trajectory_start {
            Stage::Sharp
        } else if self.fusion && iteration >= self.fusion_start {
            Stage::Fusion
        } else {
            Stage::Blur
        }
    }

    pub fn loss_weights(&self, iteration: usize) -> LossWeights {
        LossWeights {
            mask: self.lambda_mask,
            skin: skin_weight_schedule(iteration, self.iterations, self.lambda_skin_start, self.lambda_skin_end),
            isopos: self.lambda_isopos,
            isocov: self.lambda_isocov,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sharp,
    Blur,
    Fusion,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Sharp => "sharp",
            Stage::Blur => "blur",
            Stage::Fusion => "fusion",
        })
    }
}

/// One blurred training observation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainFrame {
    pub image: ImageBuffer,
    /// Binary foreground mask, one value per pixel.
    pub mask: Vec<f64>,
    pub camera: Camera,
    pub pose: Pose,
}

impl TrainFrame {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        check_len("frame width", self.camera.width, self.image.width())?;
        check_len("frame height", self.camera.height, self.image.height())?;
        check_len("frame mask", self.image.num_pixels(), self.mask.len())?;
        if self.mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(Error::invalid("frame mask must be binary"));
        }
        Ok(())
    }
}

/// Everything one loss evaluation needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub frame: &'a TrainFrame,
    pub frame_index: usize,
    pub trajectory: &'a ExposureTrajectory,
    pub stage: Stage,
    pub virtual_poses: usize,
    /// Prior skinning weights, `K` per Gaussian.
    pub skin_prior: &'a [f64],
    pub edges: &'a [(usize, usize)],
    pub weights: LossWeights,
}

#[derive(Debug, Clone)]
pub struct StepGrads {
    pub model: ModelGrads,
    /// One gradient per trajectory knot; zero in the sharp stage.
    pub knots: Vec<PoseGrad>,
    /// Screen-space mean gradients of the reference render, in pixels,
    /// for the Gaussians it drew.
    pub visible: Vec<(usize, [f64; 2], Vec3)>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub parts: LossParts,
    pub total: f64,
    /// The image compared against the frame.
    pub output: ImageBuffer,
    pub grads: Option<StepGrads>,
}

struct Rendered {
    image: ImageBuffer,
    deformed: Deformed,
    tape: RenderTape,
    time: f64,
}

/// Loss of one frame and, when `want_grads`, its gradient w.r.t. every
/// model parameter and trajectory knot.
pub fn step(model: &AvatarModel, inp: &StepInputs<'_>, want_grads: bool) -> Result<StepResult> {
    let frame = inp.frame;
    let cam = &frame.camera;
    let n_joints = model.chain.num_joints();
    let (poses, times): (Vec<Pose>, Vec<f64>) = match inp.stage {
        Stage::Sharp => (vec![frame.pose.clone()], vec![0.0]),
        _ => {
            let n = inp.virtual_poses;
            let poses = sample_virtual_poses(inp.trajectory, n)?;
            (poses, (0..n).map(|l| virtual_time(l, n)).collect())
        }
    };
    let n = poses.len();
    let mut renders = Vec::with_capacity(n + 1);
    for (pose, time) in poses.iter().zip(&times) {
        let (image, deformed, tape) = model.render_pose(pose, cam)?;
        renders.push(Rendered {
            image,
            deformed,
            tape,
            time: *time,
        });
    }
    let reference = if n % 2 == 1 {
        n / 2
    } else {
        let (image, deformed, tape) = model.render_pose(&inp.trajectory.pose_at(0.5), cam)?;
        renders.push(Rendered {
            image,
            deformed,
            tape,
            time: 0.5,
        });
        n
    };

    let sharp = &renders[reference].image;
    let blurred = match inp.stage {
        Stage::Sharp => sharp.clone(),
        _ => synthesize_blur(&renders[..n].iter().map(|r| r.image.clone()).collect::<Vec<_>>())?,
    };
    let fusion = match inp.stage {
        Stage::Fusion => Some(fusion_forward(
            &model.fusion_net,
            &renders[reference].deformed.latent,
            model.embedding(inp.frame_index),
            sharp,
        )?),
        _ => None,
    };
    let output = match &fusion {
        Some(f) => blend(sharp, &blurred, &f.mask)?,
        None => blurred.clone(),
    };

    let (rgb, d_out) = loss::loss_rgb_grad(&output, &frame.image)?;
    let (mask, d_alpha) = loss::loss_mask_grad(sharp.alpha(), &frame.mask)?;
    let refd = &renders[reference].deformed;
    let (skin, d_skin) = loss::loss_skin_grad(&refd.weights, inp.skin_prior)?;
    let cloud = &model.cloud;
    let canonical_positions = cloud.positions_vec();
    let canonical_covariances: Vec<Mat3> = (0..cloud.len())
        .map(|i| build_covariance(&cloud.log_scale(i), cloud.rotation(i).normalize()))
        .collect();
    let iso = loss_isometric(
        &IsometricInputs {
            canonical_positions: &canonical_positions,
            canonical_covariances: &canonical_covariances,
            deformed_positions: &refd.positions,
            deformed_covariances: &refd.covariances,
        },
        inp.edges,
        inp.weights.isopos,
        inp.weights.isocov,
    )?;
    let parts = LossParts {
        rgb,
        mask,
        skin,
        isopos: iso.isopos,
        isocov: iso.isocov,
    };
    let total = total_loss(&parts, &inp.weights);
    if !want_grads {
        return Ok(StepResult {
            parts,
            total,
            output,
            grads: None,
        });
    }

    let npix = sharp.num_pixels();
    let mut grads = ModelGrads::zeros(model);
    let mut d_rgb = vec![vec![0.0; 3 * npix]; renders.len()];
    let mut d_alpha_r = vec![vec![0.0; npix]; renders.len()];
    let mut latent_extra = vec![0.0; LATENT_DIM];
    let d_blur: Vec<f64> = match &fusion {
        Some(f) => {
            let mut d_mask = vec![0.0; npix];
            let mut d_sharp = vec![0.0; 3 * npix];
            let mut d_blur = vec![0.0; 3 * npix];
            for p in 0..npix {
                let m = f.mask[p];
                for c in 0..3 {
                    let i = 3 * p + c;
                    d_mask[p] += d_out[i] * (blurred.rgb()[i] - sharp.rgb()[i]);
                    d_sharp[i] = (1.0 - m) * d_out[i];
                    d_blur[i] = m * d_out[i];
                }
            }
            let fg = fusion_backward(&model.fusion_net, f, LATENT_DIM, LATENT_DIM, &d_mask, &mut grads.fusion_net)?;
            for (a, (b, c)) in d_rgb[reference].iter_mut().zip(d_sharp.iter().zip(&fg.color)) {
                *a += b + c;
            }
            latent_extra = fg.pose_latent;
            let row = &mut grads.embeddings[inp.frame_index * LATENT_DIM..(inp.frame_index + 1) * LATENT_DIM];
            for (a, b) in row.iter_mut().zip(&fg.frame_embedding) {
                *a += b;
            }
            d_blur
        }
        None => d_out,
    };
    let inv_n = 1.0 / n as f64;
    for d in d_rgb.iter_mut().take(n) {
        for (a, b) in d.iter_mut().zip(&d_blur) {
            *a += b * inv_n;
        }
    }
    for (a, b) in d_alpha_r[reference].iter_mut().zip(&d_alpha) {
        *a = inp.weights.mask * b;
    }
    let skin_extra: Vec<f64> = d_skin.iter().map(|v| v * inp.weights.skin).collect();

    let mut knots: Vec<PoseGrad> = inp.trajectory.knots.iter().map(Pose::zeros_like).collect();
    let mut visible = Vec::new();
    for (r, rendered) in renders.iter().enumerate() {
        let mut rg = render_backward(&rendered.tape, &d_rgb[r], &d_alpha_r[r])?;
        let is_ref = r == reference;
        if is_ref {
            for i in 0..cloud.len() {
                rg.positions[i] += iso.d_deformed_positions[i];
                rg.covariances[i] += iso.d_deformed_covariances[i];
            }
            visible = rendered
                .tape
                .splats
                .iter()
                .map(|s| (s.index, rg.mean2d[s.index], rg.positions[s.index]))
                .collect();
        }
        let up = DeformUpstream {
            render: &rg,
            skin_weights: is_ref.then_some(skin_extra.as_slice()),
            latent: is_ref.then_some(latent_extra.as_slice()),
        };
        let pose_grad = model.deform_backward(&rendered.deformed, &up, &mut grads)?;
        if inp.stage != Stage::Sharp {
            inp.trajectory.pose_at_backward(rendered.time, &pose_grad, &mut knots);
        }
    }
    for i in 0..cloud.len() {
        for c in 0..3 {
            grads.positions[3 * i + c] += iso.d_canonical_positions[i][c];
        }
        let q = cloud.rotation(i);
        let (dls, dq) = build_covariance_backward(&cloud.log_scale(i), q.normalize(), &iso.d_canonical_covariances[i]);
        let dq = normalize_backward(q, dq);
        for c in 0..3 {
            grads.log_scales[3 * i + c] += dls[c];
        }
        for (c, v) in dq.to_array().iter().enumerate() {
            grads.rotations[4 * i + c] += v;
        }
    }
    debug_assert_eq!(knots.len(), inp.trajectory.knots.len());
    debug_assert!(knots.iter().all(|k| k.joints.len() == n_joints));
    Ok(StepResult {
        parts,
        total,
        output,
        grads: Some(StepGrads { model: grads, knots, visible }),
    })
}

/// Prior skinning weights of every canonical Gaussian, flattened.
pub fn skin_prior(model: &AvatarModel) -> Vec<f64> {
    (0..model.cloud.len())
        .flat_map(|i| prior_skin_weights(&model.chain, &model.cloud.position(i)).0)
        .collect()
}

/// Trajectory for frame `j` whose knots sample the input pose sequence
/// `spread` frame intervals either side of it.
pub fn initial_trajectory(input_poses: &[Pose], j: usize, spread: f64, interpolation: Interpolation) -> ExposureTrajectory {
    let at = |t: f64| -> Pose {
        let last = (input_poses.len() - 1) as f64;
        let t = t.clamp(0.0, last);
        let i0 = (t.floor() as usize).min(input_poses.len() - 1);
        let i1 = (i0 + 1).min(input_poses.len() - 1);
        ExposureTrajectory::between(&input_poses[i0], &input_poses[i1], Interpolation::Slerp).pose_at(t - i0 as f64)
    };
    let k = interpolation.num_knots();
    let centre = j as f64;
    let knots = (0..k)
        .map(|i| at(centre - spread + 2.0 * spread * i as f64 / (k - 1) as f64))
        .collect();
    ExposureTrajectory { interpolation, knots }
}

/// A trained model with its per-frame trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub config: TrainConfig,
    pub model: AvatarModel,
    pub input_poses: Vec<Pose>,
    pub trajectories: Vec<ExposureTrajectory>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        ckpt.model.validate().map_err(|e| Error::format(path, e.to_string()))?;
        check_len("checkpoint trajectories", ckpt.input_poses.len(), ckpt.trajectories.len())
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(ckpt)
    }

    /// Pose the model associates with the middle of frame `j`'s exposure.
    pub fn frame_pose(&self, j: usize) -> Pose {
        if self.config.motion_model && self.config.virtual_poses > 1 && self.iteration > self.config.trajectory_start {
            self.trajectories[j].pose_at(0.5)
        } else {
            self.input_poses[j].clone()
        }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub frame: usize,
    pub stage: Stage,
    pub rgb: f64,
    pub mask: f64,
    pub skin: f64,
    pub isopos: f64,
    pub isocov: f64,
    pub total: f64,
    pub gaussians: usize,
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const GROUP_WIDTHS: [usize; 5] = [3, 3, 4, 1, 0];

/// Stateful optimizer over a model and its trajectories.
pub struct Trainer<'a> {
    frames: &'a [TrainFrame],
    pub config: TrainConfig,
    pub model: AvatarModel,
    pub trajectories: Vec<ExposureTrajectory>,
    input_poses: Vec<Pose>,
    adam: Vec<Adam>,
    trajectory_adam: Vec<Adam>,
    skin_prior: Vec<f64>,
    edges: Vec<(usize, usize)>,
    stats: DensifyStats,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    extent: f64,
    pub iteration: usize,
    pub log: Vec<LossRecord>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: AvatarModel, frames: &'a [TrainFrame], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if frames.is_empty() {
            return Err(Error::invalid("training needs at least one frame"));
        }
        check_len("frame embeddings", frames.len(), model.num_frames)?;
        for f in frames {
            f.validate()?;
            f.pose.validate(&model.chain)?;
        }
        let input_poses: Vec<Pose> = frames.iter().map(|f| f.pose.normalized()).collect();
        let trajectories: Vec<ExposureTrajectory> = (0..frames.len())
            .map(|j| initial_trajectory(&input_poses, j, config.trajectory_init_spread, config.interpolation))
            .collect();
        let mut model = model;
        let sizes: Vec<usize> = param_groups_mut(&mut model).iter().map(|g| g.len()).collect();
        let adam = sizes.into_iter().map(Adam::new).collect();
        let trajectory_adam = trajectories.iter().map(|t| Adam::new(t.to_flat().len())).collect();
        let extent = model.chain.scene_diameter();
        let mut trainer = Self {
            frames,
            model,
            trajectories,
            input_poses,
            adam,
            trajectory_adam,
            skin_prior: Vec::new(),
            edges: Vec::new(),
            stats: DensifyStats::new(0),
            order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            extent,
            config,
            iteration: 0,
            log: Vec::new(),
        };
        trainer.refresh_cloud_state();
        trainer.warm_up_skinning()?;
        Ok(trainer)
    }

    fn refresh_cloud_state(&mut self) {
        self.skin_prior = skin_prior(&self.model);
        self.edges = knn_edges(&self.model.cloud.positions_vec(), self.config.isometric_k);
        self.stats = DensifyStats::new(self.model.cloud.len());
    }

    /// Fits the skinning net to the prior at the canonical positions.
    fn warm_up_skinning(&mut self) -> Result<()> {
        let steps = self.config.skin_warmup_steps;
        if steps == 0 {
            return Ok(());
        }
        let k = self.model.chain.num_joints();
        let n = self.model.cloud.len();
        let net = &mut self.model.skin_net;
        let mut adam = Adam::new(net.num_params());
        for _ in 0..steps {
            let tape = net.forward_batch(&self.model.cloud.positions, n)?;
            let mut w = tape.output().to_vec();
            for row in w.chunks_exact_mut(k) {
                crate::articulation::softmax_in_place(row);
            }
            let (_, dw) = loss::loss_skin_grad(&w, &self.skin_prior)?;
            let mut dz = vec![0.0; dw.len()];
            for i in 0..n {
                crate::articulation::softmax_backward(&w[k * i..k * (i + 1)], &dw[k * i..k * (i + 1)], &mut dz[k * i..k * (i + 1)]);
            }
            let mut g = vec![0.0; net.num_params()];
            net.backward_batch(&tape, &dz, &mut g)?;
            adam.step(net.params_mut(), &g, self.config.skin_warmup_lr)?;
        }
        Ok(())
    }

    fn next_frame(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.frames.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let j = self.order[self.cursor];
        self.cursor += 1;
        j
    }

    fn learning_rates(&self) -> [f64; 11] {
        let lr = &self.config.lr;
        let t = self.iteration as f64 / self.config.iterations.max(1) as f64;
        let pos = lr.position_init * (lr.position_final / lr.position_init).powf(t) * self.extent;
        let net = lr.network;
        [pos, lr.log_scale, lr.rotation, lr.opacity, lr.feature, net, net, net, net, net, lr.embedding]
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            config: self.config.clone(),
            model: self.model.clone(),
            input_poses: self.input_poses.clone(),
            trajectories: self.trajectories.clone(),
        }
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self) -> Result<LossRecord> {
        let it = self.iteration;
        let j = self.next_frame();
        let stage = self.config.stage(it);
        let inputs = StepInputs {
            frame: &self.frames[j],
            frame_index: j,
            trajectory: &self.trajectories[j],
            stage,
            virtual_poses: self.config.virtual_poses,
            skin_prior: &self.skin_prior,
            edges: &self.edges,
            weights: self.config.loss_weights(it),
        };
        let result = step(&self.model, &inputs, true)?;
        let grads = result.grads.expect("gradients requested");
        if !result.total.is_finite() || !grads.model.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                detail: format!(
                    "frame {j}, stage {stage}, parts {:?}, non-finite gradients in {:?}",
                    result.parts,
                    grads
                        .model
                        .groups()
                        .iter()
                        .filter(|(_, g)| g.iter().any(|v| !v.is_finite()))
                        .map(|(name, _)| *name)
                        .collect::<Vec<_>>()
                ),
            });
        }
        let knot_grads: Vec<f64> = if stage == Stage::Sharp {
            Vec::new()
        } else {
            match self.config.trajectory_gradient {
                TrajectoryGradient::Analytic => grads.knots.iter().flat_map(|g| g.to_flat()).collect(),
                TrajectoryGradient::FiniteDifference => {
                    let model = &self.model;
                    trajectory_gradients(
                        |t| Ok(step(model, &StepInputs { trajectory: t, ..inputs }, false)?.total),
                        &self.trajectories[j],
                        self.config.finite_difference_step,
                    )?
                }
            }
        };

        for (i, ndc, pos) in &grads.visible {
            let (w, h) = (self.frames[j].camera.width as f64, self.frames[j].camera.height as f64);
            self.stats.record(*i, [ndc[0] * 0.5 * w, ndc[1] * 0.5 * h], *pos);
        }
        let lrs = self.learning_rates();
        let groups = grads.model.groups();
        for (((params, (_, g)), adam), lr) in param_groups_mut(&mut self.model)
            .into_iter()
            .zip(groups.iter())
            .zip(&mut self.adam)
            .zip(lrs)
        {
            adam.step(params, g, lr)?;
        }
        self.model.cloud.normalize_rotations();
        if !knot_grads.is_empty() {
            let traj = &mut self.trajectories[j];
            let mut flat = traj.to_flat();
            self.trajectory_adam[j].step(&mut flat, &knot_grads, self.config.lr.trajectory)?;
            *traj = traj.from_flat(&flat)?;
            traj.normalize();
        }

        self.iteration += 1;
        let d = &self.config.densify;
        if d.interval > 0 && self.iteration >= d.start && self.iteration < d.stop && self.iteration % d.interval == 0 {
            self.densify()?;
        }
        let p = result.parts;
        let record = LossRecord {
            iteration: it,
            frame: j,
            stage,
            rgb: p.rgb,
            mask: p.mask,
            skin: p.skin,
            isopos: p.isopos,
            isocov: p.isocov,
            total: result.total,
            gaussians: self.model.cloud.len(),
        };
        self.log.push(record);
        Ok(record)
    }

    fn densify(&mut self) -> Result<()> {
        let out = densify_and_prune(&self.model.cloud, &self.stats, &self.config.densify, self.extent)?;
        log::debug!(
            "densify at {}: split {}, cloned {}, pruned {}, now {}",
            self.iteration,
            out.split,
            out.cloned,
            out.pruned,
            out.cloud.len()
        );
        let f = self.model.cloud.feature_dim();
        self.model.cloud = out.cloud;
        for (g, width) in GROUP_WIDTHS.iter().enumerate() {
            let width = if *width == 0 { f } else { *width };
            self.adam[g].remap_rows(&out.sources, width);
        }
        self.refresh_cloud_state();
        Ok(())
    }

    /// Runs to the configured iteration count. With `out_dir`, writes
    /// periodic checkpoints, the final checkpoint and the loss log there;
    /// a non-finite loss leaves a diagnostic dump next to them.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Checkpoint> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        }
        while self.iteration < self.config.iterations {
            match self.step() {
                Ok(rec) => {
                    if rec.iteration % 100 == 0 {
                        log::info!("iter {} [{}] loss {:.5} ({} gaussians)", rec.iteration, rec.stage, rec.total, rec.gaussians);
                    }
                }
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("diagnostic.json"))?;
                        write_loss_log(&dir.join("loss.csv"), &self.log)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.iteration % every == 0 && self.iteration < self.config.iterations {
                    let path = dir.join("checkpoints").join(format!("ckpt_{:06}.json", self.iteration));
                    self.checkpoint().save(&path)?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join("checkpoint.json"))?;
            write_loss_log(&dir.join("loss.csv"), &self.log)?;
        }
        Ok(ckpt)
    }
}

/// Trains from scratch; see [`Trainer::run`].
pub fn train(model: AvatarModel, frames: &[TrainFrame], config: TrainConfig, out_dir: Option<&Path>) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut t = Trainer::new(model, frames, config)?;
    let ckpt = t.run(out_dir)?;
    Ok((ckpt, t.log))
}

/// Sharp ground truth for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    pub label: String,
    pub camera: Camera,
    pub pose: Pose,
    pub sharp: ImageBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    /// Per-frame rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for f in &self.frames {
            w.serialize(f)?;
        }
        w.serialize(FrameMetrics {
            label: "mean".into(),
            psnr: self.mean_psnr,
            ssim: self.mean_ssim,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Sharp renders scored against ground truth. Never touches the blur or
/// fusion path.
pub fn evaluate<R: SharpRenderer + ?Sized>(renderer: &R, frames: &[EvalFrame]) -> Result<EvalReport> {
    let before = blur_path_counters();
    let mut rows = Vec::with_capacity(frames.len());
    for f in frames {
        let img = renderer.render_sharp(&f.pose, &f.camera)?;
        rows.push(FrameMetrics {
            label: f.label.clone(),
            psnr: psnr(&img, &f.sharp)?,
            ssim: ssim(&img, &f.sharp)?,
        });
    }
    assert_eq!(before, blur_path_counters(), "evaluation must not use the blur path");
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        frames: rows,
    })
}
