//! Synthetic ground truth: a coloured capsule body, smooth random motion
//! sampled at subframe rate, and blurred frames made by averaging the
//! subframe renders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::articulation::{forward_kinematics, prior_skin_weights, KinematicChain, Pose};
use crate::blur::synthesize_blur;
use crate::error::{check_len, Error, Result};
use crate::geom::{Mat3, Quaternion, Vec3};
use crate::imagebuf::{read_mask_png, write_mask_png, ImageBuffer};
use crate::model::AvatarModel;
use crate::render::{render, Camera, RenderSettings, SplatInputs};
use crate::scene::{init_from_chain_surface, logit, GaussianCloud};
use crate::train::{EvalFrame, TrainFrame};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_GT_GAUSSIANS: usize = 1500;
/// Subframes between consecutive output frames.
pub const DEFAULT_STRIDE: usize = 8;
pub const GT_OPACITY: f64 = 0.95;

/// Blur sizes of the small / medium / large protocol.
pub const BLUR_SMALL: usize = 17;
pub const BLUR_MEDIUM: usize = 33;
pub const BLUR_LARGE: usize = 49;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.55, 0.85],
    [0.95, 0.75, 0.15],
    [0.25, 0.75, 0.35],
    [0.7, 0.3, 0.8],
    [0.9, 0.55, 0.4],
    [0.3, 0.8, 0.8],
    [0.6, 0.6, 0.6],
];

/// Anything that can produce a sharp image of a pose.
pub trait SharpRenderer {
    fn render_sharp(&self, pose: &Pose, camera: &Camera) -> Result<ImageBuffer>;
}

impl SharpRenderer for AvatarModel {
    fn render_sharp(&self, pose: &Pose, camera: &Camera) -> Result<ImageBuffer> {
        AvatarModel::render_sharp(self, pose, camera)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_gaussians: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub camera_distance: f64,
    /// Yaw of each held-out camera, in degrees.
    pub eval_yaw_degrees: Vec<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_gaussians: DEFAULT_GT_GAUSSIANS,
            width: 64,
            height: 64,
            focal_factor: 1.25,
            camera_distance: 3.2,
            eval_yaw_degrees: vec![-25.0, 25.0],
        }
    }
}

/// Ground-truth body with a fixed colour per Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub chain: KinematicChain,
    pub cloud: GaussianCloud,
    pub colors: Vec<[f64; 3]>,
    pub train_camera: Camera,
    pub eval_cameras: Vec<Camera>,
}

fn orbit_camera(cfg: &SceneConfig, yaw_degrees: f64) -> Result<Camera> {
    let target = Vec3::new(0.0, 0.45, 0.0);
    let yaw = yaw_degrees.to_radians();
    let eye = target + Vec3::new(yaw.sin(), -0.05 / cfg.camera_distance, yaw.cos()) * cfg.camera_distance;
    Camera::look_at(eye, target, Vec3::y(), cfg.focal_factor * cfg.width as f64, cfg.width, cfg.height)
}

/// Deterministic scene: the default humanoid, Gaussians on its capsule
/// surfaces coloured per bone with stripes along the bone.
pub fn make_scene(seed: u64, cfg: &SceneConfig) -> Result<GroundTruthScene> {
    let chain = KinematicChain::humanoid();
    let mut cloud = init_from_chain_surface(&chain, cfg.num_gaussians, 0, seed)?;
    cloud.opacity_logits.iter_mut().for_each(|o| *o = logit(GT_OPACITY));
    let colors = (0..cloud.len())
        .map(|i| {
            let p = cloud.position(i);
            let bone = (0..chain.num_joints())
                .min_by(|&a, &b| chain.distance_to_bone(a, &p).total_cmp(&chain.distance_to_bone(b, &p)))
                .expect("chain has joints");
            let (a, b) = chain.bone_segment(bone);
            let axis = b - a;
            let t = ((p - a).dot(&axis) / axis.norm_squared()).clamp(0.0, 1.0);
            let stripe = 0.7 + 0.3 * (std::f64::consts::TAU * 3.0 * t).cos();
            PALETTE[bone % PALETTE.len()].map(|c| c * stripe)
        })
        .collect();
    let train_camera = orbit_camera(cfg, 0.0)?;
    let eval_cameras = cfg
        .eval_yaw_degrees
        .iter()
        .map(|y| orbit_camera(cfg, *y))
        .collect::<Result<_>>()?;
    Ok(GroundTruthScene {
        chain,
        cloud,
        colors,
        train_camera,
        eval_cameras,
    })
}

impl GroundTruthScene {
    /// Observation-space positions and covariances under rigid skinning
    /// with the distance prior.
    pub fn posed(&self, pose: &Pose) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
        let transforms = forward_kinematics(&self.chain, pose)?;
        let mut pos = Vec::with_capacity(self.cloud.len());
        let mut cov = Vec::with_capacity(self.cloud.len());
        for i in 0..self.cloud.len() {
            let x = self.cloud.position(i);
            let w = prior_skin_weights(&self.chain, &x);
            let mut m = Mat3::zeros();
            let mut t = Vec3::zeros();
            for (wk, tr) in w.as_slice().iter().zip(&transforms) {
                m += tr.rotation * *wk;
                t += tr.translation * *wk;
            }
            pos.push(m * x + t);
            cov.push(m * self.cloud.covariance(i) * m.transpose());
        }
        Ok((pos, cov))
    }
}

impl SharpRenderer for GroundTruthScene {
    fn render_sharp(&self, pose: &Pose, camera: &Camera) -> Result<ImageBuffer> {
        let (positions, covariances) = self.posed(pose)?;
        let opacities: Vec<f64> = (0..self.cloud.len()).map(|i| self.cloud.opacity(i)).collect();
        let inputs = SplatInputs {
            positions: &positions,
            covariances: &covariances,
            opacities: &opacities,
            colors: &self.colors,
        };
        Ok(render(camera, &inputs, &RenderSettings::default())?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// Peak joint angle of each sinusoid, in radians.
    pub amplitude: f64,
    /// Per-subframe rotation bound for any joint, in radians.
    pub max_subframe_rotation: f64,
    pub stride: usize,
    /// Sinusoid periods are drawn from this range, in subframes.
    pub min_period: f64,
    pub max_period: f64,
    /// Sway of the root translation, in scene units.
    pub root_sway: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.5,
            max_subframe_rotation: 0.02,
            stride: DEFAULT_STRIDE,
            min_period: 90.0,
            max_period: 240.0,
            root_sway: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    amplitude: f64,
    frequency: f64,
    phase: f64,
    axis: [f64; 3],
}

/// Sum of three sinusoids on random axes, as a rotation vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AngleSignal {
    waves: Vec<Wave>,
}

impl AngleSignal {
    fn random(rng: &mut ChaCha8Rng, cfg: &MotionConfig, amplitude: f64) -> Self {
        let mut waves: Vec<Wave> = (0..3)
            .map(|_| {
                let axis = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                )
                .try_normalize(1e-12)
                .unwrap_or_else(Vec3::z);
                Wave {
                    amplitude: amplitude * rng.random_range(0.5..1.0),
                    frequency: 1.0 / rng.random_range(cfg.min_period..=cfg.max_period),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    axis: axis.into(),
                }
            })
            .collect();
        // Keep the speed bound with a margin for the exponential map.
        let speed: f64 = waves
            .iter()
            .map(|w| w.amplitude * std::f64::consts::TAU * w.frequency)
            .sum();
        let limit = 0.9 * cfg.max_subframe_rotation;
        if speed > limit {
            waves.iter_mut().for_each(|w| w.amplitude *= limit / speed);
        }
        Self { waves }
    }

    fn at(&self, t: f64) -> Vec3 {
        self.waves
            .iter()
            .map(|w| Vec3::from(w.axis) * (w.amplitude * (std::f64::consts::TAU * w.frequency * t + w.phase).sin()))
            .sum()
    }
}

/// Dense ground-truth poses: `m` subframes per output frame, centred on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionScript {
    pub blur_size: usize,
    pub stride: usize,
    /// `subframes[f]` holds the `m` poses averaged into frame `f`.
    pub subframes: Vec<Vec<Pose>>,
}

impl MotionScript {
    pub fn center_pose(&self, frame: usize) -> &Pose {
        &self.subframes[frame][self.blur_size / 2]
    }

    pub fn num_frames(&self) -> usize {
        self.subframes.len()
    }
}

/// Band-limited random joint motion. Odd `m` only, so that a centre
/// subframe exists.
pub fn make_motion(seed: u64, chain: &KinematicChain, frames: usize, m: usize, cfg: &MotionConfig) -> Result<MotionScript> {
    if m % 2 == 0 {
        return Err(Error::invalid(format!("blur size must be odd, got {m}")));
    }
    if frames == 0 {
        return Err(Error::invalid("at least one frame is required"));
    }
    if cfg.stride == 0 || !(cfg.min_period > 0.0 && cfg.min_period <= cfg.max_period) {
        return Err(Error::invalid("motion stride and periods must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7469_6f6e);
    let k = chain.num_joints();
    let joints: Vec<AngleSignal> = (0..k).map(|_| AngleSignal::random(&mut rng, cfg, cfg.amplitude)).collect();
    // The root only turns about the vertical axis.
    let mut root = AngleSignal::random(&mut rng, cfg, 0.3 * cfg.amplitude);
    root.waves.iter_mut().for_each(|w| w.axis = [0.0, 1.0, 0.0]);
    let sway: Vec<(f64, f64)> = (0..3)
        .map(|_| (1.0 / rng.random_range(cfg.min_period..=cfg.max_period), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let pose_at = |t: f64| -> Pose {
        let trans = Vec3::from_fn(|c, _| {
            let (f, p) = sway[c];
            cfg.root_sway * (std::f64::consts::TAU * f * t + p).sin()
        });
        Pose {
            root_translation: trans,
            root_orientation: Quaternion::from_rotation_vector(root.at(t)),
            joints: joints.iter().map(|s| Quaternion::from_rotation_vector(s.at(t))).collect(),
        }
    };
    let half = (m / 2) as f64;
    let subframes = (0..frames)
        .map(|f| {
            let centre = (f * cfg.stride) as f64 + half;
            (0..m).map(|s| pose_at(centre - half + s as f64)).collect()
        })
        .collect();
    Ok(MotionScript {
        blur_size: m,
        stride: cfg.stride,
        subframes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub frames: usize,
    pub blur_size: usize,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub pose_noise: f64,
    pub eval_cameras: usize,
    pub chain: KinematicChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseFile {
    input: Vec<Pose>,
    center: Vec<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CameraFile {
    train: Camera,
    eval: Vec<Camera>,
}

/// Blurred training frames with their sharp ground truth. Images carry
/// RGB only; their alpha is one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train_camera: Camera,
    pub eval_cameras: Vec<Camera>,
    pub blurred: Vec<ImageBuffer>,
    pub masks: Vec<Vec<f64>>,
    /// Centre-subframe renders from the training camera.
    pub sharp: Vec<ImageBuffer>,
    /// `eval_sharp[c][f]`: centre-subframe render of frame `f` from held-out
    /// camera `c`.
    pub eval_sharp: Vec<Vec<ImageBuffer>>,
    /// Centre poses with simulated estimation noise.
    pub input_poses: Vec<Pose>,
    pub center_poses: Vec<Pose>,
}

fn rgb_only(mut img: ImageBuffer) -> ImageBuffer {
    img.alpha_mut().fill(1.0);
    img
}

fn perturb(pose: &Pose, sigma: f64, rng: &mut ChaCha8Rng) -> Pose {
    let mut noisy = || -> Quaternion {
        let v = Vec3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        Quaternion::from_rotation_vector(v)
    };
    Pose {
        root_translation: pose.root_translation,
        root_orientation: pose.root_orientation * noisy(),
        joints: pose.joints.iter().map(|q| *q * noisy()).collect(),
    }
}

/// Renders every subframe, averages them into the blurred frame, and keeps
/// the centre render as sharp ground truth. `pose_noise` is the standard
/// deviation, in radians per axis, of the rotation applied to each joint of
/// the input pose.
pub fn blur_oracle(scene: &GroundTruthScene, script: &MotionScript, pose_noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    let cam = &scene.train_camera;
    let centre = script.blur_size / 2;
    let mut blurred = Vec::new();
    let mut masks = Vec::new();
    let mut sharp = Vec::new();
    let mut input_poses = Vec::new();
    let mut center_poses = Vec::new();
    for poses in &script.subframes {
        let renders = poses.iter().map(|p| scene.render_sharp(p, cam)).collect::<Result<Vec<_>>>()?;
        let mask = renders[centre].alpha().iter().map(|a| if *a > 0.5 { 1.0 } else { 0.0 }).collect();
        blurred.push(rgb_only(synthesize_blur(&renders)?));
        masks.push(mask);
        sharp.push(rgb_only(renders[centre].clone()));
        let pose = poses[centre].clone();
        input_poses.push(if pose_noise > 0.0 { perturb(&pose, pose_noise, &mut rng) } else { pose.clone() });
        center_poses.push(pose);
    }
    let eval_sharp = scene
        .eval_cameras
        .iter()
        .map(|c| center_poses.iter().map(|p| Ok(rgb_only(scene.render_sharp(p, c)?))).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            frames: script.num_frames(),
            blur_size: script.blur_size,
            stride: script.stride,
            width: cam.width,
            height: cam.height,
            pose_noise,
            eval_cameras: scene.eval_cameras.len(),
            chain: scene.chain.clone(),
        },
        train_camera: *cam,
        eval_cameras: scene.eval_cameras.clone(),
        blurred,
        masks,
        sharp,
        eval_sharp,
        input_poses,
        center_poses,
    })
}

/// Everything `synth` produces for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub blur_size: usize,
    pub pose_noise: f64,
    pub scene: SceneConfig,
    pub motion: MotionConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 60,
            blur_size: BLUR_SMALL,
            pose_noise: 0.01,
            scene: SceneConfig::default(),
            motion: MotionConfig::default(),
        }
    }
}

/// Scene, motion and blurred dataset for `cfg`, with images rounded to
/// `f32` so that the on-disk copy is exact.
pub fn synthesize(cfg: &SynthConfig) -> Result<(GroundTruthScene, Dataset)> {
    let scene = make_scene(cfg.seed, &cfg.scene)?;
    let script = make_motion(cfg.seed, &scene.chain, cfg.frames, cfg.blur_size, &cfg.motion)?;
    let mut data = blur_oracle(&scene, &script, cfg.pose_noise, cfg.seed)?;
    data.quantize();
    Ok((scene, data))
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.blurred.len()
    }

    pub fn quantize(&mut self) {
        let all = self
            .blurred
            .iter_mut()
            .chain(self.sharp.iter_mut())
            .chain(self.eval_sharp.iter_mut().flatten());
        for img in all {
            img.quantize_f32();
        }
    }

    pub fn train_frames(&self) -> Vec<TrainFrame> {
        (0..self.num_frames())
            .map(|f| TrainFrame {
                image: self.blurred[f].clone(),
                mask: self.masks[f].clone(),
                camera: self.train_camera,
                pose: self.input_poses[f].clone(),
            })
            .collect()
    }

    /// Sharp centre frames from the training camera and every held-out
    /// camera, posed with `pose_of(frame)`.
    pub fn eval_frames(&self, pose_of: impl Fn(usize) -> Pose) -> Vec<EvalFrame> {
        let mut out = Vec::new();
        for f in 0..self.num_frames() {
            out.push(EvalFrame {
                label: format!("train_{f:04}"),
                camera: self.train_camera,
                pose: pose_of(f),
                sharp: self.sharp[f].clone(),
            });
            for (c, cam) in self.eval_cameras.iter().enumerate() {
                out.push(EvalFrame {
                    label: format!("eval{c:02}_{f:04}"),
                    camera: *cam,
                    pose: pose_of(f),
                    sharp: self.eval_sharp[c][f].clone(),
                });
            }
        }
        out
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn frame_paths(dir: &Path, f: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("frames").join(format!("blur_{f:04}.pfm")),
        dir.join("frames").join(format!("sharp_{f:04}.pfm")),
        dir.join("masks").join(format!("{f:04}.png")),
    )
}

fn eval_path(dir: &Path, c: usize, f: usize) -> PathBuf {
    dir.join("frames").join(format!("eval_{c:02}_{f:04}.pfm"))
}

/// Writes the dataset layout:
///
/// ```text
/// manifest.json  poses.json  cameras.json
/// frames/blur_%04d.pfm  frames/sharp_%04d.pfm  frames/eval_%02d_%04d.pfm
/// masks/%04d.png
/// ```
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["frames", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    write_json(&dir.join("manifest.json"), &data.manifest)?;
    write_json(
        &dir.join("poses.json"),
        &PoseFile {
            input: data.input_poses.clone(),
            center: data.center_poses.clone(),
        },
    )?;
    write_json(
        &dir.join("cameras.json"),
        &CameraFile {
            train: data.train_camera,
            eval: data.eval_cameras.clone(),
        },
    )?;
    for f in 0..data.num_frames() {
        let (blur, sharp, mask) = frame_paths(dir, f);
        data.blurred[f].write_pfm(&blur)?;
        data.sharp[f].write_pfm(&sharp)?;
        write_mask_png(&mask, data.manifest.width, data.manifest.height, &data.masks[f])?;
        for c in 0..data.eval_cameras.len() {
            data.eval_sharp[c][f].write_pfm(&eval_path(dir, c, f))?;
        }
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported dataset format version {}", manifest.format_version),
        ));
    }
    let poses: PoseFile = read_json(&dir.join("poses.json"))?;
    let cameras: CameraFile = read_json(&dir.join("cameras.json"))?;
    let n = manifest.frames;
    let consistent = poses.input.len() == n && poses.center.len() == n && cameras.eval.len() == manifest.eval_cameras;
    if !consistent {
        return Err(Error::format(&manifest_path, "poses or cameras disagree with the manifest"));
    }
    let mut data = Dataset {
        train_camera: cameras.train,
        eval_cameras: cameras.eval,
        blurred: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        sharp: Vec::with_capacity(n),
        eval_sharp: vec![Vec::with_capacity(n); manifest.eval_cameras],
        input_poses: poses.input,
        center_poses: poses.center,
        manifest,
    };
    let (w, h) = (data.manifest.width, data.manifest.height);
    let check = |img: ImageBuffer, path: &Path| -> Result<ImageBuffer> {
        if img.width() != w || img.height() != h {
            return Err(Error::format(path, format!("expected {w}x{h}, found {}x{}", img.width(), img.height())));
        }
        Ok(img)
    };
    for f in 0..n {
        let (blur, sharp, mask) = frame_paths(dir, f);
        data.blurred.push(check(ImageBuffer::read_pfm(&blur)?, &blur)?);
        data.sharp.push(check(ImageBuffer::read_pfm(&sharp)?, &sharp)?);
        let (mw, mh, m) = read_mask_png(&mask)?;
        if (mw, mh) != (w, h) {
            return Err(Error::format(&mask, "mask size disagrees with the manifest"));
        }
        data.masks.push(m);
        for c in 0..data.eval_cameras.len() {
            let p = eval_path(dir, c, f);
            data.eval_sharp[c].push(check(ImageBuffer::read_pfm(&p)?, &p)?);
        }
    }
    Ok(data)
}

/// Stores the ground-truth scene beside a dataset.
pub fn write_scene(path: &Path, scene: &GroundTruthScene) -> Result<()> {
    write_json(path, scene)
}

pub fn read_scene(path: &Path) -> Result<GroundTruthScene> {
    let scene: GroundTruthScene = read_json(path)?;
    check_len("scene colours", scene.cloud.len(), scene.colors.len()).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene_cfg() -> SceneConfig {
        SceneConfig {
            num_gaussians: 300,
            width: 24,
            height: 24,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn scene_is_deterministic_and_on_the_capsules() {
        let cfg = small_scene_cfg();
        let a = make_scene(3, &cfg).unwrap();
        assert_eq!(a, make_scene(3, &cfg).unwrap());
        assert_ne!(a.cloud, make_scene(4, &cfg).unwrap().cloud);
        for i in 0..a.cloud.len() {
            let p = a.cloud.position(i);
            let shell = (0..a.chain.num_joints())
                .map(|k| (a.chain.distance_to_bone(k, &p) - a.chain.radius(k)).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(shell < 1e-9, "gaussian {i} is {shell} off every capsule");
        }
        assert!(a.eval_cameras.iter().all(|c| *c != a.train_camera));
        let distinct: std::collections::BTreeSet<String> = a.colors.iter().map(|c| format!("{:?}", c)).collect();
        assert!(distinct.len() > a.chain.num_joints());
    }

    #[test]
    fn even_blur_size_is_rejected() {
        let chain = KinematicChain::humanoid();
        assert!(make_motion(0, &chain, 3, 16, &MotionConfig::default()).is_err());
        assert!(make_motion(0, &chain, 0, 17, &MotionConfig::default()).is_err());
    }

    #[test]
    fn zero_amplitude_motion_is_static() {
        let chain = KinematicChain::humanoid();
        let cfg = MotionConfig {
            amplitude: 0.0,
            root_sway: 0.0,
            ..MotionConfig::default()
        };
        let script = make_motion(1, &chain, 3, 17, &cfg).unwrap();
        let first = &script.subframes[0][0];
        assert!(script.subframes.iter().flatten().all(|p| p == first));
    }

    #[test]
    fn subframe_rotation_respects_the_bound() {
        let chain = KinematicChain::humanoid();
        let cfg = MotionConfig {
            amplitude: 2.0,
            ..MotionConfig::default()
        };
        let script = make_motion(7, &chain, 10, 33, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for poses in &script.subframes {
            for pair in poses.windows(2) {
                for (a, b) in pair[0].joints.iter().zip(&pair[1].joints) {
                    worst = worst.max(a.angle_to(*b));
                }
                worst = worst.max(pair[0].root_orientation.angle_to(pair[1].root_orientation));
            }
        }
        assert!(worst <= cfg.max_subframe_rotation, "{worst}");
        assert!(worst > 0.5 * cfg.max_subframe_rotation);
    }

    #[test]
    fn oracle_properties() {
        let scene = make_scene(2, &small_scene_cfg()).unwrap();
        let chain = &scene.chain;
        let still = MotionConfig {
            amplitude: 0.0,
            root_sway: 0.0,
            ..MotionConfig::default()
        };
        let script = make_motion(2, chain, 2, 17, &still).unwrap();
        let data = blur_oracle(&scene, &script, 0.0, 2).unwrap();
        for (b, s) in data.blurred.iter().zip(&data.sharp) {
            let diff = b.rgb().iter().zip(s.rgb()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-6);
        }

        let single = make_motion(2, chain, 2, 1, &MotionConfig::default()).unwrap();
        let data = blur_oracle(&scene, &single, 0.0, 2).unwrap();
        assert_eq!(data.blurred, data.sharp);

        let moving = make_motion(5, chain, 1, 17, &MotionConfig::default()).unwrap();
        let data = blur_oracle(&scene, &moving, 0.0, 5).unwrap();
        let means: f64 = moving.subframes[0]
            .iter()
            .map(|p| scene.render_sharp(p, &scene.train_camera).unwrap().mean_rgb())
            .sum::<f64>()
            / 17.0;
        assert!((data.blurred[0].mean_rgb() - means).abs() < 1e-10);
        assert!(data.blurred[0] != data.sharp[0]);
        let centre = scene.render_sharp(moving.center_pose(0), &scene.train_camera).unwrap();
        let mask: Vec<f64> = centre.alpha().iter().map(|a| if *a > 0.5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(data.masks[0], mask);
        assert!(mask.iter().any(|m| *m == 1.0) && mask.iter().any(|m| *m == 0.0));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let cfg = SynthConfig {
            frames: 2,
            scene: small_scene_cfg(),
            seed: 9,
            ..SynthConfig::default()
        };
        let (_, data) = synthesize(&cfg).unwrap();
        assert_eq!(data.manifest.blur_size, 17);
        assert_eq!(data.manifest.seed, 9);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);

        let blur = dir.path().join("frames/blur_0001.pfm");
        let bytes = fs::read(&blur).unwrap();
        fs::write(&blur, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
        fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
        fs::remove_file(dir.path().join("manifest.json")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn noisy_input_poses_stay_close() {
        let scene = make_scene(2, &small_scene_cfg()).unwrap();
        let script = make_motion(2, &scene.chain, 2, 3, &MotionConfig::default()).unwrap();
        let data = blur_oracle(&scene, &script, 0.01, 2).unwrap();
        for (a, b) in data.input_poses.iter().zip(&data.center_poses) {
            let worst = a.joints.iter().zip(&b.joints).map(|(x, y)| x.angle_to(*y)).fold(0.0, f64::max);
            assert!(worst > 0.0 && worst < 0.1);
        }
    }
}
