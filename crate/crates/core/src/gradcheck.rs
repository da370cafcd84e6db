//! Central finite-difference checks of the analytic gradients.
//!
//! The `full` scope builds a tiny random avatar (at most five Gaussians, an
//! 8x8 camera) and compares every parameter group and trajectory knot that
//! [`crate::train::step`] differentiates. Entries sitting within one step of
//! a kink (a ReLU switching, an L1 term crossing zero) are counted rather
//! than compared.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::articulation::{Joint, KinematicChain, Pose};
use crate::blur::{ExposureTrajectory, Interpolation};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Quaternion, Vec3};
use crate::imagebuf::ImageBuffer;
use crate::model::{param_groups_mut, AvatarModel, ModelConfig};
use crate::render::{render, render_backward, Camera, RenderSettings, SplatInputs};
use crate::scene::{knn_edges, GaussianCloud, Gaussian};
use crate::tinynet::DenseNet;
use crate::train::{skin_prior, step, LossWeights, Stage, StepInputs, TrainFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every check below.
    All,
    /// Dense networks alone.
    Tinynet,
    /// Rasterizer alone.
    Render,
    /// Whole training loss through deformation, blur and fusion.
    Full,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scope::All),
            "tinynet" => Ok(Scope::Tinynet),
            "render" => Ok(Scope::Render),
            "full" => Ok(Scope::Full),
            other => Err(Error::invalid(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::All => "all",
            Scope::Tinynet => "tinynet",
            Scope::Render => "render",
            Scope::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub scope: Scope,
    pub seeds: usize,
    pub first_seed: u64,
    pub step: f64,
    /// Largest relative error accepted.
    pub tolerance: f64,
    /// Entries with both gradients below this magnitude are not compared.
    pub min_magnitude: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            scope: Scope::All,
            seeds: 20,
            first_seed: 0,
            step: 1e-6,
            tolerance: 1e-3,
            min_magnitude: 1e-6,
        }
    }
}

/// Worst case for one named group across all seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub compared: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn compared(&self) -> usize {
        self.groups.iter().map(|g| g.compared).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance && self.compared() > 0
    }

    fn record(&mut self, name: &str, outcome: Outcome) {
        let pos = match self.groups.iter().position(|g| g.name == name) {
            Some(p) => p,
            None => {
                self.groups.push(GroupReport {
                    name: name.to_string(),
                    compared: 0,
                    kinks: 0,
                    max_rel_err: 0.0,
                });
                self.groups.len() - 1
            }
        };
        let g = &mut self.groups[pos];
        match outcome {
            Outcome::Compared(err) => {
                g.compared += 1;
                g.max_rel_err = g.max_rel_err.max(err);
            }
            Outcome::Kink => g.kinks += 1,
            Outcome::Small => {}
        }
    }
}

enum Outcome {
    Compared(f64),
    Kink,
    Small,
}

/// Compares `analytic` with the central difference of `f`, where `f(d)`
/// evaluates the loss with the entry shifted by `d`.
///
/// When a kink lies within one step of the evaluation point the central
/// difference mixes two slopes. That case is recognised when the one-sided
/// differences disagree with each other and the analytic value matches the
/// one taken on the smooth side; it is counted, not compared.
fn compare(cfg: &GradcheckConfig, analytic: f64, f: impl Fn(f64) -> Result<f64>) -> Result<Outcome> {
    let h = cfg.step;
    let (plus, zero, minus) = (f(h)?, f(0.0)?, f(-h)?);
    let fd = (plus - minus) / (2.0 * h);
    let (fwd, bwd) = ((plus - zero) / h, (zero - minus) / h);
    let scale = analytic.abs().max(fd.abs());
    if scale <= cfg.min_magnitude {
        return Ok(Outcome::Small);
    }
    let rel = |x: f64| (analytic - x).abs() / analytic.abs().max(x.abs());
    let central = rel(fd);
    if central <= cfg.tolerance {
        return Ok(Outcome::Compared(central));
    }
    let asymmetry = (fwd - bwd).abs() / fwd.abs().max(bwd.abs());
    if asymmetry > cfg.tolerance && (rel(fwd) <= cfg.tolerance || rel(bwd) <= cfg.tolerance) {
        return Ok(Outcome::Kink);
    }
    Ok(Outcome::Compared(central))
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.seeds == 0 || !(cfg.step > 0.0) {
        return Err(Error::invalid("gradcheck needs at least one seed and a positive step"));
    }
    let mut report = GradcheckReport {
        seeds: cfg.seeds,
        tolerance: cfg.tolerance,
        groups: Vec::new(),
    };
    for s in 0..cfg.seeds as u64 {
        let seed = cfg.first_seed + s;
        if matches!(cfg.scope, Scope::All | Scope::Tinynet) {
            check_tinynet(cfg, seed, &mut report)?;
        }
        if matches!(cfg.scope, Scope::All | Scope::Render) {
            check_render(cfg, seed, &mut report)?;
        }
        if matches!(cfg.scope, Scope::All | Scope::Full) {
            check_full(cfg, seed, &mut report)?;
        }
    }
    Ok(report)
}

fn check_tinynet(cfg: &GradcheckConfig, seed: u64, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [5, rng.random_range(3..9), rng.random_range(3..9), 3];
    let net = DenseNet::mlp(&widths, &mut rng)?;
    let batch = 4;
    let input: Vec<f64> = (0..5 * batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let probe: Vec<f64> = (0..3 * batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |net: &DenseNet, input: &[f64]| -> Result<f64> {
        let t = net.forward_batch(input, batch)?;
        Ok(t.output().iter().zip(&probe).map(|(a, b)| a * b).sum())
    };
    let tape = net.forward_batch(&input, batch)?;
    let mut grads = vec![0.0; net.num_params()];
    let d_in = net.backward_batch(&tape, &probe, &mut grads)?;
    for (p, g) in grads.iter().enumerate() {
        let o = compare(cfg, *g, |d| {
            let mut n = net.clone();
            n.params_mut()[p] += d;
            loss(&n, &input)
        })?;
        report.record("tinynet.params", o);
    }
    for (i, g) in d_in.iter().enumerate() {
        let o = compare(cfg, *g, |d| {
            let mut x = input.clone();
            x[i] += d;
            loss(&net, &x)
        })?;
        report.record("tinynet.input", o);
    }
    Ok(())
}

fn random_quat(rng: &mut ChaCha8Rng, spread: f64) -> Quaternion {
    Quaternion::new(
        1.0,
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
        rng.random_range(-spread..spread),
    )
    .normalize()
}

fn small_camera() -> Camera {
    Camera::look_at(Vec3::new(0.1, 0.3, -2.5), Vec3::new(0.0, 0.3, 0.0), Vec3::new(0.0, -1.0, 0.0), 9.0, 8, 8)
        .expect("fixed camera is valid")
}

fn check_render(cfg: &GradcheckConfig, seed: u64, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let cam = small_camera();
    let n = rng.random_range(2..=5);
    let mut positions = Vec::new();
    let mut covariances = Vec::new();
    for _ in 0..n {
        positions.push(Vec3::new(
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.1..0.7),
            rng.random_range(-0.3..0.3),
        ));
        let s = Vec3::new(rng.random_range(-2.2..-1.4), rng.random_range(-2.2..-1.4), rng.random_range(-2.2..-1.4));
        covariances.push(crate::geom::build_covariance(&s, random_quat(&mut rng, 1.0)));
    }
    let opacities: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.9)).collect();
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let npix = cam.width * cam.height;
    let d_rgb: Vec<f64> = (0..3 * npix).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d_alpha: Vec<f64> = (0..npix).map(|_| rng.random_range(-1.0..1.0)).collect();
    let settings = RenderSettings::exact();
    let loss = |p: &[Vec3], c: &[Mat3], o: &[f64], k: &[[f64; 3]]| -> Result<f64> {
        let inputs = SplatInputs {
            positions: p,
            covariances: c,
            opacities: o,
            colors: k,
        };
        let (img, _) = render(&cam, &inputs, &settings)?;
        Ok(dot(img.rgb(), &d_rgb) + dot(img.alpha(), &d_alpha))
    };
    let inputs = SplatInputs {
        positions: &positions,
        covariances: &covariances,
        opacities: &opacities,
        colors: &colors,
    };
    let (_, tape) = render(&cam, &inputs, &settings)?;
    let g = render_backward(&tape, &d_rgb, &d_alpha)?;
    for i in 0..n {
        for c in 0..3 {
            let o = compare(cfg, g.positions[i][c], |d| {
                let mut p = positions.clone();
                p[i][c] += d;
                loss(&p, &covariances, &opacities, &colors)
            })?;
            report.record("render.positions", o);
            let o = compare(cfg, g.colors[i][c], |d| {
                let mut k = colors.clone();
                k[i][c] += d;
                loss(&positions, &covariances, &opacities, &k)
            })?;
            report.record("render.colors", o);
        }
        // Covariances stay symmetric, so off-diagonal pairs move together.
        for r in 0..3 {
            for c in r..3 {
                let analytic = if r == c {
                    g.covariances[i][(r, c)]
                } else {
                    g.covariances[i][(r, c)] + g.covariances[i][(c, r)]
                };
                let o = compare(cfg, analytic, |d| {
                    let mut s = covariances.clone();
                    s[i][(r, c)] += d;
                    if r != c {
                        s[i][(c, r)] += d;
                    }
                    loss(&positions, &s, &opacities, &colors)
                })?;
                report.record("render.covariances", o);
            }
        }
        let o = compare(cfg, g.opacities[i], |d| {
            let mut op = opacities.clone();
            op[i] += d;
            loss(&positions, &covariances, &op, &colors)
        })?;
        report.record("render.opacities", o);
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A random miniature training problem.
#[derive(Debug, Clone)]
pub struct TinyScene {
    pub model: AvatarModel,
    pub frame: TrainFrame,
    pub trajectory: ExposureTrajectory,
    pub stage: Stage,
    pub virtual_poses: usize,
    pub skin_prior: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    pub weights: LossWeights,
}

impl TinyScene {
    pub fn inputs(&self) -> StepInputs<'_> {
        StepInputs {
            frame: &self.frame,
            frame_index: 0,
            trajectory: &self.trajectory,
            stage: self.stage,
            virtual_poses: self.virtual_poses,
            skin_prior: &self.skin_prior,
            edges: &self.edges,
            weights: self.weights,
        }
    }
}

/// Builds the scene checked for `seed`. Seeds rotate through the fusion
/// stage with slerp, the blur stage with an even `n` and linear
/// interpolation, and the fusion stage with a cubic trajectory.
pub fn tiny_scene(seed: u64) -> Result<TinyScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=3);
    let mut joints = vec![Joint {
        name: "j0".into(),
        parent: -1,
        offset: [0.0, 0.0, 0.0],
        tip: [0.0, 0.4, 0.0],
        radius: 0.1,
    }];
    for j in 1..k {
        joints.push(Joint {
            name: format!("j{j}"),
            parent: (j - 1) as i64,
            offset: if j == 1 { [0.0, 0.4, 0.0] } else { [0.3, 0.0, 0.0] },
            tip: [0.3, 0.0, 0.0],
            radius: 0.08,
        });
    }
    let chain = KinematicChain::new(joints)?;
    let feature_dim = 4;
    let n = rng.random_range(3..=5);
    let mut gaussians = Vec::with_capacity(n);
    for _ in 0..n {
        gaussians.push(Gaussian {
            position: Vec3::new(
                rng.random_range(-0.3..0.4),
                rng.random_range(0.0..0.6),
                rng.random_range(-0.2..0.2),
            ),
            log_scale: Vec3::new(
                rng.random_range(-2.2..-1.5),
                rng.random_range(-2.2..-1.5),
                rng.random_range(-2.2..-1.5),
            ),
            rotation: Quaternion::new(
                rng.random_range(0.5..1.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            opacity_logit: rng.random_range(-1.0..1.5),
            features: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        });
    }
    let cloud = GaussianCloud::from_gaussians(feature_dim, &gaussians)?;
    let config = ModelConfig {
        num_gaussians: n,
        feature_dim,
        nonrigid_hidden: vec![8],
        skin_hidden: vec![8],
        color_hidden: vec![8],
        fusion_hidden: vec![8],
        nonrigid: true,
    };
    let mut model = AvatarModel::with_cloud(chain, cloud, config, 1, RenderSettings::exact(), seed)?;
    // Zero-initialized layers and embeddings would hide whole gradient paths.
    for p in model.nonrigid_net.params_mut() {
        *p = rng.random_range(-0.1..0.1);
    }
    for p in model.fusion_net.params_mut() {
        *p = rng.random_range(-0.3..0.3);
    }
    for p in model.embeddings.iter_mut() {
        *p = rng.random_range(-0.5..0.5);
    }

    let camera = small_camera();
    let npix = camera.width * camera.height;
    let rgb = (0..3 * npix).map(|_| rng.random()).collect();
    let image = ImageBuffer::from_parts(camera.width, camera.height, rgb, vec![1.0; npix])?;
    let mask = (0..npix).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let mut pose = || Pose {
        root_translation: Vec3::new(
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ),
        root_orientation: random_quat(&mut rng, 0.15),
        joints: (0..k).map(|_| random_quat(&mut rng, 0.3)).collect(),
    };
    let input = pose();
    let (stage, virtual_poses, interpolation) = match seed % 3 {
        0 => (Stage::Fusion, 3, Interpolation::Slerp),
        1 => (Stage::Blur, 4, Interpolation::Linear),
        _ => (Stage::Fusion, 3, Interpolation::Cubic),
    };
    let knots = (0..interpolation.num_knots()).map(|_| pose()).collect();
    let trajectory = ExposureTrajectory { interpolation, knots };
    let frame = TrainFrame {
        image,
        mask,
        camera,
        pose: input,
    };
    let skin_prior = skin_prior(&model);
    let edges = knn_edges(&model.cloud.positions_vec(), 2);
    Ok(TinyScene {
        model,
        frame,
        trajectory,
        stage,
        virtual_poses,
        skin_prior,
        edges,
        weights: LossWeights {
            mask: 0.1,
            skin: 10.0,
            isopos: 1.0,
            isocov: 100.0,
        },
    })
}

const GROUP_NAMES: [&str; 11] = [
    "full.positions",
    "full.log_scales",
    "full.rotations",
    "full.opacity_logits",
    "full.features",
    "full.pose_encoder",
    "full.nonrigid_net",
    "full.skin_net",
    "full.color_net",
    "full.fusion_net",
    "full.embeddings",
];

fn check_full(cfg: &GradcheckConfig, seed: u64, report: &mut GradcheckReport) -> Result<()> {
    let scene = tiny_scene(seed)?;
    let result = step(&scene.model, &scene.inputs(), true)?;
    let grads = result.grads.expect("gradients requested");
    let groups: Vec<Vec<f64>> = grads.model.groups().iter().map(|(_, g)| g.to_vec()).collect();
    for (gi, analytic) in groups.iter().enumerate() {
        for (j, a) in analytic.iter().enumerate() {
            let o = compare(cfg, *a, |d| {
                let mut m = scene.model.clone();
                param_groups_mut(&mut m)[gi][j] += d;
                Ok(step(&m, &scene.inputs(), false)?.total)
            })?;
            report.record(GROUP_NAMES[gi], o);
        }
    }
    if scene.stage != Stage::Sharp {
        let flat = scene.trajectory.to_flat();
        let analytic: Vec<f64> = grads.knots.iter().flat_map(|g| g.to_flat()).collect();
        for (j, a) in analytic.iter().enumerate() {
            let o = compare(cfg, *a, |d| {
                let mut v = flat.clone();
                v[j] += d;
                let t = scene.trajectory.from_flat(&v)?;
                Ok(step(&scene.model, &StepInputs { trajectory: &t, ..scene.inputs() }, false)?.total)
            })?;
            report.record("full.trajectory", o);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_parse() {
        for s in ["all", "tinynet", "render", "full"] {
            assert_eq!(s.parse::<Scope>().unwrap().to_string(), s);
        }
        assert!("nets".parse::<Scope>().is_err());
    }

    #[test]
    fn three_seeds_pass_every_scope() {
        let report = run_gradcheck(&GradcheckConfig {
            seeds: 3,
            ..GradcheckConfig::default()
        })
        .unwrap();
        for g in &report.groups {
            assert!(g.compared > 0, "{} compared nothing", g.name);
            assert!(g.max_rel_err <= 1e-3, "{}: {}", g.name, g.max_rel_err);
        }
        assert!(report.groups.iter().any(|g| g.name == "full.trajectory"));
        assert!(report.passed());
    }

    #[test]
    fn a_broken_gradient_is_caught() {
        let mut report = GradcheckReport {
            seeds: 1,
            tolerance: 1e-3,
            groups: Vec::new(),
        };
        let cfg = GradcheckConfig::default();
        let o = compare(&cfg, 2.1, |d| Ok((1.0 + d) * (1.0 + d))).unwrap();
        report.record("x", o);
        assert!(!report.passed());
        // |x| just right of its kink: the analytic slope is +1.
        let o = compare(&cfg, 1.0, |d| Ok((3e-7 + d).abs())).unwrap();
        assert!(matches!(o, Outcome::Kink));
        // A wrong slope next to a kink is still reported.
        let o = compare(&cfg, 0.5, |d| Ok((3e-7 + d).abs())).unwrap();
        assert!(matches!(o, Outcome::Compared(e) if e > 0.1));
    }
}
