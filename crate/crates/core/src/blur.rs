//! Exposure trajectories, virtual pose sampling, blur synthesis and the
//! learned sharp/blurred fusion.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::articulation::{Pose, PoseGrad};
use crate::error::{check_len, Error, Result};
use crate::geom::{normalize_backward, slerp, slerp_backward, Quaternion, Vec3};
use crate::imagebuf::ImageBuffer;
use crate::scene::sigmoid;
use crate::tinynet::{DenseNet, Tape};

pub const DEFAULT_VIRTUAL_POSES: usize = 5;
pub const POSITION_FREQUENCIES: usize = 4;
/// Width of the pixel position encoding: sin/cos per frequency per axis.
pub const POSITION_ENCODING_DIM: usize = 4 * POSITION_FREQUENCIES;
pub const LATENT_DIM: usize = 16;
/// Fusion net input: pose latent, frame embedding, position code, colour.
pub const FUSION_INPUT_DIM: usize = LATENT_DIM + LATENT_DIM + POSITION_ENCODING_DIM + 3;

thread_local! {
    static POSE_SAMPLES: Cell<u64> = const { Cell::new(0) };
    static FUSION_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Calls to trajectory sampling and to the fusion net made on the current
/// thread, so callers can assert that a code path never touches them.
pub fn blur_path_counters() -> (u64, u64) {
    (POSE_SAMPLES.with(Cell::get), FUSION_PASSES.with(Cell::get))
}

fn bump(counter: &'static std::thread::LocalKey<Cell<u64>>) {
    counter.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Per-joint slerp between start and end; translation lerped.
    #[default]
    Slerp,
    /// Normalized linear blend of the two quaternions.
    Linear,
    /// Cubic Bezier over four control knots.
    Cubic,
}

impl Interpolation {
    pub fn num_knots(self) -> usize {
        match self {
            Interpolation::Cubic => 4,
            _ => 2,
        }
    }
}

impl FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slerp" => Ok(Self::Slerp),
            "linear" => Ok(Self::Linear),
            "cubic" => Ok(Self::Cubic),
            other => Err(Error::invalid(format!("unknown interpolation {other:?}"))),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Slerp => "slerp",
            Self::Linear => "linear",
            Self::Cubic => "cubic",
        })
    }
}

/// Learnable body motion during one exposure, normalized to `u in [0, 1]`.
/// The first knot is the pose at the start of the exposure, the last knot the
/// pose at its end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureTrajectory {
    pub interpolation: Interpolation,
    pub knots: Vec<Pose>,
}

impl ExposureTrajectory {
    /// Every knot equal to `pose`.
    pub fn constant(pose: &Pose, interpolation: Interpolation) -> Self {
        Self {
            interpolation,
            knots: vec![pose.clone(); interpolation.num_knots()],
        }
    }

    /// Trajectory from `start` to `end`; cubic inner knots lie on the slerp
    /// path at thirds.
    pub fn between(start: &Pose, end: &Pose, interpolation: Interpolation) -> Self {
        let straight = Self {
            interpolation: Interpolation::Slerp,
            knots: vec![start.clone(), end.clone()],
        };
        let k = interpolation.num_knots();
        Self {
            interpolation,
            knots: (0..k)
                .map(|i| straight.pose_at(i as f64 / (k - 1) as f64))
                .collect(),
        }
    }

    pub fn start(&self) -> &Pose {
        &self.knots[0]
    }

    pub fn end(&self) -> &Pose {
        self.knots.last().expect("trajectory has knots")
    }

    pub fn num_joints(&self) -> usize {
        self.knots[0].joints.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("trajectory knots", self.interpolation.num_knots(), self.knots.len())?;
        let k = self.num_joints();
        for p in &self.knots {
            check_len("trajectory knot joints", k, p.joints.len())?;
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.knots.iter().flat_map(|p| p.to_flat()).collect()
    }

    pub fn from_flat(&self, v: &[f64]) -> Result<Self> {
        let k = self.num_joints();
        let len = Pose::flat_len(k);
        check_len("flat trajectory", len * self.knots.len(), v.len())?;
        Ok(Self {
            interpolation: self.interpolation,
            knots: v
                .chunks_exact(len)
                .map(|c| Pose::from_flat(c, k))
                .collect::<Result<_>>()?,
        })
    }

    /// Renormalizes every knot quaternion.
    pub fn normalize(&mut self) {
        for p in &mut self.knots {
            *p = p.normalized();
        }
    }

    /// Pose at normalized exposure time `u`.
    pub fn pose_at(&self, u: f64) -> Pose {
        let knots: Vec<Pose> = self.knots.iter().map(Pose::normalized).collect();
        let trans = blend_vec(&knots, self.interpolation, u);
        let quat = |f: &dyn Fn(&Pose) -> Quaternion| {
            let qs: Vec<Quaternion> = knots.iter().map(f).collect();
            interp_quat(&qs, self.interpolation, u)
        };
        Pose {
            root_translation: trans,
            root_orientation: quat(&|p| p.root_orientation),
            joints: (0..self.num_joints()).map(|j| quat(&|p| p.joints[j])).collect(),
        }
    }

    /// Accumulates into `grads` (one per knot) the gradient of a loss whose
    /// gradient w.r.t. `pose_at(u)` is `g`.
    pub fn pose_at_backward(&self, u: f64, g: &PoseGrad, grads: &mut [PoseGrad]) {
        let w = weights(self.interpolation, u);
        for (gk, wk) in grads.iter_mut().zip(&w) {
            gk.root_translation += g.root_translation * *wk;
        }
        let mut quat = |get: &dyn Fn(&Pose) -> Quaternion, gq: Quaternion, put: &mut dyn FnMut(&mut PoseGrad, Quaternion)| {
            let raw: Vec<Quaternion> = self.knots.iter().map(get).collect();
            let unit: Vec<Quaternion> = raw.iter().map(|q| q.normalize()).collect();
            let d_unit = interp_quat_backward(&unit, self.interpolation, u, gq);
            for (k, d) in d_unit.into_iter().enumerate() {
                put(&mut grads[k], normalize_backward(raw[k], d));
            }
        };
        quat(&|p| p.root_orientation, g.root_orientation, &mut |gk, d| {
            gk.root_orientation = gk.root_orientation + d
        });
        for j in 0..self.num_joints() {
            quat(&|p| p.joints[j], g.joints[j], &mut |gk, d| gk.joints[j] = gk.joints[j] + d);
        }
    }
}

fn bezier(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [v * v * v, 3.0 * v * v * u, 3.0 * v * u * u, u * u * u]
}

fn weights(interp: Interpolation, u: f64) -> Vec<f64> {
    match interp {
        Interpolation::Cubic => bezier(u).to_vec(),
        _ => vec![1.0 - u, u],
    }
}

fn blend_vec(knots: &[Pose], interp: Interpolation, u: f64) -> Vec3 {
    weights(interp, u)
        .iter()
        .zip(knots)
        .fold(Vec3::zeros(), |acc, (w, p)| acc + p.root_translation * *w)
}

/// Knots flipped onto the hemisphere of the first one.
fn aligned(qs: &[Quaternion]) -> Vec<(f64, Quaternion)> {
    qs.iter()
        .map(|q| {
            let s = if qs[0].dot(*q) < 0.0 { -1.0 } else { 1.0 };
            (s, q.scale(s))
        })
        .collect()
}

fn interp_quat(qs: &[Quaternion], interp: Interpolation, u: f64) -> Quaternion {
    match interp {
        Interpolation::Slerp => slerp(qs[0], qs[1], u),
        _ => {
            let w = weights(interp, u);
            aligned(qs)
                .iter()
                .zip(&w)
                .fold(Quaternion::new(0.0, 0.0, 0.0, 0.0), |acc, ((_, q), wk)| acc + q.scale(*wk))
                .normalize()
        }
    }
}

fn interp_quat_backward(qs: &[Quaternion], interp: Interpolation, u: f64, g: Quaternion) -> Vec<Quaternion> {
    match interp {
        Interpolation::Slerp => {
            let (a, b) = slerp_backward(qs[0], qs[1], u, g);
            vec![a, b]
        }
        _ => {
            let w = weights(interp, u);
            let al = aligned(qs);
            let raw = al
                .iter()
                .zip(&w)
                .fold(Quaternion::new(0.0, 0.0, 0.0, 0.0), |acc, ((_, q), wk)| acc + q.scale(*wk));
            let graw = normalize_backward(raw, g);
            al.iter().zip(&w).map(|((s, _), wk)| graw.scale(wk * s)).collect()
        }
    }
}

/// Normalized exposure time of virtual pose `l` out of `n`.
pub fn virtual_time(l: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        l as f64 / (n - 1) as f64
    }
}

/// The `n` virtual poses spread evenly over the exposure; `n = 1` gives the
/// start pose.
pub fn sample_virtual_poses(traj: &ExposureTrajectory, n: usize) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::invalid("number of virtual poses must be at least 1"));
    }
    bump(&POSE_SAMPLES);
    Ok((0..n).map(|l| traj.pose_at(virtual_time(l, n))).collect())
}

/// Per-pixel mean of the RGB and alpha channels.
pub fn synthesize_blur(images: &[ImageBuffer]) -> Result<ImageBuffer> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("blur needs at least one image"))?;
    let mut out = first.clone();
    for img in &images[1..] {
        out.check_dims(img, "blur inputs differ in size")?;
        for (a, b) in out.rgb_mut().iter_mut().zip(img.rgb()) {
            *a += b;
        }
        for (a, b) in out.alpha_mut().iter_mut().zip(img.alpha()) {
            *a += b;
        }
    }
    let inv = images.len() as f64;
    out.rgb_mut().iter_mut().for_each(|v| *v /= inv);
    out.alpha_mut().iter_mut().for_each(|v| *v /= inv);
    Ok(out)
}

/// `(1 - M) * sharp + M * blurred` per pixel, on RGB and alpha.
pub fn blend(sharp: &ImageBuffer, blurred: &ImageBuffer, mask: &[f64]) -> Result<ImageBuffer> {
    sharp.check_dims(blurred, "blend inputs differ in size")?;
    check_len("fusion mask", sharp.num_pixels(), mask.len())?;
    let mut out = sharp.clone();
    for (p, m) in mask.iter().enumerate() {
        for ch in 0..3 {
            let i = 3 * p + ch;
            out.rgb_mut()[i] = (1.0 - m) * sharp.rgb()[i] + m * blurred.rgb()[i];
        }
        out.alpha_mut()[p] = (1.0 - m) * sharp.alpha()[p] + m * blurred.alpha()[p];
    }
    Ok(out)
}

/// Sin/cos code of a pixel centre in `[-1, 1]` coordinates.
pub fn position_encoding(x: usize, y: usize, width: usize, height: usize) -> [f64; POSITION_ENCODING_DIM] {
    let u = 2.0 * (x as f64 + 0.5) / width as f64 - 1.0;
    let v = 2.0 * (y as f64 + 0.5) / height as f64 - 1.0;
    let mut out = [0.0; POSITION_ENCODING_DIM];
    for f in 0..POSITION_FREQUENCIES {
        let w = std::f64::consts::PI * (1 << f) as f64;
        out[4 * f] = (w * u).sin();
        out[4 * f + 1] = (w * u).cos();
        out[4 * f + 2] = (w * v).sin();
        out[4 * f + 3] = (w * v).cos();
    }
    out
}

/// Inputs of the fusion net at one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs<'a> {
    pub pose_latent: &'a [f64],
    pub frame_embedding: &'a [f64],
    pub position: [f64; POSITION_ENCODING_DIM],
    pub color: [f64; 3],
}

impl FusionInputs<'_> {
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(FUSION_INPUT_DIM);
        v.extend_from_slice(self.pose_latent);
        v.extend_from_slice(self.frame_embedding);
        v.extend_from_slice(&self.position);
        v.extend_from_slice(&self.color);
        v
    }
}

/// Fusion weight in `[0, 1]` for a single pixel.
pub fn fusion_mask(net: &DenseNet, inputs: &FusionInputs<'_>) -> Result<f64> {
    let x = inputs.concat();
    check_len("fusion net input", net.input_width(), x.len())?;
    check_len("fusion net output", 1, net.output_width())?;
    bump(&FUSION_PASSES);
    Ok(sigmoid(net.forward(&x)?.0[0]))
}

/// Whole-image fusion pass kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct FusionTape {
    pub mask: Vec<f64>,
    tape: Tape,
}

/// Mask for every pixel of `sharp`.
pub fn fusion_forward(
    net: &DenseNet,
    pose_latent: &[f64],
    frame_embedding: &[f64],
    sharp: &ImageBuffer,
) -> Result<FusionTape> {
    let (w, h) = (sharp.width(), sharp.height());
    let width = pose_latent.len() + frame_embedding.len() + POSITION_ENCODING_DIM + 3;
    check_len("fusion net input", net.input_width(), width)?;
    check_len("fusion net output", 1, net.output_width())?;
    bump(&FUSION_PASSES);
    let mut input = Vec::with_capacity(width * w * h);
    for y in 0..h {
        for x in 0..w {
            input.extend_from_slice(pose_latent);
            input.extend_from_slice(frame_embedding);
            input.extend_from_slice(&position_encoding(x, y, w, h));
            input.extend_from_slice(&sharp.pixel(x, y));
        }
    }
    let tape = net.forward_batch(&input, w * h)?;
    let mask = tape.output().iter().map(|z| sigmoid(*z)).collect();
    Ok(FusionTape { mask, tape })
}

/// Gradients of the fusion pass given `dL/dM` per pixel.
#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub pose_latent: Vec<f64>,
    pub frame_embedding: Vec<f64>,
    /// `dL/d colour input`, 3 per pixel.
    pub color: Vec<f64>,
}

pub fn fusion_backward(
    net: &DenseNet,
    fusion: &FusionTape,
    latent_dim: usize,
    embedding_dim: usize,
    d_mask: &[f64],
    net_grads: &mut [f64],
) -> Result<FusionGrads> {
    check_len("fusion mask gradient", fusion.mask.len(), d_mask.len())?;
    let dz: Vec<f64> = fusion
        .mask
        .iter()
        .zip(d_mask)
        .map(|(m, d)| d * m * (1.0 - m))
        .collect();
    let d_in = net.backward_batch(&fusion.tape, &dz, net_grads)?;
    let width = net.input_width();
    let mut out = FusionGrads {
        pose_latent: vec![0.0; latent_dim],
        frame_embedding: vec![0.0; embedding_dim],
        color: Vec::with_capacity(3 * d_mask.len()),
    };
    for row in d_in.chunks_exact(width) {
        for (a, b) in out.pose_latent.iter_mut().zip(&row[..latent_dim]) {
            *a += b;
        }
        for (a, b) in out.frame_embedding.iter_mut().zip(&row[latent_dim..latent_dim + embedding_dim]) {
            *a += b;
        }
        out.color.extend_from_slice(&row[width - 3..]);
    }
    Ok(out)
}

/// Central finite-difference gradient of `loss` w.r.t. every scalar of the
/// trajectory. Quaternions are renormalized inside each probe.
pub fn trajectory_gradients(
    loss: impl Fn(&ExposureTrajectory) -> Result<f64>,
    traj: &ExposureTrajectory,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let base = traj.to_flat();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            let mut t = traj.from_flat(&v)?;
            t.normalize();
            loss(&t)
        };
        grad[i] = (probe(h)? - probe(-h)?) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, k: usize) -> Pose {
        let mut q = || {
            Quaternion::new(
                rng.random_range(0.5..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            )
            .normalize()
        };
        let root = q();
        let joints = (0..k).map(|_| q()).collect();
        Pose {
            root_translation: Vec3::new(rng.random(), rng.random(), rng.random()),
            root_orientation: root,
            joints,
        }
    }

    #[test]
    fn constant_trajectory_repeats_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng, 3);
        for interp in [Interpolation::Slerp, Interpolation::Linear, Interpolation::Cubic] {
            let poses = sample_virtual_poses(&ExposureTrajectory::constant(&p, interp), 5).unwrap();
            assert_eq!(poses.len(), 5);
            for q in &poses {
                assert_abs_diff_eq!(q.to_flat().as_slice(), p.to_flat().as_slice(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn endpoints_and_reversal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_pose(&mut rng, 2), random_pose(&mut rng, 2));
        let t = ExposureTrajectory::between(&a, &b, Interpolation::Slerp);
        let poses = sample_virtual_poses(&t, 7).unwrap();
        assert_abs_diff_eq!(poses[0].to_flat().as_slice(), a.to_flat().as_slice(), epsilon = 1e-15);
        assert_abs_diff_eq!(poses[6].to_flat().as_slice(), b.to_flat().as_slice(), epsilon = 1e-15);
        let rev = sample_virtual_poses(&ExposureTrajectory::between(&b, &a, Interpolation::Slerp), 7).unwrap();
        for l in 0..7 {
            assert_abs_diff_eq!(poses[l].to_flat().as_slice(), rev[6 - l].to_flat().as_slice(), epsilon = 1e-12);
        }
        let single = sample_virtual_poses(&t, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_abs_diff_eq!(single[0].to_flat().as_slice(), a.to_flat().as_slice(), epsilon = 1e-15);
        assert!(sample_virtual_poses(&t, 0).is_err());
    }

    #[test]
    fn blur_of_images() {
        let a = ImageBuffer::filled(3, 2, [0.2, 0.4, 0.6], 1.0);
        let b = ImageBuffer::filled(3, 2, [0.6, 0.0, 0.2], 0.5);
        let m = synthesize_blur(&[a.clone(), b.clone()]).unwrap();
        for (i, v) in m.rgb().iter().enumerate() {
            assert_eq!(*v, (a.rgb()[i] + b.rgb()[i]) / 2.0);
        }
        assert_eq!(m.alpha()[0], 0.75);
        let same = synthesize_blur(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_abs_diff_eq!(same.rgb(), a.rgb(), epsilon = 1e-15);
        assert!(synthesize_blur(&[a, ImageBuffer::new(2, 2)]).is_err());
        assert!(synthesize_blur(&[]).is_err());
    }

    #[test]
    fn blend_extremes_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sharp = ImageBuffer::new(4, 4);
        let mut blurred = ImageBuffer::new(4, 4);
        sharp.rgb_mut().iter_mut().for_each(|v| *v = rng.random());
        blurred.rgb_mut().iter_mut().for_each(|v| *v = rng.random());
        assert_eq!(blend(&sharp, &blurred, &[0.0; 16]).unwrap(), sharp);
        assert_eq!(blend(&sharp, &blurred, &[1.0; 16]).unwrap(), blurred);
        let half = blend(&sharp, &blurred, &[0.5; 16]).unwrap();
        for i in 0..48 {
            assert_abs_diff_eq!(half.rgb()[i], 0.5 * (sharp.rgb()[i] + blurred.rgb()[i]), epsilon = 1e-15);
        }
        assert!(blend(&sharp, &blurred, &[0.5; 3]).is_err());
    }

    #[test]
    fn zero_output_fusion_net_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = DenseNet::mlp(&[FUSION_INPUT_DIM, 8, 1], &mut rng).unwrap().with_zero_output_layer();
        let latent = [0.3; LATENT_DIM];
        let emb = [0.0; LATENT_DIM];
        let m = fusion_mask(
            &net,
            &FusionInputs {
                pose_latent: &latent,
                frame_embedding: &emb,
                position: position_encoding(1, 2, 8, 8),
                color: [0.1, 0.2, 0.3],
            },
        )
        .unwrap();
        assert_eq!(m, 0.5);
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pose(&mut rng, 2);
        let t = ExposureTrajectory::between(&p, &random_pose(&mut rng, 2), Interpolation::Slerp);
        let target: Vec<f64> = t.to_flat().iter().map(|v| v + 0.1).collect();
        // Translation entries are untouched by renormalization, so the
        // central difference is exact for the quadratic there.
        let loss = |tr: &ExposureTrajectory| -> Result<f64> {
            Ok(tr.to_flat().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum())
        };
        let g = trajectory_gradients(loss, &t, 1e-3).unwrap();
        let flat = t.to_flat();
        let stride = Pose::flat_len(2);
        for knot in 0..2 {
            for i in 0..3 {
                let k = knot * stride + i;
                assert_abs_diff_eq!(g[k], 2.0 * (flat[k] - target[k]), epsilon = 1e-9);
            }
        }
        let flat_loss = |_: &ExposureTrajectory| -> Result<f64> { Ok(1.5) };
        assert!(trajectory_gradients(flat_loss, &t, 1e-3).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pose_at_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for interp in [Interpolation::Slerp, Interpolation::Linear, Interpolation::Cubic] {
            let a = random_pose(&mut rng, 2);
            let b = random_pose(&mut rng, 2);
            let mut t = ExposureTrajectory::between(&a, &b, interp);
            // Move the raw knots off the unit sphere to exercise normalization.
            for (i, v) in t.knots[0].joints.iter_mut().enumerate() {
                *v = v.scale(1.0 + 0.1 * i as f64);
            }
            let dir: Vec<f64> = (0..Pose::flat_len(2)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = 0.3;
            let f = |tr: &ExposureTrajectory| -> Result<f64> {
                Ok(tr.pose_at(u).to_flat().iter().zip(&dir).map(|(x, d)| x * d).sum())
            };
            let g = Pose::from_flat(&dir, 2).unwrap();
            let mut grads = vec![t.knots[0].zeros_like(); t.knots.len()];
            t.pose_at_backward(u, &g, &mut grads);
            let analytic: Vec<f64> = grads.iter().flat_map(|p| p.to_flat()).collect();
            let base = t.to_flat();
            let h = 1e-6;
            for i in 0..base.len() {
                let mut p = base.clone();
                let mut m = base.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (f(&t.from_flat(&p).unwrap()).unwrap() - f(&t.from_flat(&m).unwrap()).unwrap()) / (2.0 * h);
                assert!((fd - analytic[i]).abs() < 1e-7, "{interp} param {i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn position_encoding_is_bounded_and_deterministic() {
        let a = position_encoding(3, 5, 16, 8);
        assert_eq!(a, position_encoding(3, 5, 16, 8));
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, position_encoding(4, 5, 16, 8));
    }
}
