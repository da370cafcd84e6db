//! The articulated avatar: canonical Gaussians plus the networks that pose,
//! deform and shade them. [`AvatarModel::deform`] maps the cloud into
//! observation space for one pose and keeps what
//! [`AvatarModel::deform_backward`] needs to send gradients back to every
//! parameter and to the pose itself.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::articulation::{
    fk_backward, forward_kinematics_taped, softmax_backward, softmax_in_place, FkTape, KinematicChain, Pose,
    PoseGrad,
};
use crate::blur::{FUSION_INPUT_DIM, LATENT_DIM};
use crate::error::{check_len, Error, Result};
use crate::geom::{
    build_covariance, build_covariance_backward, normalize_backward, quat_mul_backward, Mat3, Quaternion,
    RigidTransform, Vec3,
};
use crate::imagebuf::ImageBuffer;
use crate::render::{render, Camera, RenderGrads, RenderSettings, RenderTape, SplatInputs};
use crate::scene::{init_from_chain_surface, sigmoid, GaussianCloud, DEFAULT_FEATURE_DIM};
use crate::tinynet::{DenseNet, Tape};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_gaussians: usize,
    pub feature_dim: usize,
    pub nonrigid_hidden: Vec<usize>,
    pub skin_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub fusion_hidden: Vec<usize>,
    /// Whether the pose-conditioned non-rigid offsets are applied.
    pub nonrigid: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_gaussians: 1500,
            feature_dim: DEFAULT_FEATURE_DIM,
            nonrigid_hidden: vec![128; 3],
            skin_hidden: vec![128; 4],
            color_hidden: vec![64],
            fusion_hidden: vec![64; 4],
            nonrigid: true,
        }
    }
}

impl ModelConfig {
    /// Narrow networks for quick runs.
    pub fn compact() -> Self {
        Self {
            num_gaussians: 800,
            nonrigid_hidden: vec![32; 2],
            skin_hidden: vec![32; 2],
            color_hidden: vec![32],
            fusion_hidden: vec![32; 2],
            ..Self::default()
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvatarModel {
    pub format_version: u32,
    pub config: ModelConfig,
    pub chain: KinematicChain,
    pub cloud: GaussianCloud,
    /// Joint quaternions (4K) to the pose latent; a single linear layer.
    pub pose_encoder: DenseNet,
    /// `[x_c ‖ latent]` to `(Δx, Δs, Δr)`.
    pub nonrigid_net: DenseNet,
    /// Position to skinning logits (K).
    pub skin_net: DenseNet,
    /// `[feature ‖ canonical view dir ‖ latent]` to RGB logits.
    pub color_net: DenseNet,
    /// `[latent ‖ frame embedding ‖ position code ‖ rgb]` to a mask logit.
    pub fusion_net: DenseNet,
    /// One learned embedding per training frame, row-major.
    pub embeddings: Vec<f64>,
    pub num_frames: usize,
    pub render: RenderSettings,
}

impl AvatarModel {
    pub fn new(
        chain: KinematicChain,
        config: ModelConfig,
        num_frames: usize,
        render: RenderSettings,
        seed: u64,
    ) -> Result<Self> {
        let cloud = init_from_chain_surface(&chain, config.num_gaussians, config.feature_dim, seed)?;
        Self::with_cloud(chain, cloud, config, num_frames, render, seed)
    }

    pub fn with_cloud(
        chain: KinematicChain,
        cloud: GaussianCloud,
        config: ModelConfig,
        num_frames: usize,
        render: RenderSettings,
        seed: u64,
    ) -> Result<Self> {
        check_len("cloud feature width", config.feature_dim, cloud.feature_dim())?;
        let k = chain.num_joints();
        let f = config.feature_dim;
        // Offset the stream so nets do not reuse the cloud's random numbers.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let pose_encoder = DenseNet::mlp(&[4 * k, LATENT_DIM], &mut rng)?;
        let nonrigid_net =
            DenseNet::mlp(&widths(3 + LATENT_DIM, &config.nonrigid_hidden, 9), &mut rng)?.with_zero_output_layer();
        let skin_net = DenseNet::mlp(&widths(3, &config.skin_hidden, k), &mut rng)?;
        let color_net = DenseNet::mlp(&widths(f + 3 + LATENT_DIM, &config.color_hidden, 3), &mut rng)?;
        let fusion_net =
            DenseNet::mlp(&widths(FUSION_INPUT_DIM, &config.fusion_hidden, 1), &mut rng)?.with_zero_output_layer();
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            chain,
            cloud,
            pose_encoder,
            nonrigid_net,
            skin_net,
            color_net,
            fusion_net,
            embeddings: vec![0.0; num_frames * LATENT_DIM],
            num_frames,
            render,
        })
    }

    pub fn embedding(&self, frame: usize) -> &[f64] {
        &self.embeddings[frame * LATENT_DIM..(frame + 1) * LATENT_DIM]
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format version {}",
                self.format_version
            )));
        }
        self.cloud.validate()?;
        let k = self.chain.num_joints();
        let f = self.cloud.feature_dim();
        check_len("pose encoder input", 4 * k, self.pose_encoder.input_width())?;
        check_len("pose encoder output", LATENT_DIM, self.pose_encoder.output_width())?;
        check_len("non-rigid net input", 3 + LATENT_DIM, self.nonrigid_net.input_width())?;
        check_len("non-rigid net output", 9, self.nonrigid_net.output_width())?;
        check_len("skinning net input", 3, self.skin_net.input_width())?;
        check_len("skinning net output", k, self.skin_net.output_width())?;
        check_len("colour net input", f + 3 + LATENT_DIM, self.color_net.input_width())?;
        check_len("colour net output", 3, self.color_net.output_width())?;
        check_len("fusion net input", FUSION_INPUT_DIM, self.fusion_net.input_width())?;
        check_len("fusion net output", 1, self.fusion_net.output_width())?;
        check_len("frame embeddings", self.num_frames * LATENT_DIM, self.embeddings.len())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        model.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }

    /// Pose latent of a pose.
    pub fn pose_latent(&self, pose: &Pose) -> Result<Vec<f64>> {
        Ok(self.pose_encoder.forward(&pose.joint_features())?.0)
    }

    /// Maps the canonical cloud into observation space for `pose`, shading it
    /// for a camera centred at `eye`.
    pub fn deform(&self, pose: &Pose, eye: &Vec3) -> Result<Deformed> {
        let chain = &self.chain;
        let cloud = &self.cloud;
        let n = cloud.len();
        let k = chain.num_joints();
        let f = cloud.feature_dim();
        let (transforms, fk_tape) = forward_kinematics_taped(chain, pose)?;
        let enc_tape = self.pose_encoder.forward_batch(&pose.joint_features(), 1)?;
        let latent = enc_tape.output().to_vec();

        let nr_tape = if self.config.nonrigid {
            let mut input = Vec::with_capacity(n * (3 + LATENT_DIM));
            for i in 0..n {
                input.extend_from_slice(&cloud.positions[3 * i..3 * i + 3]);
                input.extend_from_slice(&latent);
            }
            Some(self.nonrigid_net.forward_batch(&input, n)?)
        } else {
            None
        };
        let offsets = |i: usize| -> [f64; 9] {
            match &nr_tape {
                Some(t) => t.output()[9 * i..9 * i + 9].try_into().expect("nine outputs"),
                None => [0.0; 9],
            }
        };

        let mut g = Vec::with_capacity(n);
        let mut skin_input = Vec::with_capacity(3 * n);
        for i in 0..n {
            let o = offsets(i);
            let rc = cloud.rotation(i);
            let dq_raw = Quaternion::new(1.0, o[6], o[7], o[8]);
            let r_nr = rc.normalize() * dq_raw.normalize();
            let x_nr = cloud.position(i) + Vec3::new(o[0], o[1], o[2]);
            let ls_nr = cloud.log_scale(i) + Vec3::new(o[3], o[4], o[5]);
            skin_input.extend(x_nr.iter());
            g.push(PerGaussian {
                x_nr,
                ls_nr,
                r_nr,
                dq_raw,
                cov_nr: build_covariance(&ls_nr, r_nr),
                blend: Mat3::zeros(),
                view: Vec3::zeros(),
                view_dist: 0.0,
            });
        }
        let skin_tape = self.skin_net.forward_batch(&skin_input, n)?;
        let mut weights = skin_tape.output().to_vec();
        for row in weights.chunks_exact_mut(k) {
            softmax_in_place(row);
        }

        let mut positions = Vec::with_capacity(n);
        let mut covariances = Vec::with_capacity(n);
        let mut color_input = Vec::with_capacity(n * (f + 3 + LATENT_DIM));
        for (i, gi) in g.iter_mut().enumerate() {
            let w = &weights[k * i..k * (i + 1)];
            let mut m = Mat3::zeros();
            let mut t = Vec3::zeros();
            for (wk, tr) in w.iter().zip(&transforms) {
                m += tr.rotation * *wk;
                t += tr.translation * *wk;
            }
            let x_o = m * gi.x_nr + t;
            let diff = x_o - eye;
            let dist = diff.norm();
            let view = if dist > 0.0 { diff / dist } else { Vec3::z() };
            gi.blend = m;
            gi.view = view;
            gi.view_dist = dist;
            positions.push(x_o);
            covariances.push(m * gi.cov_nr * m.transpose());
            color_input.extend_from_slice(cloud.feature(i));
            color_input.extend((m.transpose() * view).iter());
            color_input.extend_from_slice(&latent);
        }
        let color_tape = self.color_net.forward_batch(&color_input, n)?;
        let colors = color_tape
            .output()
            .chunks_exact(3)
            .map(|c| [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])])
            .collect();
        let opacities = (0..n).map(|i| cloud.opacity(i)).collect();

        Ok(Deformed {
            pose: pose.clone(),
            transforms,
            fk_tape,
            enc_tape,
            latent,
            nr_tape,
            skin_tape,
            weights,
            per_gaussian: g,
            color_tape,
            positions,
            covariances,
            opacities,
            colors,
        })
    }

    /// Renders the model at `pose` from `cam`.
    pub fn render_pose(&self, pose: &Pose, cam: &Camera) -> Result<(ImageBuffer, Deformed, RenderTape)> {
        let d = self.deform(pose, &cam.center())?;
        let (img, tape) = render(cam, &d.splat_inputs(), &self.render)?;
        Ok((img, d, tape))
    }

    /// Sharp render for inference; never touches the blur model.
    pub fn render_sharp(&self, pose: &Pose, cam: &Camera) -> Result<ImageBuffer> {
        Ok(self.render_pose(pose, cam)?.0)
    }

    /// Sends upstream gradients on the observation-space Gaussians back to
    /// the model parameters (accumulated into `grads`) and returns the
    /// gradient w.r.t. the pose.
    pub fn deform_backward(&self, d: &Deformed, up: &DeformUpstream<'_>, grads: &mut ModelGrads) -> Result<PoseGrad> {
        let cloud = &self.cloud;
        let n = cloud.len();
        let k = self.chain.num_joints();
        let f = cloud.feature_dim();
        check_len("deformed cloud", n, d.positions.len())?;
        check_len("position gradient", n, up.render.positions.len())?;
        grads.check(self)?;

        // Colour net.
        let mut dz = Vec::with_capacity(3 * n);
        for (c, dc) in d.colors.iter().zip(&up.render.colors) {
            for ch in 0..3 {
                dz.push(dc[ch] * c[ch] * (1.0 - c[ch]));
            }
        }
        let color_in = self.color_net.backward_batch(&d.color_tape, &dz, &mut grads.color_net)?;
        let cw = f + 3 + LATENT_DIM;
        let mut d_latent = vec![0.0; LATENT_DIM];
        if let Some(extra) = up.latent {
            check_len("latent gradient", LATENT_DIM, extra.len())?;
            for (a, b) in d_latent.iter_mut().zip(extra) {
                *a += b;
            }
        }

        let mut d_rot = vec![Mat3::zeros(); k];
        let mut d_trans = vec![Vec3::zeros(); k];
        let mut d_logits = vec![0.0; n * k];
        let mut d_x_nr = vec![Vec3::zeros(); n];
        let mut d_ls_nr = vec![Vec3::zeros(); n];
        let mut d_r_nr = vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); n];
        let mut dw = vec![0.0; k];
        for i in 0..n {
            let gi = &d.per_gaussian[i];
            let row = &color_in[cw * i..cw * (i + 1)];
            for (a, b) in grads.features[f * i..f * (i + 1)].iter_mut().zip(&row[..f]) {
                *a += b;
            }
            for (a, b) in d_latent.iter_mut().zip(&row[f + 3..]) {
                *a += b;
            }
            let dv = Vec3::new(row[f], row[f + 1], row[f + 2]);
            let m = gi.blend;
            let mut dm = gi.view * dv.transpose();
            let dd = m * dv;
            let mut dpos = up.render.positions[i];
            if gi.view_dist > 0.0 {
                dpos += (dd - gi.view * gi.view.dot(&dd)) / gi.view_dist;
            }
            let gcov = up.render.covariances[i];
            dm += (gcov + gcov.transpose()) * m * gi.cov_nr;
            let da = m.transpose() * gcov * m;
            let (dls, drq) = build_covariance_backward(&gi.ls_nr, gi.r_nr, &da);
            d_ls_nr[i] = dls;
            d_r_nr[i] = drq;
            dm += dpos * gi.x_nr.transpose();
            d_x_nr[i] = m.transpose() * dpos;

            let w = &d.weights[k * i..k * (i + 1)];
            for j in 0..k {
                let tr = &d.transforms[j];
                dw[j] = dm.component_mul(&tr.rotation).sum() + dpos.dot(&tr.translation);
                if let Some(extra) = up.skin_weights {
                    dw[j] += extra[k * i + j];
                }
                d_rot[j] += dm * w[j];
                d_trans[j] += dpos * w[j];
            }
            softmax_backward(w, &dw, &mut d_logits[k * i..k * (i + 1)]);

            grads.opacity_logits[i] += up.render.opacities[i] * d.opacities[i] * (1.0 - d.opacities[i]);
        }
        if let Some(extra) = up.skin_weights {
            check_len("skin weight gradient", n * k, extra.len())?;
        }
        let skin_in = self.skin_net.backward_batch(&d.skin_tape, &d_logits, &mut grads.skin_net)?;

        let mut d_offsets = vec![0.0; 9 * n];
        for i in 0..n {
            let gi = &d.per_gaussian[i];
            let dx = d_x_nr[i] + Vec3::from_column_slice(&skin_in[3 * i..3 * i + 3]);
            let rc = cloud.rotation(i);
            let (d_rc_hat, d_dq) = quat_mul_backward(rc.normalize(), gi.dq_raw.normalize(), d_r_nr[i]);
            let d_rc = normalize_backward(rc, d_rc_hat);
            let d_dq_raw = normalize_backward(gi.dq_raw, d_dq);
            for c in 0..3 {
                grads.positions[3 * i + c] += dx[c];
                grads.log_scales[3 * i + c] += d_ls_nr[i][c];
            }
            for (c, v) in d_rc.to_array().iter().enumerate() {
                grads.rotations[4 * i + c] += v;
            }
            let o = &mut d_offsets[9 * i..9 * i + 9];
            o[..3].copy_from_slice(dx.as_slice());
            o[3..6].copy_from_slice(d_ls_nr[i].as_slice());
            o[6] = d_dq_raw.x;
            o[7] = d_dq_raw.y;
            o[8] = d_dq_raw.z;
        }
        if let Some(tape) = &d.nr_tape {
            let nr_in = self.nonrigid_net.backward_batch(tape, &d_offsets, &mut grads.nonrigid_net)?;
            let width = 3 + LATENT_DIM;
            for i in 0..n {
                let row = &nr_in[width * i..width * (i + 1)];
                for c in 0..3 {
                    grads.positions[3 * i + c] += row[c];
                }
                for (a, b) in d_latent.iter_mut().zip(&row[3..]) {
                    *a += b;
                }
            }
        }

        let d_joint_feats = self.pose_encoder.backward_batch(&d.enc_tape, &d_latent, &mut grads.pose_encoder)?;
        let mut pose_grad = fk_backward(&self.chain, &d.pose, &d.fk_tape, &d_rot, &d_trans);
        for (j, q) in pose_grad.joints.iter_mut().enumerate() {
            let c = &d_joint_feats[4 * j..4 * j + 4];
            *q = *q + Quaternion::new(c[0], c[1], c[2], c[3]);
        }
        Ok(pose_grad)
    }
}

#[derive(Debug, Clone)]
struct PerGaussian {
    x_nr: Vec3,
    ls_nr: Vec3,
    r_nr: Quaternion,
    dq_raw: Quaternion,
    cov_nr: Mat3,
    blend: Mat3,
    view: Vec3,
    view_dist: f64,
}

/// Observation-space cloud for one pose, with its forward tape.
#[derive(Debug, Clone)]
pub struct Deformed {
    pub pose: Pose,
    pub transforms: Vec<RigidTransform>,
    fk_tape: FkTape,
    enc_tape: Tape,
    pub latent: Vec<f64>,
    nr_tape: Option<Tape>,
    skin_tape: Tape,
    /// Skinning weights, `K` per Gaussian.
    pub weights: Vec<f64>,
    per_gaussian: Vec<PerGaussian>,
    color_tape: Tape,
    pub positions: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl Deformed {
    pub fn splat_inputs(&self) -> SplatInputs<'_> {
        SplatInputs {
            positions: &self.positions,
            covariances: &self.covariances,
            opacities: &self.opacities,
            colors: &self.colors,
        }
    }

    /// Position after the non-rigid offsets, before skinning.
    pub fn nonrigid_position(&self, i: usize) -> Vec3 {
        self.per_gaussian[i].x_nr
    }
}

/// Upstream gradients entering [`AvatarModel::deform_backward`].
#[derive(Debug, Clone, Copy)]
pub struct DeformUpstream<'a> {
    pub render: &'a RenderGrads,
    /// Extra `dL/dw`, `K` per Gaussian.
    pub skin_weights: Option<&'a [f64]>,
    /// Extra `dL/d latent`.
    pub latent: Option<&'a [f64]>,
}

/// Parameter gradients, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub features: Vec<f64>,
    pub pose_encoder: Vec<f64>,
    pub nonrigid_net: Vec<f64>,
    pub skin_net: Vec<f64>,
    pub color_net: Vec<f64>,
    pub fusion_net: Vec<f64>,
    pub embeddings: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(model: &AvatarModel) -> Self {
        let c = &model.cloud;
        Self {
            positions: vec![0.0; c.positions.len()],
            log_scales: vec![0.0; c.log_scales.len()],
            rotations: vec![0.0; c.rotations.len()],
            opacity_logits: vec![0.0; c.opacity_logits.len()],
            features: vec![0.0; c.features.len()],
            pose_encoder: vec![0.0; model.pose_encoder.num_params()],
            nonrigid_net: vec![0.0; model.nonrigid_net.num_params()],
            skin_net: vec![0.0; model.skin_net.num_params()],
            color_net: vec![0.0; model.color_net.num_params()],
            fusion_net: vec![0.0; model.fusion_net.num_params()],
            embeddings: vec![0.0; model.embeddings.len()],
        }
    }

    fn check(&self, model: &AvatarModel) -> Result<()> {
        check_len("position gradients", model.cloud.positions.len(), self.positions.len())?;
        check_len("feature gradients", model.cloud.features.len(), self.features.len())?;
        Ok(())
    }

    /// Named views of every group, in a fixed order.
    pub fn groups(&self) -> [(&'static str, &[f64]); 11] {
        [
            ("positions", &self.positions),
            ("log_scales", &self.log_scales),
            ("rotations", &self.rotations),
            ("opacity_logits", &self.opacity_logits),
            ("features", &self.features),
            ("pose_encoder", &self.pose_encoder),
            ("nonrigid_net", &self.nonrigid_net),
            ("skin_net", &self.skin_net),
            ("color_net", &self.color_net),
            ("fusion_net", &self.fusion_net),
            ("embeddings", &self.embeddings),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

/// Mutable views of the model parameters in the order of
/// [`ModelGrads::groups`].
pub fn param_groups_mut(model: &mut AvatarModel) -> [&mut [f64]; 11] {
    [
        &mut model.cloud.positions,
        &mut model.cloud.log_scales,
        &mut model.cloud.rotations,
        &mut model.cloud.opacity_logits,
        &mut model.cloud.features,
        model.pose_encoder.params_mut(),
        model.nonrigid_net.params_mut(),
        model.skin_net.params_mut(),
        model.color_net.params_mut(),
        model.fusion_net.params_mut(),
        &mut model.embeddings,
    ]
}
