//! Kinematic chain, forward kinematics, skinning and Gaussian deformation
//! from canonical to observation space.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{
    build_covariance, rotation_matrix_backward, Mat3, Quaternion, RigidTransform, Vec3,
};
use crate::tinynet::DenseNet;

/// One joint of the chain as stored in a chain description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Index of the parent joint, `-1` for the root.
    pub parent: i64,
    /// Rest position relative to the parent joint (absolute for the root).
    pub offset: [f64; 3],
    /// End of this joint's bone segment, relative to the joint.
    pub tip: [f64; 3],
    /// Capsule radius of the bone.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainRecord", into = "ChainRecord")]
pub struct KinematicChain {
    joints: Vec<Joint>,
    /// Parents before children.
    order: Vec<usize>,
    rest: Vec<Vec3>,
}

#[derive(Serialize, Deserialize)]
struct ChainRecord {
    joints: Vec<Joint>,
}

impl TryFrom<ChainRecord> for KinematicChain {
    type Error = Error;
    fn try_from(r: ChainRecord) -> Result<Self> {
        KinematicChain::new(r.joints)
    }
}

impl From<KinematicChain> for ChainRecord {
    fn from(c: KinematicChain) -> Self {
        ChainRecord { joints: c.joints }
    }
}

impl KinematicChain {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        let k = joints.len();
        if k == 0 {
            return Err(Error::invalid("chain without joints"));
        }
        if joints[0].parent != -1 {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (i, j) in joints.iter().enumerate().skip(1) {
            if j.parent < 0 || j.parent as usize >= k || j.parent as usize == i {
                return Err(Error::invalid(format!("joint {i} has invalid parent {}", j.parent)));
            }
        }
        for (i, j) in joints.iter().enumerate() {
            if !(j.radius > 0.0 && j.radius.is_finite()) {
                return Err(Error::invalid(format!("joint {i} radius must be positive")));
            }
            if j.offset.iter().chain(&j.tip).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("joint {i} has non-finite geometry")));
            }
        }
        // Every joint must reach the root within k steps, otherwise the parent
        // graph has a cycle.
        for start in 1..k {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = joints[cur].parent as usize;
                steps += 1;
                if steps > k {
                    return Err(Error::invalid(format!("cyclic parent graph through joint {start}")));
                }
            }
        }
        let mut order = vec![0];
        let mut head = 0;
        while head < order.len() {
            let p = order[head];
            head += 1;
            for (c, j) in joints.iter().enumerate() {
                if j.parent == p as i64 {
                    order.push(c);
                }
            }
        }
        let mut rest = vec![Vec3::zeros(); k];
        for &j in &order {
            let off = Vec3::from(joints[j].offset);
            rest[j] = match joints[j].parent {
                -1 => off,
                p => rest[p as usize] + off,
            };
        }
        Ok(Self { joints, order, rest })
    }

    /// Six-joint desk-scale body: torso root, two two-bone arms and a head.
    pub fn humanoid() -> Self {
        let j = |name: &str, parent, offset, tip, radius| Joint {
            name: name.to_string(),
            parent,
            offset,
            tip,
            radius,
        };
        Self::new(vec![
            j("torso", -1, [0.0, 0.0, 0.0], [0.0, 0.75, 0.0], 0.17),
            j("l_upper_arm", 0, [-0.24, 0.68, 0.0], [-0.38, 0.0, 0.0], 0.07),
            j("l_forearm", 1, [-0.38, 0.0, 0.0], [-0.33, 0.0, 0.0], 0.06),
            j("r_upper_arm", 0, [0.24, 0.68, 0.0], [0.38, 0.0, 0.0], 0.07),
            j("r_forearm", 3, [0.38, 0.0, 0.0], [0.33, 0.0, 0.0], 0.06),
            j("head", 0, [0.0, 0.82, 0.0], [0.0, 0.2, 0.0], 0.12),
        ])
        .expect("built-in chain is valid")
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn parent(&self, k: usize) -> Option<usize> {
        match self.joints[k].parent {
            -1 => None,
            p => Some(p as usize),
        }
    }

    /// Joints in an order where parents precede children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Rest-pose world position of joint `k`.
    pub fn rest_position(&self, k: usize) -> Vec3 {
        self.rest[k]
    }

    /// Rest-pose world endpoints of bone `k`.
    pub fn bone_segment(&self, k: usize) -> (Vec3, Vec3) {
        let a = self.rest[k];
        (a, a + Vec3::from(self.joints[k].tip))
    }

    pub fn radius(&self, k: usize) -> f64 {
        self.joints[k].radius
    }

    /// Surface area of the capsule around bone `k`.
    pub fn capsule_area(&self, k: usize) -> f64 {
        let (a, b) = self.bone_segment(k);
        let r = self.radius(k);
        2.0 * std::f64::consts::PI * r * (b - a).norm() + 4.0 * std::f64::consts::PI * r * r
    }

    /// Width of the skinning prior; the mean capsule radius.
    pub fn skin_sigma(&self) -> f64 {
        self.joints.iter().map(|j| j.radius).sum::<f64>() / self.num_joints() as f64
    }

    /// Diagonal of the rest-pose bounding box including capsule radii.
    pub fn scene_diameter(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for k in 0..self.num_joints() {
            let (a, b) = self.bone_segment(k);
            let r = Vec3::repeat(self.radius(k));
            lo = lo.inf(&(a - r)).inf(&(b - r));
            hi = hi.sup(&(a + r)).sup(&(b + r));
        }
        (hi - lo).norm()
    }

    /// Distance from `p` to bone segment `k` in the rest pose.
    pub fn distance_to_bone(&self, k: usize, p: &Vec3) -> f64 {
        let (a, b) = self.bone_segment(k);
        point_segment_distance(p, &a, &b)
    }
}

pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Body configuration: root translation, root orientation and one local
/// rotation per joint (relative to its parent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub root_translation: Vec3,
    pub root_orientation: Quaternion,
    pub joints: Vec<Quaternion>,
}

impl Pose {
    pub fn rest(num_joints: usize) -> Self {
        Self {
            root_translation: Vec3::zeros(),
            root_orientation: Quaternion::IDENTITY,
            joints: vec![Quaternion::IDENTITY; num_joints],
        }
    }

    /// Number of scalars in the flat layout: translation, root, joints.
    pub fn flat_len(num_joints: usize) -> usize {
        7 + 4 * num_joints
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::flat_len(self.joints.len()));
        v.extend(self.root_translation.iter());
        v.extend(self.root_orientation.to_array());
        for q in &self.joints {
            v.extend(q.to_array());
        }
        v
    }

    pub fn from_flat(v: &[f64], num_joints: usize) -> Result<Self> {
        check_len("flat pose", Self::flat_len(num_joints), v.len())?;
        let q = |i: usize| Quaternion::new(v[i], v[i + 1], v[i + 2], v[i + 3]);
        Ok(Self {
            root_translation: Vec3::new(v[0], v[1], v[2]),
            root_orientation: q(3),
            joints: (0..num_joints).map(|k| q(7 + 4 * k)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            root_translation: Vec3::zeros(),
            root_orientation: Quaternion::new(0.0, 0.0, 0.0, 0.0),
            joints: vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); self.joints.len()],
        }
    }

    pub fn normalized(&self) -> Self {
        Self {
            root_translation: self.root_translation,
            root_orientation: self.root_orientation.normalize(),
            joints: self.joints.iter().map(|q| q.normalize()).collect(),
        }
    }

    pub fn validate(&self, chain: &KinematicChain) -> Result<()> {
        check_len("pose joints", chain.num_joints(), self.joints.len())?;
        let unit = |q: &Quaternion| (q.norm() - 1.0).abs() <= 1e-6;
        if !unit(&self.root_orientation) || !self.joints.iter().all(unit) {
            return Err(Error::invalid("pose quaternions must be unit length"));
        }
        if !self.root_translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose translation is not finite"));
        }
        Ok(())
    }

    /// Flattened joint quaternions; the pose-encoder input.
    pub fn joint_features(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|q| q.to_array()).collect()
    }
}

/// Intermediate world transforms kept for [`fk_backward`].
#[derive(Debug, Clone)]
pub struct FkTape {
    world: Vec<RigidTransform>,
    local: Vec<Mat3>,
    root: Mat3,
}

/// Skinning transform per joint: maps rest-pose world points to the posed
/// world, i.e. `world_k ∘ rest_k⁻¹`.
pub fn forward_kinematics(chain: &KinematicChain, pose: &Pose) -> Result<Vec<RigidTransform>> {
    Ok(forward_kinematics_taped(chain, pose)?.0)
}

pub fn forward_kinematics_taped(
    chain: &KinematicChain,
    pose: &Pose,
) -> Result<(Vec<RigidTransform>, FkTape)> {
    let k = chain.num_joints();
    check_len("pose joints", k, pose.joints.len())?;
    let local: Vec<Mat3> = pose.joints.iter().map(|q| q.to_rotation_matrix()).collect();
    let root = pose.root_orientation.to_rotation_matrix();
    let mut world = vec![RigidTransform::IDENTITY; k];
    for &j in chain.topological_order() {
        let off = Vec3::from(chain.joints[j].offset);
        world[j] = match chain.parent(j) {
            None => RigidTransform::new(root * local[j], off + pose.root_translation),
            Some(p) => {
                let pw = world[p];
                RigidTransform::new(pw.rotation * local[j], pw.translation + pw.rotation * off)
            }
        };
    }
    let skinning = (0..k)
        .map(|j| {
            let w = world[j];
            RigidTransform::new(w.rotation, w.translation - w.rotation * chain.rest_position(j))
        })
        .collect();
    Ok((skinning, FkTape { world, local, root }))
}

/// Gradients of one pose, laid out like [`Pose`].
pub type PoseGrad = Pose;

/// Back-propagates gradients on the skinning transforms to the pose.
/// The returned quaternion gradients are taken with respect to the stored
/// (unit) quaternions through the rotation-matrix formula.
pub fn fk_backward(
    chain: &KinematicChain,
    pose: &Pose,
    tape: &FkTape,
    d_rot: &[Mat3],
    d_trans: &[Vec3],
) -> PoseGrad {
    let k = chain.num_joints();
    let mut dw_rot: Vec<Mat3> = (0..k)
        .map(|j| d_rot[j] - d_trans[j] * chain.rest_position(j).transpose())
        .collect();
    let mut dw_trans: Vec<Vec3> = d_trans.to_vec();
    let mut grad = pose.zeros_like();
    for &j in chain.topological_order().iter().rev() {
        let off = Vec3::from(chain.joints[j].offset);
        let d_local;
        match chain.parent(j) {
            None => {
                d_local = tape.root.transpose() * dw_rot[j];
                let d_root = dw_rot[j] * tape.local[j].transpose();
                grad.root_orientation = rotation_matrix_backward(pose.root_orientation, &d_root);
                grad.root_translation = dw_trans[j];
            }
            Some(p) => {
                let pw = tape.world[p];
                d_local = pw.rotation.transpose() * dw_rot[j];
                let up = dw_rot[j] * tape.local[j].transpose() + dw_trans[j] * off.transpose();
                dw_rot[p] += up;
                let dt = dw_trans[j];
                dw_trans[p] += dt;
            }
        }
        grad.joints[j] = rotation_matrix_backward(pose.joints[j], &d_local);
    }
    grad
}

/// Per-point convex skinning weights over the chain's joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights(pub Vec<f64>);

impl SkinningWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `dL/dz` for `w = softmax(z)` given `dL/dw`.
pub(crate) fn softmax_backward(w: &[f64], dw: &[f64], dz: &mut [f64]) {
    let dot: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
    for ((d, wi), dwi) in dz.iter_mut().zip(w).zip(dw) {
        *d = wi * (dwi - dot);
    }
}

/// Distance-based prior: softmax of `-d_k² / (2σ²)` over bone segments.
pub fn prior_skin_weights(chain: &KinematicChain, x: &Vec3) -> SkinningWeights {
    let sigma = chain.skin_sigma();
    let mut z: Vec<f64> = (0..chain.num_joints())
        .map(|k| {
            let d = chain.distance_to_bone(k, x);
            -d * d / (2.0 * sigma * sigma)
        })
        .collect();
    softmax_in_place(&mut z);
    SkinningWeights(z)
}

pub fn skinning_weights_learned(net: &DenseNet, x: &Vec3) -> Result<SkinningWeights> {
    let (mut z, _) = net.forward(x.as_slice())?;
    softmax_in_place(&mut z);
    Ok(SkinningWeights(z))
}

/// Raw non-rigid offsets predicted for one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonRigidOffsets {
    pub dx: Vec3,
    pub ds: Vec3,
    pub dr: Vec3,
}

impl NonRigidOffsets {
    pub const ZERO: NonRigidOffsets = NonRigidOffsets {
        dx: Vec3::new(0.0, 0.0, 0.0),
        ds: Vec3::new(0.0, 0.0, 0.0),
        dr: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            dx: Vec3::new(v[0], v[1], v[2]),
            ds: Vec3::new(v[3], v[4], v[5]),
            dr: Vec3::new(v[6], v[7], v[8]),
        }
    }
}

/// Network input is `[x_c ‖ l_pose]`; outputs split 3/3/3.
pub fn nonrigid_deform(net: &DenseNet, x_c: &Vec3, latent: &[f64]) -> Result<NonRigidOffsets> {
    check_len("non-rigid net output", 9, net.output_width())?;
    let mut input = x_c.as_slice().to_vec();
    input.extend_from_slice(latent);
    let (out, _) = net.forward(&input)?;
    Ok(NonRigidOffsets::from_slice(&out))
}

/// Geometric part of a Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGeom {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quaternion,
}

impl GaussianGeom {
    pub fn covariance(&self) -> Mat3 {
        build_covariance(&self.log_scale, self.rotation)
    }
}

/// Rotation increment `normalize([1, Δr])`.
pub fn delta_rotation(dr: &Vec3) -> Quaternion {
    Quaternion::new(1.0, dr.x, dr.y, dr.z).normalize()
}

pub fn apply_nonrigid(g: &GaussianGeom, off: &NonRigidOffsets) -> GaussianGeom {
    GaussianGeom {
        position: g.position + off.dx,
        log_scale: g.log_scale + off.ds,
        rotation: g.rotation * delta_rotation(&off.dr),
    }
}

/// Linear blend of the skinning transforms: `(Σ w_k R_k, Σ w_k t_k)`. The
/// blended matrix is not re-orthonormalized.
pub fn blend_transforms(weights: &[f64], transforms: &[RigidTransform]) -> (Mat3, Vec3) {
    let mut m = Mat3::zeros();
    let mut t = Vec3::zeros();
    for (w, tr) in weights.iter().zip(transforms) {
        m += tr.rotation * *w;
        t += tr.translation * *w;
    }
    (m, t)
}

/// A Gaussian mapped to observation space together with its blend transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedGeom {
    pub position: Vec3,
    pub covariance: Mat3,
    pub blend: Mat3,
    pub blend_translation: Vec3,
}

pub fn apply_rigid_lbs(
    g: &GaussianGeom,
    weights: &SkinningWeights,
    transforms: &[RigidTransform],
) -> Result<ObservedGeom> {
    check_len("skinning weights", transforms.len(), weights.0.len())?;
    let (m, t) = blend_transforms(&weights.0, transforms);
    let cov = m * g.covariance() * m.transpose();
    Ok(ObservedGeom {
        position: m * g.position + t,
        covariance: cov,
        blend: m,
        blend_translation: t,
    })
}
