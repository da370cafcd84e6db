//! Canonical-space Gaussian cloud: storage, surface initialization,
//! neighbour graphs and adaptive density control.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::articulation::KinematicChain;
use crate::error::{check_len, Error, Result};
use crate::geom::{build_covariance, Mat3, Quaternion, Vec3};

pub const DEFAULT_FEATURE_DIM: usize = 16;
pub const INIT_OPACITY: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Structure-of-arrays Gaussian cloud. Every field is a flat row-major
/// buffer so optimizers can treat each one as a parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CloudRecord", into = "CloudRecord")]
pub struct GaussianCloud {
    feature_dim: usize,
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CloudRecord {
    count: usize,
    feature_dim: usize,
    positions: Vec<f64>,
    log_scales: Vec<f64>,
    rotations: Vec<f64>,
    opacity_logits: Vec<f64>,
    features: Vec<f64>,
}

impl From<GaussianCloud> for CloudRecord {
    fn from(c: GaussianCloud) -> Self {
        CloudRecord {
            count: c.len(),
            feature_dim: c.feature_dim,
            positions: c.positions,
            log_scales: c.log_scales,
            rotations: c.rotations,
            opacity_logits: c.opacity_logits,
            features: c.features,
        }
    }
}

impl TryFrom<CloudRecord> for GaussianCloud {
    type Error = Error;
    fn try_from(r: CloudRecord) -> Result<Self> {
        let c = GaussianCloud {
            feature_dim: r.feature_dim,
            positions: r.positions,
            log_scales: r.log_scales,
            rotations: r.rotations,
            opacity_logits: r.opacity_logits,
            features: r.features,
        };
        check_len("cloud count", r.count, c.len())?;
        c.check_shapes()?;
        Ok(c)
    }
}

/// One Gaussian pulled out of the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quaternion,
    pub opacity_logit: f64,
    pub features: Vec<f64>,
}

impl GaussianCloud {
    pub fn empty(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            positions: vec![],
            log_scales: vec![],
            rotations: vec![],
            opacity_logits: vec![],
            features: vec![],
        }
    }

    pub fn from_gaussians(feature_dim: usize, gaussians: &[Gaussian]) -> Result<Self> {
        let mut c = Self::empty(feature_dim);
        for g in gaussians {
            check_len("gaussian features", feature_dim, g.features.len())?;
            c.push(g);
        }
        Ok(c)
    }

    pub fn push(&mut self, g: &Gaussian) {
        self.positions.extend(g.position.iter());
        self.log_scales.extend(g.log_scale.iter());
        self.rotations.extend(g.rotation.to_array());
        self.opacity_logits.push(g.opacity_logit);
        self.features.extend_from_slice(&g.features);
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn log_scale(&self, i: usize) -> Vec3 {
        Vec3::from_column_slice(&self.log_scales[3 * i..3 * i + 3])
    }

    pub fn rotation(&self, i: usize) -> Quaternion {
        let r = &self.rotations[4 * i..4 * i + 4];
        Quaternion::new(r[0], r[1], r[2], r[3])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[self.feature_dim * i..self.feature_dim * (i + 1)]
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        build_covariance(&self.log_scale(i), self.rotation(i))
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.position(i),
            log_scale: self.log_scale(i),
            rotation: self.rotation(i),
            opacity_logit: self.opacity_logits[i],
            features: self.feature(i).to_vec(),
        }
    }

    pub fn positions_vec(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.len();
        check_len("cloud positions", 3 * n, self.positions.len())?;
        check_len("cloud log_scales", 3 * n, self.log_scales.len())?;
        check_len("cloud rotations", 4 * n, self.rotations.len())?;
        check_len("cloud features", self.feature_dim * n, self.features.len())?;
        Ok(())
    }

    /// Checks shapes, finiteness and unit rotations.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if self.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let finite = [&self.positions, &self.log_scales, &self.rotations, &self.opacity_logits, &self.features]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::invalid("cloud contains non-finite parameters"));
        }
        for i in 0..self.len() {
            if (self.rotation(i).norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("rotation {i} is not unit length")));
            }
        }
        Ok(())
    }

    /// Renormalizes every rotation quaternion in place.
    pub fn normalize_rotations(&mut self) {
        for r in self.rotations.chunks_exact_mut(4) {
            let q = Quaternion::new(r[0], r[1], r[2], r[3]).normalize();
            r.copy_from_slice(&q.to_array());
        }
    }

    /// Caps every scale at `max_scale`.
    pub fn clamp_scales(&mut self, max_scale: f64) {
        let cap = max_scale.ln();
        for s in &mut self.log_scales {
            *s = s.min(cap);
        }
    }

    /// Keeps the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.feature_dim);
        for &i in indices {
            out.push(&self.gaussian(i));
        }
        out
    }
}

fn orthonormal_pair(axis: &Vec3) -> (Vec3, Vec3) {
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    (u, axis.cross(&u))
}

/// Uniform sample on the surface of capsule `k` of the rest pose.
fn sample_capsule(chain: &KinematicChain, k: usize, rng: &mut impl Rng) -> Vec3 {
    let (a, b) = chain.bone_segment(k);
    let r = chain.radius(k);
    let len = (b - a).norm();
    let axis = if len > 0.0 { (b - a) / len } else { Vec3::y() };
    let side = 2.0 * std::f64::consts::PI * r * len;
    let caps = 4.0 * std::f64::consts::PI * r * r;
    if rng.random::<f64>() * (side + caps) < side {
        let (u, v) = orthonormal_pair(&axis);
        let phi = rng.random::<f64>() * std::f64::consts::TAU;
        a + (b - a) * rng.random::<f64>() + (u * phi.cos() + v * phi.sin()) * r
    } else {
        let d = loop {
            let d = Vec3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            if let Some(d) = d.try_normalize(1e-9) {
                break d;
            }
        };
        let center = if d.dot(&axis) < 0.0 { a } else { b };
        center + d * r
    }
}

/// Points sampled uniformly by area over the chain's rest-pose capsules,
/// each tagged with its capsule.
pub fn sample_chain_surface(chain: &KinematicChain, count: usize, rng: &mut impl Rng) -> Vec<(usize, Vec3)> {
    let areas: Vec<f64> = (0..chain.num_joints()).map(|k| chain.capsule_area(k)).collect();
    let pick = WeightedIndex::new(&areas).expect("capsule areas are positive");
    (0..count)
        .map(|_| {
            let k = pick.sample(rng);
            (k, sample_capsule(chain, k, rng))
        })
        .collect()
}

/// Indices of the `k` nearest other points for every point (ties by index).
pub fn knn(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let k = k.min(points.len().saturating_sub(1));
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if best.len() < k || (d, j) < *best.last().expect("non-empty") {
                    let pos = best.partition_point(|&e| e < (d, j));
                    best.insert(pos, (d, j));
                    best.truncate(k);
                }
            }
            best.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Unique undirected edges `(i, j)` with `i < j` of a k-NN graph.
pub fn knn_edges(points: &[Vec3], k: usize) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = knn(points, k)
        .into_iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.into_iter().map(move |j| (i.min(j), i.max(j))))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Samples `count` Gaussians on the chain's capsules. Scales start at the
/// mean distance to the three nearest neighbours, rotations at identity and
/// opacities at 0.1.
pub fn init_from_chain_surface(
    chain: &KinematicChain,
    count: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::invalid("cloud size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec3> = sample_chain_surface(chain, count, &mut rng)
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let fallback = 0.5 * chain.skin_sigma();
    let scales: Vec<f64> = knn(&points, 3)
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            if nb.is_empty() {
                fallback
            } else {
                nb.iter().map(|&j| (points[i] - points[j]).norm()).sum::<f64>() / nb.len() as f64
            }
        })
        .collect();
    let mut cloud = GaussianCloud::empty(feature_dim);
    for (p, s) in points.iter().zip(scales) {
        let ls = s.max(1e-6).ln();
        cloud.push(&Gaussian {
            position: *p,
            log_scale: Vec3::repeat(ls),
            rotation: Quaternion::IDENTITY,
            opacity_logit: logit(INIT_OPACITY),
            features: (0..feature_dim)
                .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        });
    }
    Ok(cloud)
}

/// Screen-space gradient statistics gathered between densification steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub grad_norm_sum: Vec<f64>,
    pub counts: Vec<u32>,
    /// Summed canonical-position gradients; used as the clone direction.
    pub position_grad_sum: Vec<Vec3>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; n],
            counts: vec![0; n],
            position_grad_sum: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Records one observation of Gaussian `i`; `ndc_grad` is the gradient
    /// w.r.t. its projected centre in normalized device units.
    pub fn record(&mut self, i: usize, ndc_grad: [f64; 2], position_grad: Vec3) {
        self.grad_norm_sum[i] += ndc_grad[0].hypot(ndc_grad[1]);
        self.counts[i] += 1;
        self.position_grad_sum[i] += position_grad;
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.counts[i] == 0 {
            0.0
        } else {
            self.grad_norm_sum[i] / self.counts[i] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Mean screen-space gradient above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Split instead of clone above this fraction of the scene diameter.
    pub split_scale_fraction: f64,
    pub prune_opacity: f64,
    /// Prune above this fraction of the scene diameter.
    pub prune_scale_fraction: f64,
    pub split_divisor: f64,
    pub interval: usize,
    pub start: usize,
    pub stop: usize,
    /// Densification is skipped once the cloud holds this many Gaussians.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            split_scale_fraction: 0.01,
            prune_opacity: 0.005,
            prune_scale_fraction: 0.3,
            split_divisor: 1.6,
            interval: 500,
            start: 500,
            stop: 10_000,
            max_gaussians: 20_000,
        }
    }
}

/// Result of [`densify_and_prune`]: the new cloud and, for each new row, the
/// old row it continues (`None` for freshly created Gaussians).
#[derive(Debug, Clone)]
pub struct Densified {
    pub cloud: GaussianCloud,
    pub sources: Vec<Option<usize>>,
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
}

pub fn densify_and_prune(
    cloud: &GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    scene_diameter: f64,
) -> Result<Densified> {
    check_len("densify stats", cloud.len(), stats.len())?;
    let split_above = cfg.split_scale_fraction * scene_diameter;
    let prune_above = cfg.prune_scale_fraction * scene_diameter;
    let grow = cloud.len() < cfg.max_gaussians;
    let shrink = cfg.split_divisor.ln();

    let mut candidates: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(cloud.len());
    let (mut split, mut cloned) = (0, 0);
    for i in 0..cloud.len() {
        let g = cloud.gaussian(i);
        let hot = grow && stats.mean_grad(i) > cfg.grad_threshold;
        let (major, max_log) = g
            .log_scale
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
        let max_scale = max_log.exp();
        if hot && max_scale > split_above {
            let axis = g.rotation.to_rotation_matrix().column(major).into_owned();
            for sign in [1.0, -1.0] {
                let mut child = g.clone();
                child.position += axis * (0.5 * sign * max_scale);
                child.log_scale.add_scalar_mut(-shrink);
                candidates.push((child, None));
            }
            split += 1;
        } else if hot {
            candidates.push((g.clone(), Some(i)));
            let mut twin = g;
            if let Some(dir) = stats.position_grad_sum[i].try_normalize(1e-30) {
                twin.position -= dir * (0.5 * max_scale);
            }
            candidates.push((twin, None));
            cloned += 1;
        } else {
            candidates.push((g, Some(i)));
        }
    }

    let before = candidates.len();
    candidates.retain(|(g, _)| {
        let max_scale = g.log_scale.max().exp();
        sigmoid(g.opacity_logit) >= cfg.prune_opacity && max_scale <= prune_above
    });
    let pruned = before - candidates.len();
    if candidates.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut out = GaussianCloud::empty(cloud.feature_dim());
    let mut sources = Vec::with_capacity(candidates.len());
    for (g, src) in &candidates {
        out.push(g);
        sources.push(*src);
    }
    Ok(Densified {
        cloud: out,
        sources,
        split,
        cloned,
        pruned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::articulation::{point_segment_distance, Joint};

    fn two_capsules() -> KinematicChain {
        KinematicChain::new(vec![
            Joint {
                name: "long".into(),
                parent: -1,
                offset: [0.0, 0.0, 0.0],
                tip: [0.0, 1.0, 0.0],
                radius: 0.1,
            },
            Joint {
                name: "short".into(),
                parent: 0,
                offset: [0.0, 1.0, 0.0],
                tip: [0.3, 0.0, 0.0],
                radius: 0.05,
            },
        ])
        .unwrap()
    }

    fn single(log_scale: f64, opacity: f64) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            2,
            &[Gaussian {
                position: Vec3::new(0.1, 0.2, 0.3),
                log_scale: Vec3::new(log_scale, log_scale - 1.0, log_scale - 0.5),
                rotation: Quaternion::rot_z(0.4),
                opacity_logit: logit(opacity),
                features: vec![0.5, -0.5],
            }],
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let chain = KinematicChain::humanoid();
        let a = init_from_chain_surface(&chain, 300, 16, 7).unwrap();
        let b = init_from_chain_surface(&chain, 300, 16, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!((a.opacity(0) - 0.1).abs() < 1e-12);
        let one = init_from_chain_surface(&chain, 1, 16, 7).unwrap();
        assert_eq!(one.len(), 1);
        assert!(matches!(init_from_chain_surface(&chain, 0, 16, 7), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn samples_lie_on_capsule_surfaces() {
        let chain = KinematicChain::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, p) in sample_chain_surface(&chain, 500, &mut rng) {
            let (a, b) = chain.bone_segment(k);
            assert!((point_segment_distance(&p, &a, &b) - chain.radius(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn capsule_counts_follow_area() {
        let chain = two_capsules();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples = sample_chain_surface(&chain, 2000, &mut rng);
        let n0 = samples.iter().filter(|(k, _)| *k == 0).count() as f64;
        let (a0, a1) = (chain.capsule_area(0), chain.capsule_area(1));
        let expected = 2000.0 * a0 / (a0 + a1);
        assert!((n0 - expected).abs() / expected < 0.1, "{n0} vs {expected}");
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..50).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let nb = knn(&pts, 5);
        for (i, list) in nb.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..50).filter(|&j| j != i).map(|j| ((pts[i] - pts[j]).norm_squared(), j)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all[..5].iter().map(|e| e.1).collect();
            assert_eq!(list, &want);
        }
    }

    #[test]
    fn quiet_cloud_is_unchanged() {
        let cloud = single(-3.0, 0.5);
        let d = densify_and_prune(&cloud, &DensifyStats::new(1), &DensifyConfig::default(), 2.0).unwrap();
        assert_eq!(d.cloud, cloud);
        assert_eq!(d.sources, vec![Some(0)]);
    }

    #[test]
    fn transparent_gaussian_is_pruned() {
        let mut cloud = single(-3.0, 0.5);
        cloud.push(&single(-3.0, 0.001).gaussian(0));
        let d = densify_and_prune(&cloud, &DensifyStats::new(2), &DensifyConfig::default(), 2.0).unwrap();
        assert_eq!(d.cloud.len(), 1);
        assert_eq!(d.pruned, 1);
        let lone = single(-3.0, 0.001);
        assert!(matches!(
            densify_and_prune(&lone, &DensifyStats::new(1), &DensifyConfig::default(), 2.0),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn large_hot_gaussian_splits_in_two() {
        let cloud = single(-1.0, 0.5);
        let mut stats = DensifyStats::new(1);
        stats.record(0, [1e-3, 0.0], Vec3::x());
        let d = densify_and_prune(&cloud, &stats, &DensifyConfig::default(), 2.0).unwrap();
        assert_eq!(d.cloud.len(), 2);
        assert_eq!(d.sources, vec![None, None]);
        let g = cloud.gaussian(0);
        let axis = g.rotation.to_rotation_matrix().column(0).into_owned();
        let s = (-1.0f64).exp();
        assert!((d.cloud.position(0) - (g.position + axis * 0.5 * s)).norm() < 1e-12);
        assert!((d.cloud.position(1) - (g.position - axis * 0.5 * s)).norm() < 1e-12);
        assert!((d.cloud.log_scale(0).x - (-1.0 - 1.6f64.ln())).abs() < 1e-12);
        // Two children with every axis shrunk by 1.6 keep 2 / 1.6^3 of the
        // opacity-weighted volume.
        let vol = |c: &GaussianCloud, i: usize| c.opacity(i) * c.log_scale(i).sum().exp();
        let ratio = (vol(&d.cloud, 0) + vol(&d.cloud, 1)) / vol(&cloud, 0);
        assert!((ratio - 2.0 / 1.6f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn small_hot_gaussian_is_cloned_against_its_gradient() {
        let cloud = single(-6.0, 0.5);
        let mut stats = DensifyStats::new(1);
        stats.record(0, [0.0, 1e-3], Vec3::new(0.0, 2.0, 0.0));
        let d = densify_and_prune(&cloud, &stats, &DensifyConfig::default(), 2.0).unwrap();
        assert_eq!(d.sources, vec![Some(0), None]);
        assert_eq!(d.cloud.gaussian(0), cloud.gaussian(0));
        let moved = d.cloud.position(1) - cloud.position(0);
        assert!(moved.y < 0.0 && moved.x.abs() < 1e-15);
    }

    #[test]
    fn cloud_json_round_trip() {
        let cloud = init_from_chain_surface(&KinematicChain::humanoid(), 20, 4, 1).unwrap();
        let text = serde_json::to_string(&cloud).unwrap();
        let back: GaussianCloud = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cloud);
        let broken = text.replacen("\"count\":20", "\"count\":21", 1);
        assert!(serde_json::from_str::<GaussianCloud>(&broken).is_err());
    }
}
