//! Loss terms and their gradients.
//!
//! Covariance gradients use the same convention as the renderer: one
//! independent entry per matrix element.

use crate::error::{check_len, Result};
use crate::geom::{Mat3, Vec3};
use crate::imagebuf::ImageBuffer;

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mean_l1(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

fn mean_l1_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let inv = 1.0 / pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, t)| sign(p - t) * inv).collect()
}

/// Mean absolute RGB difference over the whole image.
pub fn loss_rgb(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    pred.check_dims(gt, "rgb loss")?;
    Ok(mean_l1(pred.rgb(), gt.rgb()))
}

/// [`loss_rgb`] and its gradient w.r.t. the predicted RGB channels.
pub fn loss_rgb_grad(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<(f64, Vec<f64>)> {
    pred.check_dims(gt, "rgb loss")?;
    Ok((mean_l1(pred.rgb(), gt.rgb()), mean_l1_grad(pred.rgb(), gt.rgb())))
}

/// Mean absolute difference between accumulated alpha and a binary mask.
pub fn loss_mask(alpha: &[f64], mask: &[f64]) -> Result<f64> {
    check_len("mask loss", alpha.len(), mask.len())?;
    Ok(mean_l1(alpha, mask))
}

pub fn loss_mask_grad(alpha: &[f64], mask: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("mask loss", alpha.len(), mask.len())?;
    Ok((mean_l1(alpha, mask), mean_l1_grad(alpha, mask)))
}

/// Mean squared difference between predicted and prior skinning weights,
/// both flattened `K` per Gaussian.
pub fn loss_skin(pred: &[f64], prior: &[f64]) -> Result<f64> {
    check_len("skin loss", prior.len(), pred.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(prior).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub fn loss_skin_grad(pred: &[f64], prior: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = loss_skin(pred, prior)?;
    let scale = 2.0 / pred.len().max(1) as f64;
    Ok((value, pred.iter().zip(prior).map(|(a, b)| scale * (a - b)).collect()))
}

/// Weight of the skinning loss at `iteration`: exponential decay from
/// `start` to `end` over `total` iterations. A zero endpoint has no
/// logarithm, so that case falls back to a linear ramp.
pub fn skin_weight_schedule(iteration: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 || start == end {
        return start;
    }
    let t = (iteration.min(total - 1)) as f64 / (total - 1) as f64;
    if start > 0.0 && end > 0.0 {
        start * (end / start).powf(t)
    } else {
        start + (end - start) * t
    }
}

/// Canonical and deformed Gaussians seen by the isometric terms.
#[derive(Debug, Clone, Copy)]
pub struct IsometricInputs<'a> {
    pub canonical_positions: &'a [Vec3],
    pub canonical_covariances: &'a [Mat3],
    pub deformed_positions: &'a [Vec3],
    pub deformed_covariances: &'a [Mat3],
}

/// `(L_isopos, L_isocov)` with gradients w.r.t. all four inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct IsometricLoss {
    pub isopos: f64,
    pub isocov: f64,
    pub d_canonical_positions: Vec<Vec3>,
    pub d_canonical_covariances: Vec<Mat3>,
    pub d_deformed_positions: Vec<Vec3>,
    pub d_deformed_covariances: Vec<Mat3>,
}

/// Edge-wise isometry penalties. Over each edge `(i, j)`:
///
/// * position: `(|xo_i - xo_j| - |xc_i - xc_j|)^2`
/// * covariance: `(|So_i - So_j|_F - |Sc_i - Sc_j|_F)^2`
///
/// Both vanish when the whole cloud moves rigidly. Each term is averaged
/// over the edges and scaled by `w_pos` / `w_cov` before differentiation.
pub fn loss_isometric(inputs: &IsometricInputs<'_>, edges: &[(usize, usize)], w_pos: f64, w_cov: f64) -> Result<IsometricLoss> {
    let n = inputs.canonical_positions.len();
    check_len("canonical covariances", n, inputs.canonical_covariances.len())?;
    check_len("deformed positions", n, inputs.deformed_positions.len())?;
    check_len("deformed covariances", n, inputs.deformed_covariances.len())?;
    let mut out = IsometricLoss {
        isopos: 0.0,
        isocov: 0.0,
        d_canonical_positions: vec![Vec3::zeros(); n],
        d_canonical_covariances: vec![Mat3::zeros(); n],
        d_deformed_positions: vec![Vec3::zeros(); n],
        d_deformed_covariances: vec![Mat3::zeros(); n],
    };
    if n < 2 || edges.is_empty() {
        log::warn!("isometric loss needs at least two Gaussians and one edge; returning 0");
        return Ok(out);
    }
    let inv = 1.0 / edges.len() as f64;
    for &(i, j) in edges {
        let dxo = inputs.deformed_positions[i] - inputs.deformed_positions[j];
        let dxc = inputs.canonical_positions[i] - inputs.canonical_positions[j];
        let (lo, lc) = (dxo.norm(), dxc.norm());
        out.isopos += (lo - lc) * (lo - lc) * inv;
        let g = 2.0 * (lo - lc) * inv * w_pos;
        if lo > 0.0 {
            let v = dxo * (g / lo);
            out.d_deformed_positions[i] += v;
            out.d_deformed_positions[j] -= v;
        }
        if lc > 0.0 {
            let v = dxc * (g / lc);
            out.d_canonical_positions[i] -= v;
            out.d_canonical_positions[j] += v;
        }

        let dso = inputs.deformed_covariances[i] - inputs.deformed_covariances[j];
        let dsc = inputs.canonical_covariances[i] - inputs.canonical_covariances[j];
        let (co, cc) = (dso.norm(), dsc.norm());
        out.isocov += (co - cc) * (co - cc) * inv;
        let g = 2.0 * (co - cc) * inv * w_cov;
        if co > 0.0 {
            let v = dso * (g / co);
            out.d_deformed_covariances[i] += v;
            out.d_deformed_covariances[j] -= v;
        }
        if cc > 0.0 {
            let v = dsc * (g / cc);
            out.d_canonical_covariances[i] -= v;
            out.d_canonical_covariances[j] += v;
        }
    }
    Ok(out)
}

/// Individual loss terms of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub rgb: f64,
    pub mask: f64,
    pub skin: f64,
    pub isopos: f64,
    pub isocov: f64,
}

/// Weights of the terms after the RGB loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub skin: f64,
    pub isopos: f64,
    pub isocov: f64,
}

/// `rgb + λ_mask mask + λ_skin skin + λ_isopos isopos + λ_isocov isocov`.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.rgb + w.mask * parts.mask + w.skin * parts.skin + w.isopos * parts.isopos + w.isocov * parts.isocov
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_covariance, Quaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        let rgb = (0..3 * w * h).map(|_| rng.random::<f64>()).collect();
        ImageBuffer::from_parts(w, h, rgb, vec![1.0; w * h]).unwrap()
    }

    #[test]
    fn rgb_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 7, 5);
        assert_eq!(loss_rgb(&a, &a).unwrap(), 0.0);
        let gt = ImageBuffer::filled(4, 4, [0.3, 0.4, 0.5], 1.0);
        let pred = ImageBuffer::filled(4, 4, [0.4, 0.5, 0.6], 1.0);
        assert!((loss_rgb(&pred, &gt).unwrap() - 0.1).abs() < 1e-12);
        let b = random_image(&mut rng, 7, 5);
        let mut brute = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    brute += (a.pixel(x, y)[c] - b.pixel(x, y)[c]).abs();
                }
            }
        }
        assert!((loss_rgb(&a, &b).unwrap() - brute / 105.0).abs() < 1e-12);
        assert!(loss_rgb(&a, &ImageBuffer::new(5, 7)).is_err());
    }

    #[test]
    fn mask_loss_cases() {
        let mask: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        assert_eq!(loss_mask(&mask, &mask).unwrap(), 0.0);
        assert_eq!(loss_mask(&[0.0; 16], &mask).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alpha: Vec<f64> = (0..16).map(|_| rng.random()).collect();
        let brute: f64 = alpha.iter().zip(&mask).map(|(a, m)| (a - m).abs()).sum::<f64>() / 16.0;
        assert!((loss_mask(&alpha, &mask).unwrap() - brute).abs() < 1e-12);
        assert!(loss_mask(&alpha, &mask[..3]).is_err());
    }

    #[test]
    fn skin_loss_cases() {
        let prior = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(loss_skin(&prior, &prior).unwrap(), 0.0);
        assert!((loss_skin(&[0.5; 4], &prior).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(skin_weight_schedule(0, 15000, 10.0, 0.1), 10.0);
        assert!((skin_weight_schedule(14999, 15000, 10.0, 0.1) - 0.1).abs() < 1e-12);
        let (_, g) = loss_skin_grad(&[0.5; 4], &prior).unwrap();
        assert_eq!(g, vec![-0.25, 0.25, 0.25, -0.25]);
    }

    #[test]
    fn schedule_with_a_zero_endpoint_stays_finite() {
        for it in [0, 1, 500, 999] {
            assert_eq!(skin_weight_schedule(it, 1000, 0.0, 0.0), 0.0);
        }
        assert_eq!(skin_weight_schedule(0, 1001, 1.0, 0.0), 1.0);
        assert_eq!(skin_weight_schedule(500, 1001, 1.0, 0.0), 0.5);
        assert_eq!(skin_weight_schedule(1000, 1001, 1.0, 0.0), 0.0);
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec3>, Vec<Mat3>) {
        let pos = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let cov = (0..n)
            .map(|_| {
                let q = Quaternion::new(1.0, rng.random(), rng.random(), rng.random()).normalize();
                build_covariance(&Vec3::new(rng.random::<f64>() - 2.0, -1.5, -2.0), q)
            })
            .collect();
        (pos, cov)
    }

    #[test]
    fn isometric_rigid_invariance_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pos, cov) = cloud(&mut rng, 12);
        let edges = crate::scene::knn_edges(&pos, 5);
        let same = IsometricInputs {
            canonical_positions: &pos,
            canonical_covariances: &cov,
            deformed_positions: &pos,
            deformed_covariances: &cov,
        };
        let l = loss_isometric(&same, &edges, 1.0, 1.0).unwrap();
        assert_eq!((l.isopos, l.isocov), (0.0, 0.0));

        let r = Quaternion::new(0.3, -0.5, 0.2, 0.7).normalize().to_rotation_matrix();
        let t = Vec3::new(1.0, -2.0, 0.5);
        let moved: Vec<Vec3> = pos.iter().map(|p| r * p + t).collect();
        let turned: Vec<Mat3> = cov.iter().map(|c| r * c * r.transpose()).collect();
        let rigid = IsometricInputs {
            deformed_positions: &moved,
            deformed_covariances: &turned,
            ..same
        };
        let l = loss_isometric(&rigid, &edges, 1.0, 1.0).unwrap();
        assert!(l.isopos < 1e-24 && l.isocov < 1e-24);

        let doubled: Vec<Vec3> = pos.iter().map(|p| p * 2.0).collect();
        let scaled = IsometricInputs {
            deformed_positions: &doubled,
            ..same
        };
        let expected: f64 =
            edges.iter().map(|&(i, j)| (pos[i] - pos[j]).norm_squared()).sum::<f64>() / edges.len() as f64;
        let l = loss_isometric(&scaled, &edges, 1.0, 1.0).unwrap();
        assert!((l.isopos - expected).abs() < 1e-12);
    }

    #[test]
    fn isometric_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (pc, sc) = cloud(&mut rng, 6);
        let (po, so) = cloud(&mut rng, 6);
        let edges = crate::scene::knn_edges(&pc, 3);
        let (wp, wc) = (0.7, 3.0);
        let eval = |pc: &[Vec3], sc: &[Mat3], po: &[Vec3], so: &[Mat3]| {
            let l = loss_isometric(
                &IsometricInputs {
                    canonical_positions: pc,
                    canonical_covariances: sc,
                    deformed_positions: po,
                    deformed_covariances: so,
                },
                &edges,
                wp,
                wc,
            )
            .unwrap();
            (wp * l.isopos + wc * l.isocov, l)
        };
        let (_, l) = eval(&pc, &sc, &po, &so);
        let h = 1e-6;
        for i in 0..6 {
            for c in 0..3 {
                let mut a = po.clone();
                a[i][c] += h;
                let mut b = po.clone();
                b[i][c] -= h;
                let fd = (eval(&pc, &sc, &a, &so).0 - eval(&pc, &sc, &b, &so).0) / (2.0 * h);
                assert!((fd - l.d_deformed_positions[i][c]).abs() < 1e-6);
                let mut a = pc.clone();
                a[i][c] += h;
                let mut b = pc.clone();
                b[i][c] -= h;
                let fd = (eval(&a, &sc, &po, &so).0 - eval(&b, &sc, &po, &so).0) / (2.0 * h);
                assert!((fd - l.d_canonical_positions[i][c]).abs() < 1e-6);
            }
            for e in 0..9 {
                let mut a = so.clone();
                a[i][e] += h;
                let mut b = so.clone();
                b[i][e] -= h;
                let fd = (eval(&pc, &sc, &po, &a).0 - eval(&pc, &sc, &po, &b).0) / (2.0 * h);
                assert!((fd - l.d_deformed_covariances[i][e]).abs() < 1e-6);
                let mut a = sc.clone();
                a[i][e] += h;
                let mut b = sc.clone();
                b[i][e] -= h;
                let fd = (eval(&pc, &a, &po, &so).0 - eval(&pc, &b, &po, &so).0) / (2.0 * h);
                assert!((fd - l.d_canonical_covariances[i][e]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let w = LossWeights {
            mask: 0.1,
            skin: 10.0,
            isopos: 1.0,
            isocov: 100.0,
        };
        assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
        let parts = LossParts {
            rgb: 0.2,
            mask: 0.5,
            skin: 0.01,
            isopos: 0.003,
            isocov: 1e-4,
        };
        let hand = 0.2 + 0.1 * 0.5 + 10.0 * 0.01 + 0.003 + 100.0 * 1e-4;
        assert!((total_loss(&parts, &w) - hand).abs() < 1e-15);
    }
}
