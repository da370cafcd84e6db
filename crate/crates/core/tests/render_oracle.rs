//! The rasterizer against a direct per-pixel evaluation: project every
//! Gaussian with the EWA Jacobian, sort by depth and composite front to back.

use motionsplat::geom::{build_covariance, Mat3, Quaternion, Vec3};
use motionsplat::render::{render, Camera, RenderSettings, SplatInputs, LOW_PASS, MAX_ALPHA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle(cam: &Camera, inp: &SplatInputs<'_>, background: [f64; 3]) -> Vec<f64> {
    let r = cam.world_to_camera.rotation;
    let t = cam.world_to_camera.translation;
    // (depth, mean, inverse 2x2 covariance, opacity, colour)
    let mut splats = Vec::new();
    for i in 0..inp.positions.len() {
        let p = r * inp.positions[i] + t;
        if p.z <= 0.01 {
            continue;
        }
        let (x, y, z) = (p.x, p.y, p.z);
        let j = nalgebra::Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
        let mut c = j * r * inp.covariances[i] * r.transpose() * j.transpose();
        c[(0, 0)] += LOW_PASS;
        c[(1, 1)] += LOW_PASS;
        let inv = c.try_inverse().unwrap();
        let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
        splats.push((z, mean, inv, inp.opacities[i], inp.colors[i]));
    }
    splats.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut out = Vec::with_capacity(3 * cam.width * cam.height);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let mut color = [0.0; 3];
            let mut transmittance = 1.0;
            for (_, mean, inv, opacity, c) in &splats {
                let d = nalgebra::Vector2::new(px as f64 + 0.5 - mean[0], py as f64 + 0.5 - mean[1]);
                let a = (opacity * (-0.5 * d.dot(&(inv * d))).exp()).min(MAX_ALPHA);
                for ch in 0..3 {
                    color[ch] += c[ch] * a * transmittance;
                }
                transmittance *= 1.0 - a;
            }
            for ch in 0..3 {
                out.push(color[ch] + background[ch] * transmittance);
            }
        }
    }
    out
}

#[test]
fn rasterizer_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cam = Camera::look_at(Vec3::new(0.4, 0.9, 3.0), Vec3::new(0.0, 0.3, 0.0), Vec3::new(0.0, -1.0, 0.0), 28.0, 24, 18).unwrap();
    let background = [0.1, 0.2, 0.3];
    let settings = RenderSettings {
        background,
        ..RenderSettings::exact()
    };
    for _ in 0..15 {
        let n = rng.random_range(1..30);
        let positions: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.2..0.9), rng.random_range(-0.5..0.5)))
            .collect();
        let covariances: Vec<Mat3> = (0..n)
            .map(|_| {
                let ls = Vec3::new(rng.random_range(-3.0..-1.5), rng.random_range(-3.0..-1.5), rng.random_range(-3.0..-1.5));
                let q = Quaternion::new(rng.random_range(-1.0..1.0), rng.random(), rng.random(), rng.random()).normalize();
                build_covariance(&ls, q)
            })
            .collect();
        let opacities: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let inputs = SplatInputs {
            positions: &positions,
            covariances: &covariances,
            opacities: &opacities,
            colors: &colors,
        };
        let (img, _) = render(&cam, &inputs, &settings).unwrap();
        let expect = oracle(&cam, &inputs, background);
        for (a, b) in img.rgb().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "rasterizer {a} vs direct {b}");
        }
    }
}

#[test]
fn default_settings_stay_close_to_exact_compositing() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cam = Camera::look_at(Vec3::new(0.0, 0.5, 3.0), Vec3::new(0.0, 0.4, 0.0), Vec3::new(0.0, -1.0, 0.0), 40.0, 32, 32).unwrap();
    let n = 200;
    let positions: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(0.0..0.9), rng.random_range(-0.3..0.3)))
        .collect();
    let covariances = vec![Mat3::identity() * 0.003; n];
    let opacities = vec![0.6; n];
    let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let inputs = SplatInputs {
        positions: &positions,
        covariances: &covariances,
        opacities: &opacities,
        colors: &colors,
    };
    let (fast, _) = render(&cam, &inputs, &RenderSettings::default()).unwrap();
    let expect = oracle(&cam, &inputs, [0.0; 3]);
    // Skipped splats below 1/255 and early termination at 1e-4 transmittance
    // bound the per-pixel error.
    let worst = fast.rgb().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "default settings differ by {worst}");
}
