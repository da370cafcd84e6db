//! Pinhole projection, EWA splatting and depth-sorted alpha compositing with
//! an exact reverse pass.
//!
//! The forward pass keeps only the sorted splat list and per-tile index lists;
//! the backward pass re-walks each pixel front to back, then accumulates
//! gradients back to front. Tiles are independent, so both passes run in
//! parallel and per-tile gradient buffers are reduced in tile order, which
//! keeps results identical for any thread count.

use nalgebra::{Matrix2, Matrix2x3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{Mat3, RigidTransform, Vec3};
use crate::imagebuf::ImageBuffer;

/// Points at or closer than this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic dilation added to every screen-space covariance, in px².
pub const LOW_PASS: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const SINGULAR_DET: f64 = 1e-12;
pub const TILE_SIZE: usize = 16;

/// Pinhole camera; `world_to_camera` maps world points into a frame with
/// x right, y down and z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: RigidTransform,
}

impl Camera {
    /// Camera at `eye` looking at `target`, principal point at the image centre.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera eye and target coincide"))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("camera up vector is parallel to the view direction"))?;
        let y = z.cross(&x);
        let rot = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: RigidTransform::new(rot, -(rot * eye)),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.world_to_camera.rotation.transpose() * self.world_to_camera.translation)
    }

    /// Same camera with intrinsics rescaled to a new resolution.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
            world_to_camera: self.world_to_camera,
        }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean: [f64; 2],
    pub cov: Matrix2<f64>,
    pub depth: f64,
    /// Camera-space centre.
    pub p_cam: Vec3,
    /// Jacobian of the perspective map at `p_cam`.
    pub jacobian: Matrix2x3<f64>,
}

/// Projects a world-space Gaussian; `None` when it lies at or behind the near
/// plane or its footprint is singular.
pub fn project_gaussian(cam: &Camera, x: &Vec3, cov: &Mat3) -> Option<Projection> {
    let w = &cam.world_to_camera;
    let p = w.rotation * x + w.translation;
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let iz = 1.0 / p.z;
    let jac = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    );
    let t = jac * w.rotation;
    let mut cov2 = t * cov * t.transpose();
    cov2[(0, 0)] += LOW_PASS;
    cov2[(1, 1)] += LOW_PASS;
    if cov2.determinant() < SINGULAR_DET {
        return None;
    }
    Some(Projection {
        mean: [cam.fx * p.x * iz + cam.cx, cam.fy * p.y * iz + cam.cy],
        cov: cov2,
        depth: p.z,
        p_cam: p,
        jacobian: jac,
    })
}

/// Projected, coloured splat ready for compositing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian.
    pub index: usize,
    pub proj: Projection,
    /// World-space covariance the projection was built from.
    pub cov3: Mat3,
    /// Inverse covariance as `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Splat2D {
    pub fn depth(&self) -> f64 {
        self.proj.depth
    }

    pub fn mean(&self) -> [f64; 2] {
        self.proj.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Per-splat alphas below this are skipped; `0` disables skipping and
    /// tile culling.
    pub alpha_min: f64,
    /// Stop walking a pixel once transmittance drops below
    /// [`MIN_TRANSMITTANCE`].
    pub early_stop: bool,
    pub tile_binning: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            alpha_min: 1.0 / 255.0,
            early_stop: true,
            tile_binning: true,
        }
    }
}

impl RenderSettings {
    /// Smooth compositing: no alpha cut-off and no early termination.
    pub fn exact() -> Self {
        Self {
            alpha_min: 0.0,
            early_stop: false,
            ..Self::default()
        }
    }
}

/// Observation-space Gaussians as seen by the rasterizer.
#[derive(Debug, Clone, Copy)]
pub struct SplatInputs<'a> {
    pub positions: &'a [Vec3],
    pub covariances: &'a [Mat3],
    pub opacities: &'a [f64],
    pub colors: &'a [[f64; 3]],
}

impl SplatInputs<'_> {
    fn len(&self) -> Result<usize> {
        let n = self.positions.len();
        check_len("splat covariances", n, self.covariances.len())?;
        check_len("splat opacities", n, self.opacities.len())?;
        check_len("splat colors", n, self.colors.len())?;
        Ok(n)
    }
}

/// Everything the reverse pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderTape {
    pub camera: Camera,
    pub settings: RenderSettings,
    /// Visible splats in ascending `(depth, index)` order.
    pub splats: Vec<Splat2D>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    num_gaussians: usize,
}

/// Per-Gaussian gradients of a scalar loss on the rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub positions: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Gradient w.r.t. the projected mean, in pixels.
    pub mean2d: Vec<[f64; 2]>,
}

impl RenderGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vec3::zeros(); n],
            covariances: vec![Mat3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            mean2d: vec![[0.0; 2]; n],
        }
    }
}

fn conic_of(cov: &Matrix2<f64>) -> [f64; 3] {
    let det = cov.determinant();
    [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det]
}

/// Pixel-centre evaluation of one splat: `(alpha, gaussian, dx, dy, clamped)`.
#[inline]
fn splat_alpha(s: &Splat2D, px: f64, py: f64, alpha_min: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - s.proj.mean[0];
    let dy = py - s.proj.mean[1];
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    let clamped = raw > MAX_ALPHA;
    let alpha = if clamped { MAX_ALPHA } else { raw };
    if alpha < alpha_min {
        return None;
    }
    Some((alpha, g, dx, dy, clamped))
}

/// Half-width of the square outside which the splat's alpha is below
/// `alpha_min`; `None` if it can never reach `alpha_min`.
fn cull_radius(s: &Splat2D, alpha_min: f64) -> Option<f64> {
    if s.opacity < alpha_min {
        return None;
    }
    let cov = &s.proj.cov;
    let half_tr = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let half_diff = 0.5 * (cov[(0, 0)] - cov[(1, 1)]);
    let lambda_max = half_tr + (half_diff * half_diff + cov[(0, 1)] * cov[(0, 1)]).sqrt();
    let r = (2.0 * (s.opacity / alpha_min).ln() * lambda_max).sqrt();
    Some(r * (1.0 + 1e-6) + 1e-6)
}

fn pixel_range(center: f64, r: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (center - r - 0.5).ceil().max(0.0);
    let hi = (center + r - 0.5).floor().min(size as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

struct TileRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl RenderTape {
    fn tiles_y(&self) -> usize {
        self.tiles.len() / self.tiles_x
    }

    fn tile_rect(&self, t: usize) -> TileRect {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        TileRect {
            x0: tx * TILE_SIZE,
            y0: ty * TILE_SIZE,
            x1: ((tx + 1) * TILE_SIZE).min(self.camera.width),
            y1: ((ty + 1) * TILE_SIZE).min(self.camera.height),
        }
    }

    fn tile_of(&self, x: usize, y: usize) -> usize {
        (y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE
    }

    pub fn num_gaussians(&self) -> usize {
        self.num_gaussians
    }

    /// Compositing weights `alpha_i * T_i` of every splat reaching pixel
    /// `(x, y)` in front-to-back order, and the final transmittance.
    pub fn pixel_weights(&self, x: usize, y: usize) -> (Vec<(usize, f64)>, f64) {
        let list = &self.tiles[self.tile_of(x, y)];
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        let mut out = Vec::new();
        for &k in list {
            let s = &self.splats[k as usize];
            if let Some((alpha, ..)) = splat_alpha(s, px, py, self.settings.alpha_min) {
                out.push((s.index, alpha * t));
                t *= 1.0 - alpha;
                if self.settings.early_stop && t < MIN_TRANSMITTANCE {
                    break;
                }
            }
        }
        (out, t)
    }
}

/// Projects, sorts and bins the splats without shading any pixel.
pub fn prepare(cam: &Camera, inputs: &SplatInputs<'_>, settings: &RenderSettings) -> Result<RenderTape> {
    cam.validate()?;
    let n = inputs.len()?;
    if n == 0 {
        return Err(Error::invalid("cannot render an empty cloud"));
    }
    let mut splats: Vec<Splat2D> = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let proj = project_gaussian(cam, &inputs.positions[i], &inputs.covariances[i])?;
            Some(Splat2D {
                index: i,
                conic: conic_of(&proj.cov),
                proj,
                cov3: inputs.covariances[i],
                opacity: inputs.opacities[i],
                color: inputs.colors[i],
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth().total_cmp(&b.depth()).then(a.index.cmp(&b.index)));

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let cull = settings.tile_binning && settings.alpha_min > 0.0;
    for (k, s) in splats.iter().enumerate() {
        let (x_range, y_range) = if cull {
            let Some(r) = cull_radius(s, settings.alpha_min) else {
                continue;
            };
            match (
                pixel_range(s.proj.mean[0], r, cam.width),
                pixel_range(s.proj.mean[1], r, cam.height),
            ) {
                (Some(xr), Some(yr)) => (xr, yr),
                _ => continue,
            }
        } else {
            ((0, cam.width - 1), (0, cam.height - 1))
        };
        for ty in y_range.0 / TILE_SIZE..=y_range.1 / TILE_SIZE {
            for tx in x_range.0 / TILE_SIZE..=x_range.1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Ok(RenderTape {
        camera: *cam,
        settings: *settings,
        splats,
        tiles,
        tiles_x,
        num_gaussians: n,
    })
}

/// Full forward pass: project, cull, sort and composite.
pub fn render(cam: &Camera, inputs: &SplatInputs<'_>, settings: &RenderSettings) -> Result<(ImageBuffer, RenderTape)> {
    let tape = prepare(cam, inputs, settings)?;
    let image = composite(&tape);
    Ok((image, tape))
}

/// Shades every pixel from a prepared tape.
pub fn composite(tape: &RenderTape) -> ImageBuffer {
    let (w, h) = (tape.camera.width, tape.camera.height);
    let bg = tape.settings.background;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..tape.tiles.len())
        .into_par_iter()
        .map(|t| {
            let rect = tape.tile_rect(t);
            let list = &tape.tiles[t];
            let mut rgb = Vec::with_capacity(3 * TILE_SIZE * TILE_SIZE);
            let mut alpha = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut tr = 1.0;
                    let mut c = [0.0; 3];
                    for &k in list {
                        let s = &tape.splats[k as usize];
                        if let Some((a, ..)) = splat_alpha(s, px, py, tape.settings.alpha_min) {
                            let wgt = a * tr;
                            for ch in 0..3 {
                                c[ch] += s.color[ch] * wgt;
                            }
                            tr *= 1.0 - a;
                            if tape.settings.early_stop && tr < MIN_TRANSMITTANCE {
                                break;
                            }
                        }
                    }
                    for ch in 0..3 {
                        rgb.push(c[ch] + bg[ch] * tr);
                    }
                    alpha.push(1.0 - tr);
                }
            }
            (rgb, alpha)
        })
        .collect();
    let mut image = ImageBuffer::new(w, h);
    for (t, (rgb, alpha)) in blocks.into_iter().enumerate() {
        let rect = tape.tile_rect(t);
        let bw = rect.x1 - rect.x0;
        for (row, y) in (rect.y0..rect.y1).enumerate() {
            let dst = y * w + rect.x0;
            image.rgb_mut()[3 * dst..3 * (dst + bw)].copy_from_slice(&rgb[3 * row * bw..3 * (row + 1) * bw]);
            image.alpha_mut()[dst..dst + bw].copy_from_slice(&alpha[row * bw..(row + 1) * bw]);
        }
    }
    image
}

/// Screen-space gradient of one splat inside one tile.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

struct Hit {
    slot: usize,
    alpha: f64,
    g: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
    t_before: f64,
}

fn backward_tile(tape: &RenderTape, t: usize, d_rgb: &[f64], d_alpha: &[f64]) -> Vec<SplatGrad> {
    let rect = tape.tile_rect(t);
    let list = &tape.tiles[t];
    let w = tape.camera.width;
    let bg = tape.settings.background;
    let mut acc = vec![SplatGrad::default(); list.len()];
    let mut hits: Vec<Hit> = Vec::new();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            let pix = y * w + x;
            let dc = [d_rgb[3 * pix], d_rgb[3 * pix + 1], d_rgb[3 * pix + 2]];
            let da = d_alpha[pix];
            if dc == [0.0; 3] && da == 0.0 {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            hits.clear();
            let mut tr = 1.0;
            for (slot, &k) in list.iter().enumerate() {
                let s = &tape.splats[k as usize];
                if let Some((alpha, g, dx, dy, clamped)) = splat_alpha(s, px, py, tape.settings.alpha_min) {
                    hits.push(Hit {
                        slot,
                        alpha,
                        g,
                        dx,
                        dy,
                        clamped,
                        t_before: tr,
                    });
                    tr *= 1.0 - alpha;
                    if tape.settings.early_stop && tr < MIN_TRANSMITTANCE {
                        break;
                    }
                }
            }
            let t_final = tr;
            let mut after = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
            for hit in hits.iter().rev() {
                let s = &tape.splats[list[hit.slot] as usize];
                let wgt = hit.alpha * hit.t_before;
                let inv = 1.0 / (1.0 - hit.alpha);
                let mut d_alpha_i = da * t_final * inv;
                let g = &mut acc[hit.slot];
                for ch in 0..3 {
                    d_alpha_i += dc[ch] * (s.color[ch] * hit.t_before - after[ch] * inv);
                    g.color[ch] += dc[ch] * wgt;
                    after[ch] += s.color[ch] * wgt;
                }
                if hit.clamped {
                    continue;
                }
                g.opacity += d_alpha_i * hit.g;
                let d_power = d_alpha_i * hit.alpha;
                let [a, b, c] = s.conic;
                g.mean[0] += d_power * (a * hit.dx + b * hit.dy);
                g.mean[1] += d_power * (b * hit.dx + c * hit.dy);
                g.conic[0] -= 0.5 * d_power * hit.dx * hit.dx;
                g.conic[1] -= d_power * hit.dx * hit.dy;
                g.conic[2] -= 0.5 * d_power * hit.dy * hit.dy;
            }
        }
    }
    acc
}

/// Reverse pass for upstream gradients on the RGB and alpha channels.
pub fn render_backward(tape: &RenderTape, d_rgb: &[f64], d_alpha: &[f64]) -> Result<RenderGrads> {
    let npix = tape.camera.width * tape.camera.height;
    check_len("upstream rgb gradient", 3 * npix, d_rgb.len())?;
    check_len("upstream alpha gradient", npix, d_alpha.len())?;
    debug_assert_eq!(tape.tiles_y() * tape.tiles_x, tape.tiles.len());

    let per_tile: Vec<Vec<SplatGrad>> = (0..tape.tiles.len())
        .into_par_iter()
        .map(|t| backward_tile(tape, t, d_rgb, d_alpha))
        .collect();
    let mut screen = vec![SplatGrad::default(); tape.splats.len()];
    for (t, acc) in per_tile.iter().enumerate() {
        for (slot, g) in acc.iter().enumerate() {
            let dst = &mut screen[tape.tiles[t][slot] as usize];
            for i in 0..2 {
                dst.mean[i] += g.mean[i];
            }
            for i in 0..3 {
                dst.conic[i] += g.conic[i];
                dst.color[i] += g.color[i];
            }
            dst.opacity += g.opacity;
        }
    }

    let cam = &tape.camera;
    let rot = cam.world_to_camera.rotation;
    let per_splat: Vec<(Vec3, Mat3)> = tape
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g)| splat_backward(cam, &rot, s, g))
        .collect();

    let mut grads = RenderGrads::zeros(tape.num_gaussians);
    for ((s, g), (dx, dcov)) in tape.splats.iter().zip(&screen).zip(per_splat) {
        let i = s.index;
        grads.positions[i] = dx;
        grads.covariances[i] = dcov;
        grads.opacities[i] = g.opacity;
        grads.colors[i] = g.color;
        grads.mean2d[i] = g.mean;
    }
    Ok(grads)
}

/// Chains screen-space gradients to the world-space centre and covariance.
fn splat_backward(cam: &Camera, rot: &Mat3, s: &Splat2D, g: &SplatGrad) -> (Vec3, Mat3) {
    let [a, b, c] = s.conic;
    let q = Matrix2::new(a, b, b, c);
    // `b` appears twice in the quadratic form, so split its gradient evenly
    // over the two off-diagonal entries.
    let dq = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let dcov2 = -(q * dq * q);
    let jac = s.proj.jacobian;
    let t = jac * rot;
    let dcov3 = t.transpose() * dcov2 * t;
    let dt = 2.0 * dcov2 * t * s.cov3;
    let dj = dt * rot.transpose();

    let p = s.proj.p_cam;
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    let mut dp = jac.transpose() * nalgebra::Vector2::new(g.mean[0], g.mean[1]);
    dp.x -= dj[(0, 2)] * cam.fx * iz2;
    dp.y -= dj[(1, 2)] * cam.fy * iz2;
    dp.z += -dj[(0, 0)] * cam.fx * iz2 - dj[(1, 1)] * cam.fy * iz2
        + 2.0 * iz2 * iz * (dj[(0, 2)] * cam.fx * p.x + dj[(1, 2)] * cam.fy * p.y);
    (rot.transpose() * dp, dcov3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_covariance, Quaternion};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(w: usize, h: usize, f: f64) -> Camera {
        Camera {
            fx: f,
            fy: f * 1.25,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            world_to_camera: RigidTransform::IDENTITY,
        }
    }

    struct Scene {
        positions: Vec<Vec3>,
        covariances: Vec<Mat3>,
        opacities: Vec<f64>,
        colors: Vec<[f64; 3]>,
    }

    impl Scene {
        fn inputs(&self) -> SplatInputs<'_> {
            SplatInputs {
                positions: &self.positions,
                covariances: &self.covariances,
                opacities: &self.opacities,
                colors: &self.colors,
            }
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
        let mut s = Scene {
            positions: vec![],
            covariances: vec![],
            opacities: vec![],
            colors: vec![],
        };
        for _ in 0..n {
            s.positions.push(Vec3::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(2.5..3.5),
            ));
            let ls = Vec3::new(
                rng.random_range(-1.9..-0.9),
                rng.random_range(-1.9..-0.9),
                rng.random_range(-1.9..-0.9),
            );
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            s.covariances.push(build_covariance(&ls, q));
            s.opacities.push(rng.random_range(0.05..0.95));
            s.colors.push([rng.random(), rng.random(), rng.random()]);
        }
        s
    }

    #[test]
    fn on_axis_projection_matches_closed_form() {
        let cam = axis_camera(32, 24, 50.0);
        let (sigma, z) = (0.2, 4.0);
        let cov = Mat3::identity() * (sigma * sigma);
        let p = project_gaussian(&cam, &Vec3::new(0.0, 0.0, z), &cov).unwrap();
        assert_eq!(p.mean, [cam.cx, cam.cy]);
        let ex = (cam.fx * sigma / z).powi(2) + LOW_PASS;
        let ey = (cam.fy * sigma / z).powi(2) + LOW_PASS;
        assert_abs_diff_eq!(p.cov, Matrix2::new(ex, 0.0, 0.0, ey), epsilon = 1e-12);

        let far = project_gaussian(&cam, &Vec3::new(0.0, 0.0, 2.0 * z), &cov).unwrap();
        let shrink = (far.cov - Matrix2::identity() * LOW_PASS).component_div(&(p.cov - Matrix2::identity() * LOW_PASS));
        assert_abs_diff_eq!(shrink[(0, 0)], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(shrink[(1, 1)], 0.25, epsilon = 1e-12);

        assert!(project_gaussian(&cam, &Vec3::new(0.0, 0.0, -1.0), &cov).is_none());
        assert!(project_gaussian(&cam, &Vec3::new(0.0, 0.0, NEAR_PLANE), &cov).is_none());
    }

    #[test]
    fn look_at_puts_target_in_the_centre() {
        let cam = Camera::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.0, 0.5, 0.0), Vec3::y(), 40.0, 20, 10).unwrap();
        let p = project_gaussian(&cam, &Vec3::new(0.0, 0.5, 0.0), &(Mat3::identity() * 1e-4)).unwrap();
        assert_abs_diff_eq!(p.mean[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.mean[1], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cam.center(), Vec3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
        // World up appears towards the top of the image.
        let above = project_gaussian(&cam, &Vec3::new(0.0, 0.8, 0.0), &(Mat3::identity() * 1e-4)).unwrap();
        assert!(above.mean[1] < 5.0);
    }

    #[test]
    fn empty_and_offscreen_scenes() {
        let cam = axis_camera(8, 8, 10.0);
        let empty = SplatInputs {
            positions: &[],
            covariances: &[],
            opacities: &[],
            colors: &[],
        };
        assert!(matches!(render(&cam, &empty, &RenderSettings::default()), Err(Error::InvalidArgument(_))));

        let behind = Scene {
            positions: vec![Vec3::new(0.0, 0.0, -5.0), Vec3::new(100.0, 0.0, 1.0)],
            covariances: vec![Mat3::identity() * 0.01; 2],
            opacities: vec![0.9; 2],
            colors: vec![[1.0, 0.0, 0.0]; 2],
        };
        let settings = RenderSettings {
            background: [0.2, 0.3, 0.4],
            ..RenderSettings::default()
        };
        let (img, _) = render(&cam, &behind.inputs(), &settings).unwrap();
        assert_eq!(img, ImageBuffer::filled(8, 8, [0.2, 0.3, 0.4], 0.0));
    }

    #[test]
    fn single_splat_at_pixel_centre() {
        let cam = axis_camera(9, 9, 10.0);
        let (a, c) = (0.7, [0.2, 0.5, 0.9]);
        // The centre of pixel (4, 4) lies on the optical axis.
        let scene = Scene {
            positions: vec![Vec3::new(0.0, 0.0, 3.0)],
            covariances: vec![Mat3::identity() * 0.04],
            opacities: vec![a],
            colors: vec![c],
        };
        let (img, _) = render(&cam, &scene.inputs(), &RenderSettings::default()).unwrap();
        let px = img.pixel(4, 4);
        for ch in 0..3 {
            assert_abs_diff_eq!(px[ch], c[ch] * a, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(img.alpha()[4 * 9 + 4], a, epsilon = 1e-15);
    }

    #[test]
    fn two_splat_hand_expansion() {
        let cam = axis_camera(9, 9, 10.0);
        let (a1, a2) = (0.6, 0.45);
        let (c1, c2) = ([0.9, 0.1, 0.3], [0.2, 0.8, 0.5]);
        let bg = [0.3, 0.6, 0.1];
        let scene = Scene {
            positions: vec![Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, 3.0)],
            covariances: vec![Mat3::identity() * 0.04; 2],
            opacities: vec![a2, a1],
            colors: vec![c2, c1],
        };
        let settings = RenderSettings {
            background: bg,
            ..RenderSettings::default()
        };
        let (img, _) = render(&cam, &scene.inputs(), &settings).unwrap();
        let px = img.pixel(4, 4);
        for ch in 0..3 {
            let expect = c1[ch] * a1 + c2[ch] * a2 * (1.0 - a1) + bg[ch] * (1.0 - a1) * (1.0 - a2);
            assert_abs_diff_eq!(px[ch], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_and_transmittance_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = axis_camera(16, 16, 20.0);
        for _ in 0..10 {
            let scene = random_scene(&mut rng, 40);
            let (_, tape) = render(&cam, &scene.inputs(), &RenderSettings::default()).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let (w, t) = tape.pixel_weights(x, y);
                    let total: f64 = w.iter().map(|(_, v)| v).sum::<f64>() + t;
                    assert!((total - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn uniform_colour_is_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = axis_camera(16, 16, 20.0);
        let mut scene = random_scene(&mut rng, 30);
        scene.colors.fill([0.25, 0.5, 0.75]);
        let settings = RenderSettings {
            background: [0.25, 0.5, 0.75],
            ..RenderSettings::default()
        };
        let (img, _) = render(&cam, &scene.inputs(), &settings).unwrap();
        for px in img.rgb().chunks(3) {
            assert_abs_diff_eq!(px[0], 0.25, epsilon = 1e-12);
            assert_abs_diff_eq!(px[1], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(px[2], 0.75, epsilon = 1e-12);
        }
    }

    #[test]
    fn tile_binning_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = axis_camera(40, 33, 30.0);
        for _ in 0..5 {
            let scene = random_scene(&mut rng, 60);
            let binned = RenderSettings::default();
            let flat = RenderSettings {
                tile_binning: false,
                ..binned
            };
            let (a, ta) = render(&cam, &scene.inputs(), &binned).unwrap();
            let (b, tb) = render(&cam, &scene.inputs(), &flat).unwrap();
            assert_eq!(a, b);
            let d: Vec<f64> = (0..3 * 40 * 33).map(|i| (i as f64 * 0.1).cos()).collect();
            let da = vec![0.3; 40 * 33];
            assert_eq!(render_backward(&ta, &d, &da).unwrap(), render_backward(&tb, &d, &da).unwrap());
        }
    }

    #[test]
    fn early_stop_changes_little() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = axis_camera(16, 16, 20.0);
        let mut scene = random_scene(&mut rng, 80);
        scene.opacities.fill(0.95);
        let (a, _) = render(&cam, &scene.inputs(), &RenderSettings::default()).unwrap();
        let off = RenderSettings {
            early_stop: false,
            ..RenderSettings::default()
        };
        let (b, _) = render(&cam, &scene.inputs(), &off).unwrap();
        for (x, y) in a.rgb().iter().zip(b.rgb()) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = axis_camera(8, 8, 10.0);
        let scene = random_scene(&mut rng, 5);
        let (_, tape) = render(&cam, &scene.inputs(), &RenderSettings::default()).unwrap();
        let g = render_backward(&tape, &[0.0; 192], &[0.0; 64]).unwrap();
        assert_eq!(g, RenderGrads::zeros(5));
        assert!(render_backward(&tape, &[0.0; 10], &[0.0; 64]).is_err());
    }

    fn weighted_sum(img: &ImageBuffer, wr: &[f64], wa: &[f64]) -> f64 {
        img.rgb().iter().zip(wr).map(|(a, b)| a * b).sum::<f64>()
            + img.alpha().iter().zip(wa).map(|(a, b)| a * b).sum::<f64>()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = Camera::look_at(Vec3::new(0.3, -0.2, 0.0), Vec3::new(0.0, 0.0, 3.0), Vec3::y(), 10.0, 8, 8).unwrap();
        let settings = RenderSettings {
            background: [0.1, 0.2, 0.3],
            ..RenderSettings::exact()
        };
        let h = 1e-6;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let scene = random_scene(&mut rng, 5);
            let wr: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wa: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, tape) = render(&cam, &scene.inputs(), &settings).unwrap();
            let g = render_backward(&tape, &wr, &wa).unwrap();
            let probe = |f: &dyn Fn(&mut Scene, f64)| {
                let mut plus = Scene { ..clone_scene(&scene) };
                f(&mut plus, h);
                let mut minus = clone_scene(&scene);
                f(&mut minus, -h);
                let lp = weighted_sum(&render(&cam, &plus.inputs(), &settings).unwrap().0, &wr, &wa);
                let lm = weighted_sum(&render(&cam, &minus.inputs(), &settings).unwrap().0, &wr, &wa);
                (lp - lm) / (2.0 * h)
            };
            let check = |analytic: f64, fd: f64, what: &str| {
                if analytic.abs() > 1e-6 || fd.abs() > 1e-6 {
                    assert!(rel_err(analytic, fd) <= 1e-3, "seed {seed} {what}: {analytic} vs {fd}");
                }
            };
            for i in 0..5 {
                for k in 0..3 {
                    check(g.positions[i][k], probe(&|s, d| s.positions[i][k] += d), "position");
                    check(g.colors[i][k], probe(&|s, d| s.colors[i][k] += d), "color");
                    for l in k..3 {
                        // Symmetric probe; the analytic gradient treats the
                        // two off-diagonal entries as independent.
                        let analytic = if k == l {
                            g.covariances[i][(k, k)]
                        } else {
                            g.covariances[i][(k, l)] + g.covariances[i][(l, k)]
                        };
                        let fd = probe(&|s, d| {
                            s.covariances[i][(k, l)] += d;
                            if k != l {
                                s.covariances[i][(l, k)] += d;
                            }
                        });
                        check(analytic, fd, "cov");
                    }
                }
                check(g.opacities[i], probe(&|s, d| s.opacities[i] += d), "opacity");
            }
        }
    }

    fn clone_scene(s: &Scene) -> Scene {
        Scene {
            positions: s.positions.clone(),
            covariances: s.covariances.clone(),
            opacities: s.opacities.clone(),
            colors: s.colors.clone(),
        }
    }

    #[test]
    fn render_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = axis_camera(24, 24, 20.0);
        let scene = random_scene(&mut rng, 50);
        let (a, _) = render(&cam, &scene.inputs(), &RenderSettings::default()).unwrap();
        let (b, _) = render(&cam, &scene.inputs(), &RenderSettings::default()).unwrap();
        assert_eq!(a, b);
    }
}
