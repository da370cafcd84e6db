//! Float RGB + alpha image buffers and their PFM / PNG encodings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with an accumulated-alpha channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    rgb: Vec<f64>,
    alpha: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3], 0.0)
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3], alpha: f64) -> Self {
        Self {
            width,
            height,
            rgb: color.iter().copied().cycle().take(3 * width * height).collect(),
            alpha: vec![alpha; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, rgb: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        crate::error::check_len("image rgb", 3 * width * height, rgb.len())?;
        crate::error::check_len("image alpha", width * height, alpha.len())?;
        Ok(Self {
            width,
            height,
            rgb,
            alpha,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn rgb(&self) -> &[f64] {
        &self.rgb
    }

    pub fn rgb_mut(&mut self) -> &mut [f64] {
        &mut self.rgb
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_dims(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Rounds every channel through `f32`, making PFM storage lossless.
    pub fn quantize_f32(&mut self) {
        for v in self.rgb.iter_mut().chain(self.alpha.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub fn mean_rgb(&self) -> f64 {
        self.rgb.iter().sum::<f64>() / self.rgb.len().max(1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.rgb.iter().chain(&self.alpha).all(|v| v.is_finite())
    }

    /// Writes the RGB channels as a little-endian colour PFM.
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut body = Vec::with_capacity(12 * self.num_pixels() + 32);
        write!(body, "PF\n{} {}\n-1.0\n", self.width, self.height).expect("in-memory write");
        // PFM stores the bottom row first.
        for y in (0..self.height).rev() {
            let row = &self.rgb[3 * y * self.width..3 * (y + 1) * self.width];
            for v in row {
                body.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&body).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Reads a colour PFM. Alpha is set to one.
    pub fn read_pfm(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = Vec::new();
        let mut line = String::new();
        while header.len() < 3 {
            line.clear();
            let n = r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "truncated PFM header"));
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "PF" {
            return Err(Error::format(path, format!("expected colour PFM, found {:?}", header[0])));
        }
        let dims: Vec<usize> = header
            .get(1..3)
            .and_then(|d| d.iter().map(|s| s.parse().ok()).collect())
            .ok_or_else(|| Error::format(path, "bad PFM dimensions"))?;
        let (width, height) = (dims[0], dims[1]);
        let scale: f64 = header
            .get(3)
            .map(String::as_str)
            .map_or_else(
                || {
                    line.clear();
                    r.read_line(&mut line).ok();
                    line.trim().parse().ok()
                },
                |s| s.parse().ok(),
            )
            .ok_or_else(|| Error::format(path, "bad PFM scale"))?;
        let mut raw = vec![0u8; 12 * width * height];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format(path, "truncated PFM pixel data"))?;
        let mut rgb = vec![0.0; 3 * width * height];
        for (k, chunk) in raw.chunks_exact(4).enumerate() {
            let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if scale < 0.0 {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            let (row, col) = (k / (3 * width), k % (3 * width));
            rgb[3 * width * (height - 1 - row) + col] = v as f64;
        }
        Self::from_parts(width, height, rgb, vec![1.0; width * height])
    }

    /// 8-bit sRGB-agnostic PNG of the RGB channels, clamped to [0, 1].
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.rgb.iter().map(|v| to_u8(*v)).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask stored as an 8-bit grayscale PNG (0 or 255).
pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[f64]) -> Result<()> {
    crate::error::check_len("mask", width * height, mask.len())?;
    let bytes: Vec<u8> = mask.iter().map(|v| to_u8(*v)).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ColorType::L8)?;
    Ok(())
}

pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mask = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok((w as usize, h as usize, mask))
}
