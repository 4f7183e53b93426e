//! Single-channel float images used by feature detection.

use std::path::Path;

use image::{GrayImage as Luma8, RgbImage};
use thiserror::Error;

use crate::mesh::Rgb;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("buffer of {len} values does not match {width}x{height}")]
    SizeMismatch { width: usize, height: usize, len: usize },
    #[error("cannot read image {path}: {message}")]
    Read { path: String, message: String },
}

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Rec. 601 luma; grey input passes through exactly so a saved grey PNG reloads bit-identically.
#[inline]
fn luma(c: &Rgb) -> f32 {
    if c[0] == c[1] && c[1] == c[2] {
        return c[0];
    }
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_rgb(rgb: &[Rgb], width: usize, height: usize) -> Result<Self, ImageError> {
        Self::new(width, height, rgb.iter().map(luma).collect())
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| luma(&[p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]))
            .collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn to_luma8(&self) -> Luma8 {
        let mut out = Luma8::new(self.width as u32, self.height as u32);
        for (p, v) in out.pixels_mut().zip(&self.data) {
            p[0] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Pixel fetch with edge clamping.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample at a continuous position (pixel centres at integers).
    pub fn sample(&self, x: f64, y: f64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (xi, yi) = (x0 as i64, y0 as i64);
        let a = self.get_clamped(xi, yi);
        let b = self.get_clamped(xi + 1, yi);
        let c = self.get_clamped(xi, yi + 1);
        let d = self.get_clamped(xi + 1, yi + 1);
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    /// Rounds intensities to 8-bit steps, as a stored photo would be.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_sample_interpolates() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(img.sample(0.0, 0.0), 0.0);
        assert!((img.sample(0.25, 0.5) - 0.25).abs() < 1e-6);
        assert_eq!(img.sample(5.0, 5.0), 1.0);
    }

    #[test]
    fn size_mismatch_is_reported() {
        assert!(GrayImage::new(3, 3, vec![0.0; 8]).is_err());
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = GrayImage::from_fn(7, 5, |x, y| (x * 13 + y * 7) as f32 / 120.0);
        let q = img.quantized();
        assert_eq!(q, q.quantized());
        assert!(img
            .data()
            .iter()
            .zip(q.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-7));
    }
}
