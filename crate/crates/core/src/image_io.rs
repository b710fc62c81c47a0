//! Float RGB images and PNG output.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{invalid, Error, Result};

/// Row-major RGB image with `f64` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        ImageRgb { width, height, data: vec![value; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn from_data(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return invalid(format!("image data has {} pixels, expected {}x{}", data.len(), width, height));
        }
        Ok(ImageRgb { width, height, data })
    }

    pub fn same_shape(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// Interleaved channels, row-major.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.data.iter().flatten().copied().collect()
    }

    pub fn from_interleaved(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height * 3 {
            return invalid("interleaved buffer does not match image dimensions");
        }
        Ok(ImageRgb { width, height, data: values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() })
    }

    pub fn rms_diff(&self, other: &ImageRgb) -> f64 {
        let n = (self.data.len() * 3).max(1) as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).powi(2)))
            .sum();
        (sum / n).sqrt()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.data[y as usize * self.width + x as usize];
            Rgb([to8(p[0]), to8(p[1]), to8(p[2])])
        });
        buf.save(path).map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
    }
}

/// Writes 8-bit RGB pixels as PNG.
pub fn save_rgb8_png(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if rgb.len() != width * height {
        return invalid("rgb buffer does not match image dimensions");
    }
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(width as u32, height as u32, |x, y| {
        Rgb(rgb[y as usize * width + x as usize])
    });
    buf.save(path).map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

/// Writes an 8-bit grayscale PNG (labels, alpha masks).
pub fn save_gray8_png(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return invalid("buffer does not match image dimensions");
    }
    let buf = ImageBuffer::<Luma<u8>, _>::from_fn(width as u32, height as u32, |x, y| {
        Luma([values[y as usize * width + x as usize]])
    });
    buf.save(path).map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

/// Writes a 16-bit depth PNG. Finite depths map linearly onto `1..=65535`
/// (nearest = 65535); non-finite pixels are 0.
pub fn save_depth16_png(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    if depth.len() != width * height {
        return invalid("depth buffer does not match image dimensions");
    }
    let finite = depth.iter().copied().filter(|d| d.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(width as u32, height as u32, |x, y| {
        let d = depth[y as usize * width + x as usize];
        if d.is_finite() {
            Luma([1 + ((hi - d) / span * 65534.0).round() as u16])
        } else {
            Luma([0])
        }
    });
    buf.save(path).map_err(|e| Error::Format(format!("png write {}: {e}", path.display())))
}

/// Reads back an 8-bit RGB PNG.
pub fn load_rgb8_png(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path).map_err(|e| Error::Format(format!("png read {}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0).collect()))
}
