//! RGB image buffers with values in `[0, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{OdgError, Result};
use crate::tape::Tensor;

/// Pixel-major (HWC) RGB image, `f32` samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(OdgError::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(OdgError::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from a per-pixel function; values are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `[h * w, 3]` tensor for the autodiff tape.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.height * self.width, 3],
            data: self.data.iter().map(|v| f64::from(*v)).collect(),
        }
    }

    /// Inverse of [`Image::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(height: usize, width: usize, t: &Tensor) -> Result<Self> {
        if t.data.len() != height * width * 3 {
            return Err(OdgError::Shape(format!("tensor {:?} is not {height}x{width}x3", t.shape)));
        }
        Ok(Self {
            height,
            width,
            data: t.data.iter().map(|v| (*v as f32).clamp(0.0, 1.0)).collect(),
        })
    }

    /// 8-bit luminance (0.299 R + 0.587 G + 0.114 B).
    pub fn gray_u8(&self) -> Vec<u8> {
        self.data
            .chunks_exact(3)
            .map(|p| {
                let l = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                (l * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|v| f32::from(*v) / 255.0).collect();
        Self { height: h as usize, width: w as usize, data }
    }

    /// Decode an image file and bilinearly resize it to `size x size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)?;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            img.resize_exact(size as u32, size as u32, FilterType::Triangle)
        };
        Ok(Self::from_dynamic(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| OdgError::io(parent, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// SHA-256 over dimensions and raw sample bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
