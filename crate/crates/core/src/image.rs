//! Interleaved float images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Row-major, channel-interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Single-channel coverage in `[0, 1]`.
pub type Mask = Image;

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(width * height * channels, data.len()));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f32) -> Self {
        Self { width, height, channels, data: vec![v; width * height * channels] }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = self.idx(x, y);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = self.idx(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                (self.width, self.height, self.channels),
                (other.width, other.height, other.channels),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.idx(self.width - 1 - x, y);
                let dst = self.idx(x, y);
                out.data[dst..dst + self.channels].copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rounds to the nearest 8-bit level, as PNG storage does.
    pub fn quantize8(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Mean absolute difference over pixels where `weight(x, y)` holds.
    pub fn mean_abs_diff_where(&self, other: &Image, keep: impl Fn(usize, usize) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if keep(x, y) {
                    for (a, b) in self.pixel(x, y).iter().zip(other.pixel(x, y)) {
                        sum += (a - b).abs() as f64;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Bilinear resample to `(width, height)` using pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::zeros(width, height, self.channels);
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        for y in 0..height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for c in 0..self.channels {
                    let v00 = self.pixel(x0, y0)[c];
                    let v10 = self.pixel(x1, y0)[c];
                    let v01 = self.pixel(x0, y1)[c];
                    let v11 = self.pixel(x1, y1)[c];
                    let top = v00 + (v10 - v00) * tx;
                    let bot = v01 + (v11 - v01) * tx;
                    out.pixel_mut(x, y)[c] = top + (bot - top) * ty;
                }
            }
        }
        out
    }

    /// `[1, c, h, w]` tensor with values mapped from `[0, 1]` to `[-1, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![F::zero(); w * h * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = F::of(self.pixel(x, y)[ch] as f64 * 2.0 - 1.0);
                }
            }
        }
        Tensor::from_vec([1, c, h, w], data)
    }

    /// Inverse of [`Image::to_tensor`] for batch item `n`; no clamping.
    pub fn from_tensor<F: Scalar>(t: &Tensor<F>, n: usize) -> Image {
        let [_, c, h, w] = t.shape;
        let item = t.item(n);
        let mut img = Image::zeros(w, h, c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    img.pixel_mut(x, y)[ch] = ((item[(ch * h + y) * w + x].as_f64() + 1.0) * 0.5) as f32;
                }
            }
        }
        img
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::InvalidInput(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }

    /// Loads an 8-bit PNG, converting to `channels` (1 = luma, 3 = RGB).
    pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = match channels {
            1 => img.to_luma8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            c => return Err(Error::InvalidInput(format!("cannot read {c}-channel PNG"))),
        };
        Image::new(w, h, channels, raw.into_iter().map(|b| b as f32 / 255.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_layout() {
        let img = Image::new(3, 2, 3, (0..18).map(|v| v as f32 / 17.0).collect()).unwrap();
        let t = img.to_tensor::<f64>();
        assert_eq!(t.shape, [1, 3, 2, 3]);
        let back = Image::from_tensor(&t, 0);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::new(4, 1, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(img.flip_horizontal().data, vec![0.4, 0.3, 0.2, 0.1]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, 3, (0..12).map(|v| v as f32 / 11.0).collect()).unwrap().quantize8();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p, 3).unwrap(), img);
    }
}
