use std::path::Path;

use image::ImageEncoder;

use crate::error::{Error, Result};

/// Row-major `height x width x channels` buffer of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Image::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Multiplies every channel of each pixel by a single-channel mask.
    pub fn masked(&self, mask: &Image) -> Image {
        let mut out = self.clone();
        for p in 0..self.pixel_count() {
            let m = mask.data[p];
            for c in 0..self.channels {
                out.data[p * self.channels + c] *= m;
            }
        }
        out
    }

    /// Mirrors columns.
    pub fn flipped_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.get(self.width - 1 - x, y, c)
        })
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Quantized 8-bit PNG; `gamma` applies `x^(1/2.2)` before quantization.
    pub fn save_png(&self, path: &Path, gamma: bool) -> Result<()> {
        let encode = |v: f64| {
            let v = v.clamp(0.0, 1.0);
            let v = if gamma { v.powf(1.0 / 2.2) } else { v };
            (v * 255.0).round() as u8
        };
        let bytes: Vec<u8> = self.data.iter().map(|&v| encode(v)).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Shape(format!("cannot encode {c}-channel image"))),
        };
        let mut buf = Vec::new();
        image::codecs::png::PngEncoder::new(&mut buf)
            .write_image(&bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Image(e.to_string()))?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load_png(path: &Path, channels: usize) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw: Vec<u8> = match channels {
            1 => img.to_luma8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            c => return Err(Error::Shape(format!("cannot decode into {c} channels"))),
        };
        Ok(Image {
            width: w,
            height: h,
            channels,
            data: raw.into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }
}
