//! Dense RGB image container.
//!
//! Pixels are stored row-major, channel-interleaved (`h × w × 3`), in `f64`.
//! Values are nominally in `[0, 1]`; the container itself does not enforce
//! the range because gradients share the same layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    height: usize,
    width: usize,
    #[serde(with = "crate::serde_f64")]
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold a {height}x{width}x{CHANNELS} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..CHANNELS {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, CHANNELS)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = value;
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_same_shape(&self, other: &RgbImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RgbImage {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two images of identical shape.
    ///
    /// Panics on shape mismatch; callers validate shapes at API boundaries.
    pub fn zip_map(&self, other: &RgbImage, f: impl Fn(f64, f64) -> f64) -> RgbImage {
        assert!(self.same_shape(other), "zip_map on mismatched shapes");
        RgbImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &RgbImage, scale: f64) {
        assert!(
            self.same_shape(other),
            "add_assign_scaled on mismatched shapes"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&self, factor: f64) -> RgbImage {
        self.map(|v| v * factor)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_distance(&self, other: &RgbImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &RgbImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Counter-clockwise rotation by `quarter_turns · 90°`.
    ///
    /// Rotations are exact pixel permutations, so they require a square
    /// image for every turn count that is not a multiple of two.
    pub fn rot90(&self, quarter_turns: u32) -> RgbImage {
        let k = quarter_turns % 4;
        let (h, w) = (self.height, self.width);
        match k {
            0 => self.clone(),
            2 => {
                let mut out = self.clone();
                for r in 0..h {
                    for c in 0..w {
                        let src = self.index(h - 1 - r, w - 1 - c, 0);
                        let dst = out.index(r, c, 0);
                        out.data[dst..dst + CHANNELS]
                            .copy_from_slice(&self.data[src..src + CHANNELS]);
                    }
                }
                out
            }
            _ => {
                // Output is w × h.
                let mut out = RgbImage::zeros(w, h);
                for r in 0..w {
                    for c in 0..h {
                        let (sr, sc) = if k == 1 {
                            (c, w - 1 - r)
                        } else {
                            (h - 1 - c, r)
                        };
                        let src = self.index(sr, sc, 0);
                        let dst = out.index(r, c, 0);
                        out.data[dst..dst + CHANNELS]
                            .copy_from_slice(&self.data[src..src + CHANNELS]);
                    }
                }
                out
            }
        }
    }

    pub fn rot180(&self) -> RgbImage {
        self.rot90(2)
    }

    /// Quantizes to 8-bit sRGB-coded bytes (values are clamped to `[0, 1]`).
    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions")
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> RgbImage {
        RgbImage {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(|e| Error::ImageLoad {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RgbImage> {
        let path = path.as_ref();
        let decoded = ::image::open(path).map_err(|e| Error::ImageLoad {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if decoded.width() == 0 || decoded.height() == 0 {
            return Err(Error::ImageLoad {
                path: path.to_path_buf(),
                reason: "zero-size image".into(),
            });
        }
        Ok(RgbImage::from_rgb8(&decoded.to_rgb8()))
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
