use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grayscale image with values in `[0, 1]`, `0` = ink, `1` = paper.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("image dimensions {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![1.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    /// `[1, H, W]` tensor for the encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.height, self.width], self.pixels.clone())
    }

    pub fn has_ink(&self) -> bool {
        self.pixels.iter().any(|&p| p < 0.5)
    }

    /// Pads with paper on the bottom and right up to `width × height`.
    pub fn pad_to(&self, width: usize, height: usize) -> Result<GrayImage> {
        if width < self.width || height < self.height {
            return Err(Error::Invalid(format!(
                "cannot pad {}x{} into {width}x{height}",
                self.width, self.height
            )));
        }
        let mut out = GrayImage::blank(width, height);
        for y in 0..self.height {
            out.pixels[y * width..y * width + self.width].copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        Ok(out)
    }

    /// Smallest sub-image holding every pixel darker than `threshold`.
    /// Returns `None` for a page without ink.
    pub fn crop_to_content(&self, threshold: f64) -> Option<GrayImage> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) < threshold {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == usize::MAX {
            return None;
        }
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..=y1 {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..=y * self.width + x1]);
        }
        Some(GrayImage { width: w, height: h, pixels })
    }

    /// Halves each dimension by averaging 2×2 blocks (odd edges are kept as
    /// partial blocks).
    pub fn downsample_half(&self) -> GrayImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        if sx < self.width && sy < self.height {
                            s += self.get(sx, sy);
                            n += 1.0;
                        }
                    }
                }
                pixels.push(s / n);
            }
        }
        GrayImage { width: w, height: h, pixels }
    }
}
