//! 8-bit grayscale images, crops and patch extraction.

use alloc::vec;
use alloc::vec::Vec;

use crate::detection::BoxN;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(alloc::format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Out-of-bounds writes are ignored.
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }

    /// Fills `[x0, x1) × [y0, y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: u8) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.pixels[y * self.width + x] = v;
            }
        }
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` for a normalized box, corners
    /// rounded to the nearest pixel and clamped to the image.
    pub fn pixel_rect(&self, b: &BoxN) -> (usize, usize, usize, usize) {
        let [x0, y0, x1, y1] = b.to_xyxy();
        let px = |v: f64, n: usize| (libm::round(v * n as f64) as usize).min(n);
        (px(x0, self.width), px(y0, self.height), px(x1, self.width), px(y1, self.height))
    }

    /// Sub-image under `b`. A rectangle with a side of at most one pixel
    /// becomes the single pixel at its (clamped) top-left corner.
    pub fn crop(&self, b: &BoxN) -> GrayImage {
        let (x0, y0, x1, y1) = self.pixel_rect(b);
        if x1 <= x0 + 1 || y1 <= y0 + 1 {
            let x = x0.min(self.width.saturating_sub(1));
            let y = y0.min(self.height.saturating_sub(1));
            let v = if self.pixels.is_empty() { 0 } else { self.get(x, y) };
            return GrayImage {
                width: 1,
                height: 1,
                pixels: vec![v],
            };
        }
        let mut out = GrayImage::new(x1 - x0, y1 - y0);
        for y in y0..y1 {
            let src = &self.pixels[y * self.width + x0..y * self.width + x1];
            out.pixels[(y - y0) * out.width..(y - y0 + 1) * out.width].copy_from_slice(src);
        }
        out
    }

    /// Non-overlapping `patch × patch` tiles in row-major tile order, one
    /// row per tile, values scaled to `[0, 1]`. Both sides must be multiples
    /// of `patch`.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(Error::InvalidArgument(alloc::format!(
                "patch size {patch} does not tile a {}x{} image",
                self.width,
                self.height
            )));
        }
        let (gw, gh) = (self.width / patch, self.height / patch);
        let mut out = Tensor::zeros(gw * gh, patch * patch);
        for ty in 0..gh {
            for tx in 0..gw {
                let row = out.row_mut(ty * gw + tx);
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[dy * patch + dx] = self.get(tx * patch + dx, ty * patch + dy) as f64 / 255.0;
                    }
                }
            }
        }
        Ok(out)
    }
}
