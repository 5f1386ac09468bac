//! RGB frames in `[0, 1]`, stored height x width x 3.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// BT.601 full-range luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!("frame {height}x{width}x3 needs {} values, got {}", height * width * 3, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Luma plane (row-major `H*W`).
    pub fn luma(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()
    }

    /// Channel-first `3 x H x W` tensor.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, p) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = p[c];
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], out)
    }

    pub fn from_chw(t: &Tensor) -> Result<Self> {
        let &[3, h, w] = t.shape() else {
            return Err(Error::Shape(format!("expected 3 x H x W, got {:?}", t.shape())));
        };
        let hw = h * w;
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[i * 3 + c] = t.data()[c * hw + i];
            }
        }
        Ok(Self { height: h, width: w, data })
    }

    /// Per-channel planes (`3` planes of `H*W`).
    pub fn planes(&self) -> [Vec<f64>; 3] {
        let mut planes = [Vec::new(), Vec::new(), Vec::new()];
        for (c, plane) in planes.iter_mut().enumerate() {
            *plane = self.data.chunks(3).map(|p| p[c]).collect();
        }
        planes
    }

    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for i in 0..height * width {
            data.extend(planes.iter().map(|p| p[i]));
        }
        Self { height, width, data }
    }

    pub fn clamped(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Sub-window `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Range(format!("crop {h}x{w} at ({y0},{x0}) exceeds {}x{}", self.height, self.width)));
        }
        Ok(Self::from_fn(h, w, |y, x| self.pixel(y0 + y, x0 + x)))
    }
}
