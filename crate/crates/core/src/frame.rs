//! Per-view raster data: RGB images, depth maps and posed views.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;

pub type Pixel = Vector2<f64>;

/// Bilinear stencil at continuous pixel coordinate `p`, where integer
/// coordinates are pixel centers. Coordinates are clamped to the grid.
pub fn bilinear_stencil(width: usize, height: usize, p: Pixel) -> [(usize, f64); 4] {
    let x = p.x.clamp(0.0, (width - 1) as f64);
    let y = p.y.clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

/// RGB image with values in `[0, 1]`, row-major, three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn bilinear(&self, p: Pixel) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (idx, w) in bilinear_stencil(self.width, self.height, p) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.data[idx * 3 + c];
            }
        }
        out
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// How depth maps are sampled at sub-pixel positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthLookup {
    #[default]
    Bilinear,
    Nearest,
}

/// Per-pixel z-depth; `f64::INFINITY` marks pixels with no surface.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "depth data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn nearest(&self, p: Pixel) -> f64 {
        let x = p.x.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = p.y.round().clamp(0.0, (self.height - 1) as f64) as usize;
        self.get(x, y)
    }

    /// Bilinear lookup; falls back to the nearest pixel when any neighbor in
    /// the stencil has no surface.
    pub fn bilinear(&self, p: Pixel) -> f64 {
        let mut acc = 0.0;
        for (idx, w) in bilinear_stencil(self.width, self.height, p) {
            let d = self.data[idx];
            if !d.is_finite() {
                if w == 0.0 {
                    continue;
                }
                return self.nearest(p);
            }
            acc += w * d;
        }
        acc
    }

    pub fn lookup(&self, p: Pixel, mode: DepthLookup) -> f64 {
        match mode {
            DepthLookup::Bilinear => self.bilinear(p),
            DepthLookup::Nearest => self.nearest(p),
        }
    }

    /// Rounds every finite value to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// One posed image with optional ground-truth depth.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Image,
    pub depth: Option<DepthMap>,
}
