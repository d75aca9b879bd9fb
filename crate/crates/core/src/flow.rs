//! Dense optical flow fields, bilinear sampling and the forward-backward
//! consistency check used to detect occlusions.

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::raster::Bilinear;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("flow data has {got} vectors, expected {width}x{height}")]
    BadLength { width: usize, height: usize, got: usize },
    #[error("flow contains a non-finite vector at pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("sample location ({x}, {y}) is outside the {width}x{height} flow field")]
    OutOfRange { x: f64, y: f64, width: usize, height: usize },
    #[error("flow fields differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

/// Per-pixel displacement in pixels from `src_frame` to `dst_frame`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector2<f64>>,
    pub src_frame: usize,
    pub dst_frame: usize,
}

impl FlowField {
    pub fn new(width: usize, height: usize, data: Vec<Vector2<f64>>) -> Result<Self, FlowError> {
        if data.len() != width * height {
            return Err(FlowError::BadLength { width, height, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !(v.x.is_finite() && v.y.is_finite())) {
            return Err(FlowError::NonFinite { x: i % width.max(1), y: i / width.max(1) });
        }
        Ok(Self { width, height, data, src_frame: 0, dst_frame: 0 })
    }

    pub fn constant(width: usize, height: usize, value: Vector2<f64>) -> Self {
        Self { width, height, data: vec![value; width * height], src_frame: 0, dst_frame: 0 }
    }

    pub fn with_frames(mut self, src: usize, dst: usize) -> Self {
        self.src_frame = src;
        self.dst_frame = dst;
        self
    }

    pub fn get(&self, x: usize, y: usize) -> Vector2<f64> {
        self.data[y * self.width + x]
    }

    /// Bilinearly interpolated flow at a sub-pixel location.
    pub fn sample(&self, uv: &Vector2<f64>) -> Result<Vector2<f64>, FlowError> {
        let b = Bilinear::at(uv, self.width, self.height).ok_or(FlowError::OutOfRange {
            x: uv.x,
            y: uv.y,
            width: self.width,
            height: self.height,
        })?;
        Ok(b.taps().iter().fold(Vector2::zeros(), |acc, &(i, w)| acc + self.data[i] * w))
    }

    /// Negated field with the frames swapped.
    pub fn negated(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| -v).collect(),
            src_frame: self.dst_frame,
            dst_frame: self.src_frame,
        }
    }
}

/// Per-pixel `true` where a pixel has no consistent correspondence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl OcclusionMask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn occluded_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Forward-backward consistency for a single pixel. Returns `true` when the
/// pixel is occluded, including when the forward flow leaves the image.
pub fn is_occluded(fwd: &FlowField, bwd: &FlowField, x: usize, y: usize) -> bool {
    let f = fwd.get(x, y);
    let target = Vector2::new(x as f64, y as f64) + f;
    let Ok(b) = bwd.sample(&target) else {
        return true;
    };
    let lhs = (f + b).norm_squared();
    let rhs = 0.01 * (f.norm_squared() + b.norm_squared()) + 0.5;
    lhs >= rhs
}

/// Occlusion mask of `fwd` (A→B) checked against `bwd` (B→A).
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField) -> Result<OcclusionMask, FlowError> {
    if fwd.width != bwd.width || fwd.height != bwd.height {
        return Err(FlowError::DimensionMismatch(fwd.width, fwd.height, bwd.width, bwd.height));
    }
    let (w, h) = (fwd.width, fwd.height);
    let mut data = vec![false; w * h];
    if w > 0 {
        data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                *out = is_occluded(fwd, bwd, x, y);
            }
        });
    }
    Ok(OcclusionMask { width: w, height: h, data })
}
