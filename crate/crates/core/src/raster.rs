//! Small raster helpers shared by the flow, depth and metric modules.

use nalgebra::Vector2;

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Distance in pixels by which a sample may fall outside the raster and still
/// be clamped onto its border, absorbing round-off in computed coordinates.
pub const EDGE_TOL_PX: f64 = 1e-9;

/// Bilinear footprint of a sub-pixel location: up to four `(index, weight)`
/// pairs with weights summing to one. Entries with zero weight are dropped.
#[derive(Debug, Clone, Copy)]
pub struct Bilinear {
    taps: [(usize, f64); 4],
    len: usize,
}

impl Bilinear {
    /// Returns `None` when `uv` lies outside `[0, w-1] x [0, h-1]` by more than
    /// [`EDGE_TOL_PX`] or is not finite.
    pub fn at(uv: &Vector2<f64>, width: usize, height: usize) -> Option<Self> {
        if width == 0 || height == 0 || !uv.x.is_finite() || !uv.y.is_finite() {
            return None;
        }
        let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
        if uv.x < -EDGE_TOL_PX || uv.y < -EDGE_TOL_PX || uv.x > xmax + EDGE_TOL_PX || uv.y > ymax + EDGE_TOL_PX {
            return None;
        }
        let (x, y) = (uv.x.clamp(0.0, xmax), uv.y.clamp(0.0, ymax));
        let x0 = (x.floor() as usize).min(width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(height.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);

        let mut taps = [(0usize, 0.0f64); 4];
        let mut len = 0;
        for (xi, yi, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if w > 0.0 {
                taps[len] = (yi * width + xi, w);
                len += 1;
            }
        }
        Some(Self { taps, len })
    }

    pub fn taps(&self) -> &[(usize, f64)] {
        &self.taps[..self.len]
    }
}
