//! Depth rasters: edge filtering and scale/shift alignment of relative
//! (monocular) disparity against sparse metric anchors.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::Camera;
use crate::raster::Bilinear;
use crate::rng::stream_rng;

/// Minimum fraction of usable anchors that must agree with the fitted line.
pub const MIN_ALIGNMENT_INLIER_RATIO: f64 = 0.2;
pub const DEFAULT_ALIGNMENT_ITERS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("depth data has {got} values, expected {width}x{height}")]
    BadLength { width: usize, height: usize, got: usize },
    #[error("depth contains a non-finite value at pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error("need at least 2 anchors with valid predicted depth, got {0}")]
    TooFewAnchors(usize),
    #[error("every sampled anchor pair has the same predicted disparity")]
    DegenerateSample,
    #[error("no consensus: best inlier ratio {ratio:.3} is below {min}")]
    NoConsensus { ratio: f64, min: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn is_valid(z: f64) -> bool {
    z > 0.0 && z.is_finite()
}

/// Per-pixel z-depth. Values `<= 0` mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// How depth is interpolated between pixel centres.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepthInterpolation {
    /// Bilinear in depth.
    Depth,
    /// Bilinear in inverse depth; exact on planar surfaces.
    #[default]
    Disparity,
}

impl std::str::FromStr for DepthInterpolation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "depth" => Ok(Self::Depth),
            "disparity" => Ok(Self::Disparity),
            other => Err(format!("unknown depth interpolation '{other}' (expected depth|disparity)")),
        }
    }
}

impl DepthInterpolation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Depth => "depth",
            Self::Disparity => "disparity",
        }
    }
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, DepthError> {
        if data.len() != width * height {
            return Err(DepthError::BadLength { width, height, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(DepthError::NonFinite { x: i % width.max(1), y: i / width.max(1) });
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, z: f64) -> Self {
        Self { width, height, data: vec![z; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_valid_at(&self, x: usize, y: usize) -> bool {
        is_valid(self.get(x, y))
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&z| is_valid(z)).count()
    }

    pub fn median_valid(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.data.iter().copied().filter(|&z| is_valid(z)).collect();
        median(&mut v)
    }

    /// Interpolated depth at `uv`; `None` off-image or when any contributing
    /// neighbour is invalid.
    pub fn sample(&self, uv: &Vector2<f64>, interp: DepthInterpolation) -> Option<f64> {
        let b = Bilinear::at(uv, self.width, self.height)?;
        let mut acc = 0.0;
        for &(i, w) in b.taps() {
            let z = self.data[i];
            if !is_valid(z) {
                return None;
            }
            acc += w * match interp {
                DepthInterpolation::Depth => z,
                DepthInterpolation::Disparity => 1.0 / z,
            };
        }
        let z = match interp {
            DepthInterpolation::Depth => acc,
            DepthInterpolation::Disparity => 1.0 / acc,
        };
        is_valid(z).then_some(z)
    }

    /// Bilinearly interpolated disparity `1/z`.
    pub fn sample_disparity(&self, uv: &Vector2<f64>) -> Option<f64> {
        self.sample(uv, DepthInterpolation::Disparity).map(|z| 1.0 / z)
    }
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Default gradient threshold: 5% of the median valid depth.
pub fn default_grad_threshold(d: &DepthMap) -> Option<f64> {
    d.median_valid().map(|m| 0.05 * m)
}

/// Invalidates pixels whose (unnormalized 3x3) Sobel gradient magnitude
/// exceeds `grad_threshold`, plus the 8-neighbourhood of pixels that were
/// already invalid. Borders replicate edge pixels.
pub fn filter_depth_edges(d: &DepthMap, grad_threshold: f64) -> DepthMap {
    let (w, h) = (d.width, d.height);
    let mut out = d.data.clone();
    if w == 0 || h == 0 {
        return d.clone();
    }
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        d.data[yc * w + xc]
    };
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let (xi, yi) = (x as isize, y as isize);
            let mut near_invalid = false;
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let v = at(xi + dx, yi + dy);
                    let inside = (0..w as isize).contains(&(xi + dx)) && (0..h as isize).contains(&(yi + dy));
                    if inside && !is_valid(v) {
                        near_invalid = true;
                    }
                    gx += SOBEL_X[(dy + 1) as usize][(dx + 1) as usize] * v;
                    gy += SOBEL_Y[(dy + 1) as usize][(dx + 1) as usize] * v;
                }
            }
            if near_invalid || (gx * gx + gy * gy).sqrt() > grad_threshold {
                *out = 0.0;
            }
        }
    });
    DepthMap { width: w, height: h, data: out }
}

/// Sparse metric points (e.g. structure-from-motion output) used to anchor
/// relative depth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseAnchorSet {
    pub points: Vec<Anchor>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub world_position: Vector3<f64>,
    pub frame: usize,
}

impl SparseAnchorSet {
    pub fn for_frame(&self, frame: usize) -> impl Iterator<Item = &Anchor> {
        self.points.iter().filter(move |a| a.frame == frame)
    }
}

/// Maps predicted disparity to metric disparity: `1/z = scale·(1/z*) + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisparityAlignment {
    pub scale: f64,
    pub shift: f64,
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentParams {
    pub seed: u64,
    pub iters: usize,
    /// Absolute disparity tolerance; defaults to 5% of the median anchor disparity.
    pub inlier_tol: Option<f64>,
}

impl AlignmentParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, iters: DEFAULT_ALIGNMENT_ITERS, inlier_tol: None }
    }
}

/// `(predicted disparity, metric disparity)` for every anchor that projects
/// into the image onto valid predicted depth.
pub fn anchor_disparities<'a>(
    pred: &DepthMap,
    anchors: impl IntoIterator<Item = &'a Anchor>,
    cam: &Camera,
) -> Vec<(f64, f64)> {
    anchors
        .into_iter()
        .filter_map(|a| {
            let z = cam.world_to_camera(&a.world_position).z;
            let px = cam.project(&a.world_position).ok()?;
            let pd = pred.sample_disparity(&px)?;
            Some((pd, 1.0 / z))
        })
        .collect()
}

/// RANSAC fit of the disparity scale and shift, refined by least squares on
/// the consensus set. Deterministic for a fixed seed.
pub fn fit_disparity_alignment(
    pred: &DepthMap,
    anchors: &[Anchor],
    cam: &Camera,
    params: &AlignmentParams,
) -> Result<DisparityAlignment, DepthError> {
    let pairs = anchor_disparities(pred, anchors, cam);
    fit_disparity_pairs(&pairs, params)
}

/// Same as [`fit_disparity_alignment`] on precomputed disparity pairs.
pub fn fit_disparity_pairs(pairs: &[(f64, f64)], params: &AlignmentParams) -> Result<DisparityAlignment, DepthError> {
    let n = pairs.len();
    if n < 2 {
        return Err(DepthError::TooFewAnchors(n));
    }
    if params.iters == 0 {
        return Err(DepthError::InvalidParameter("iters must be positive".into()));
    }
    let tol = match params.inlier_tol {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(DepthError::InvalidParameter(format!("inlier tolerance must be positive, got {t}"))),
        None => {
            let mut d: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            0.05 * median(&mut d).unwrap_or(0.0).abs()
        }
    };
    let count_inliers = |a: f64, b: f64| pairs.iter().filter(|(p, t)| (t - (a * p + b)).abs() <= tol).count();

    let scores: Vec<Option<usize>> = (0..params.iters)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(params.seed, i as u64);
            let j = rng.random_range(0..n);
            let mut k = rng.random_range(0..n - 1);
            if k >= j {
                k += 1;
            }
            let (pj, tj) = pairs[j];
            let (pk, tk) = pairs[k];
            if (pj - pk).abs() <= 1e-12 * pj.abs().max(pk.abs()).max(1e-300) {
                return None;
            }
            let a = (tj - tk) / (pj - pk);
            let b = tj - a * pj;
            Some(count_inliers(a, b))
        })
        .collect();

    // first hypothesis with the largest consensus, in iteration order
    let mut best: Option<(usize, usize)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(c) = *s {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((i, c));
            }
        }
    }
    let Some((best_iter, _)) = best else {
        return Err(DepthError::DegenerateSample);
    };

    // regenerate the winning line deterministically
    let mut rng = stream_rng(params.seed, best_iter as u64);
    let j = rng.random_range(0..n);
    let mut k = rng.random_range(0..n - 1);
    if k >= j {
        k += 1;
    }
    let a0 = (pairs[j].1 - pairs[k].1) / (pairs[j].0 - pairs[k].0);
    let b0 = pairs[j].1 - a0 * pairs[j].0;
    let inliers: Vec<(f64, f64)> = pairs.iter().copied().filter(|(p, t)| (t - (a0 * p + b0)).abs() <= tol).collect();

    let (scale, shift) = least_squares_line(&inliers).ok_or(DepthError::DegenerateSample)?;
    let ratio = inliers.len() as f64 / n as f64;
    if ratio < MIN_ALIGNMENT_INLIER_RATIO {
        return Err(DepthError::NoConsensus { ratio, min: MIN_ALIGNMENT_INLIER_RATIO });
    }
    Ok(DisparityAlignment { scale, shift, inlier_count: inliers.len(), inlier_ratio: ratio })
}

fn least_squares_line(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let a = sxy / sxx;
    Some((a, my - a * mx))
}

/// Converts predicted depth to aligned metric depth. Pixels whose aligned
/// disparity is non-positive or non-finite become invalid.
pub fn apply_disparity_alignment(pred: &DepthMap, align: &DisparityAlignment) -> DepthMap {
    let data = pred
        .data
        .iter()
        .map(|&z| {
            if !is_valid(z) {
                return 0.0;
            }
            let z = 1.0 / (align.scale / z + align.shift);
            if is_valid(z) {
                z
            } else {
                0.0
            }
        })
        .collect();
    DepthMap { width: pred.width, height: pred.height, data }
}
