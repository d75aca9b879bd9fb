//! Co-visibility masked image metrics and keypoint transfer accuracy.
//!
//! Image metrics implement [`MaskedImageMetric`] and are looked up by name
//! in a [`MetricRegistry`], so callers (and the CLI `--metrics` flag) pick
//! the set to evaluate at runtime.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::covis::CovisibilityMask;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("image data has {got} values, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("image is smaller than the {0}x{0} SSIM window")]
    ImageTooSmall(usize),
    #[error("distance map {index} ({w}x{h}) is not an integer downsampling of {width}x{height}")]
    BadScale { index: usize, w: usize, h: usize, width: usize, height: usize },
    #[error("mask is empty after downsampling to {w}x{h}")]
    EmptyDownsampledMask { w: usize, h: usize },
    #[error("no ground-truth-visible keypoints to score")]
    NoKeypoints,
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),
}

/// RGB image with values in `[0, 1]`, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageFrame {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, MetricError> {
        let expected = width * height * Self::CHANNELS;
        if data.len() != expected {
            return Err(MetricError::BadLength { expected, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height * Self::CHANNELS] }
    }

    fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(Self::CHANNELS).copied().collect()
    }
}

fn check_shapes(pred: &ImageFrame, gt: &ImageFrame, mask: &CovisibilityMask) -> Result<(), MetricError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(MetricError::ShapeMismatch(pred.width, pred.height, gt.width, gt.height));
    }
    if (mask.width, mask.height) != (gt.width, gt.height) {
        return Err(MetricError::ShapeMismatch(mask.width, mask.height, gt.width, gt.height));
    }
    if mask.count() == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(())
}

/// `−10·log10(MSE)` with the MSE taken over masked pixels and all channels.
/// Returns `+∞` when the masked region matches exactly.
pub fn masked_psnr(pred: &ImageFrame, gt: &ImageFrame, mask: &CovisibilityMask) -> Result<f64, MetricError> {
    check_shapes(pred, gt, mask)?;
    let mut sse = 0.0;
    let mut n = 0usize;
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..ImageFrame::CHANNELS {
            let d = pred.data[i * 3 + c] - gt.data[i * 3 + c];
            sse += d * d;
        }
        n += ImageFrame::CHANNELS;
    }
    let mse = sse / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" convolution: output is `(w−k+1) x (h−k+1)`.
fn conv_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Masked SSIM with partial convolution.
///
/// Every windowed statistic only sees in-mask pixels, with the Gaussian
/// weights renormalized by their in-mask sum. The SSIM map is defined on
/// window centres where the 11x11 window fits inside the image; the score is
/// its mean over masked centres with non-zero in-window weight, averaged
/// across channels.
pub fn masked_ssim(pred: &ImageFrame, gt: &ImageFrame, mask: &CovisibilityMask) -> Result<f64, MetricError> {
    check_shapes(pred, gt, mask)?;
    let (w, h) = (gt.width, gt.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall(SSIM_WINDOW));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let m: Vec<f64> = mask.data.iter().map(|&b| f64::from(u8::from(b))).collect();
    let msum = conv_valid(&m, w, h, &k);
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let r = SSIM_WINDOW / 2;

    // centres kept in the average
    let keep: Vec<usize> = (0..ow * oh)
        .filter(|&i| {
            let (x, y) = (i % ow + r, i / ow + r);
            mask.data[y * w + x] && msum[i] > 0.0
        })
        .collect();
    if keep.is_empty() {
        return Err(MetricError::EmptyMask);
    }

    let per_channel: Vec<f64> = (0..ImageFrame::CHANNELS)
        .into_par_iter()
        .map(|c| {
            let x = pred.channel(c);
            let y = gt.channel(c);
            let prod = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..w * h).map(|i| m[i] * f(i)).collect() };
            let mx = conv_valid(&prod(&|i| x[i]), w, h, &k);
            let my = conv_valid(&prod(&|i| y[i]), w, h, &k);
            let mxx = conv_valid(&prod(&|i| x[i] * x[i]), w, h, &k);
            let myy = conv_valid(&prod(&|i| y[i] * y[i]), w, h, &k);
            let mxy = conv_valid(&prod(&|i| x[i] * y[i]), w, h, &k);
            let total: f64 = keep
                .iter()
                .map(|&i| {
                    let s = msum[i];
                    let (ux, uy) = (mx[i] / s, my[i] / s);
                    let vx = mxx[i] / s - ux * ux;
                    let vy = myy[i] / s - uy * uy;
                    let cxy = mxy[i] / s - ux * uy;
                    ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
                })
                .sum();
            total / keep.len() as f64
        })
        .collect();
    Ok(per_channel.iter().sum::<f64>() / ImageFrame::CHANNELS as f64)
}

/// Per-pixel perceptual distances at one feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Area-pools `mask` down to `w x h` and keeps cells more than half covered.
pub fn downsample_mask(mask: &CovisibilityMask, w: usize, h: usize) -> Option<Vec<bool>> {
    if w == 0 || h == 0 || !mask.width.is_multiple_of(w) || !mask.height.is_multiple_of(h) {
        return None;
    }
    let (fx, fy) = (mask.width / w, mask.height / h);
    if fx != fy {
        return None;
    }
    let area = (fx * fy) as f64;
    Some(
        (0..w * h)
            .map(|i| {
                let (cx, cy) = (i % w, i / w);
                let mut n = 0usize;
                for y in cy * fy..(cy + 1) * fy {
                    for x in cx * fx..(cx + 1) * fx {
                        n += usize::from(mask.get(x, y));
                    }
                }
                n as f64 / area > 0.5
            })
            .collect(),
    )
}

/// Masked LPIPS aggregation over precomputed distance maps: per-scale masked
/// mean, summed over scales.
pub fn masked_lpips_aggregate(maps: &[DistanceMap], mask: &CovisibilityMask) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for (index, d) in maps.iter().enumerate() {
        if d.data.len() != d.width * d.height {
            return Err(MetricError::BadLength { expected: d.width * d.height, got: d.data.len() });
        }
        let m = downsample_mask(mask, d.width, d.height).ok_or(MetricError::BadScale {
            index,
            w: d.width,
            h: d.height,
            width: mask.width,
            height: mask.height,
        })?;
        let (mut num, mut den) = (0.0, 0.0);
        for (v, &keep) in d.data.iter().zip(&m) {
            if keep {
                num += v;
                den += 1.0;
            }
        }
        if den == 0.0 {
            return Err(MetricError::EmptyDownsampledMask { w: d.width, h: d.height });
        }
        total += num / den;
    }
    Ok(total)
}

/// A full-resolution image metric restricted to a co-visibility mask.
pub trait MaskedImageMetric: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether larger values are better.
    fn higher_is_better(&self) -> bool {
        true
    }

    fn evaluate(&self, pred: &ImageFrame, gt: &ImageFrame, mask: &CovisibilityMask) -> Result<f64, MetricError>;
}

pub struct MaskedPsnr;

impl MaskedImageMetric for MaskedPsnr {
    fn name(&self) -> &'static str {
        "mpsnr"
    }

    fn evaluate(&self, pred: &ImageFrame, gt: &ImageFrame, mask: &CovisibilityMask) -> Result<f64, MetricError> {
        masked_psnr(pred, gt, mask)
    }
}

pub struct MaskedSsim;

impl MaskedImageMetric for MaskedSsim {
    fn name(&self) -> &'static str {
        "mssim"
    }

    fn evaluate(&self, pred: &ImageFrame, gt: &ImageFrame, mask: &CovisibilityMask) -> Result<f64, MetricError> {
        masked_ssim(pred, gt, mask)
    }
}

/// Named collection of masked image metrics.
#[derive(Clone)]
pub struct MetricRegistry {
    order: Vec<&'static str>,
    metrics: HashMap<&'static str, Arc<dyn MaskedImageMetric>>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(MaskedPsnr));
        r.register(Arc::new(MaskedSsim));
        r
    }
}

impl MetricRegistry {
    pub fn empty() -> Self {
        Self { order: Vec::new(), metrics: HashMap::new() }
    }

    /// Adds or replaces a metric under its own name.
    pub fn register(&mut self, metric: Arc<dyn MaskedImageMetric>) {
        let name = metric.name();
        if self.metrics.insert(name, metric).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn MaskedImageMetric>, MetricError> {
        self.metrics.get(name).cloned().ok_or_else(|| MetricError::UnknownMetric(name.to_string()))
    }

    pub fn names(&self) -> &[&'static str] {
        &self.order
    }

    /// Resolves a list of names, preserving order.
    pub fn select(&self, names: &[&str]) -> Result<Vec<Arc<dyn MaskedImageMetric>>, MetricError> {
        names.iter().map(|n| self.get(n)).collect()
    }
}

/// One evaluated frame: metric name → value.
pub type FrameScores = Vec<(&'static str, f64)>;

/// Evaluates `metrics` on every frame in parallel, returning per-frame scores
/// in input order.
pub fn evaluate_frames(
    metrics: &[Arc<dyn MaskedImageMetric>],
    frames: &[(&ImageFrame, &ImageFrame, &CovisibilityMask)],
) -> Result<Vec<FrameScores>, MetricError> {
    frames
        .par_iter()
        .map(|(pred, gt, mask)| metrics.iter().map(|m| Ok((m.name(), m.evaluate(pred, gt, mask)?))).collect())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub id: u32,
    pub position: Vector2<f64>,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub frame: usize,
    /// `(width, height)`.
    pub image_size: (u32, u32),
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PckResult {
    pub correct: usize,
    pub scored: usize,
    pub threshold_px: f64,
}

impl PckResult {
    pub fn value(&self) -> f64 {
        self.correct as f64 / self.scored as f64
    }
}

/// Fraction of ground-truth-visible keypoints predicted within
/// `alpha · max(width, height)` pixels. Missing or invisible predictions
/// count as incorrect.
pub fn pck_transfer(pred: &KeypointSet, gt: &KeypointSet, alpha: f64) -> Result<PckResult, MetricError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MetricError::InvalidAlpha(alpha));
    }
    let threshold_px = alpha * f64::from(gt.image_size.0.max(gt.image_size.1));
    let by_id: HashMap<u32, &Keypoint> = pred.keypoints.iter().map(|k| (k.id, k)).collect();
    let mut scored = 0;
    let mut correct = 0;
    for g in gt.keypoints.iter().filter(|k| k.visible) {
        scored += 1;
        if let Some(p) = by_id.get(&g.id) {
            if p.visible && (p.position - g.position).norm() <= threshold_px {
                correct += 1;
            }
        }
    }
    if scored == 0 {
        return Err(MetricError::NoKeypoints);
    }
    Ok(PckResult { correct, scored, threshold_px })
}
