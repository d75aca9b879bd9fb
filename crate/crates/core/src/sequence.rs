//! Manifest-driven evaluation: loads the files a sequence references and
//! runs the EMF, co-visibility, image metric and keypoint pipelines.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::covis::{covisibility_heatmap, covisibility_mask, BetaRule, CovisibilityHeatmap, CovisibilityMask};
use crate::depth::{apply_disparity_alignment, fit_disparity_alignment, AlignmentParams, DepthInterpolation, DepthMap, SparseAnchorSet};
use crate::emf::{compute_angular_emf, default_eps_flow, full_emf_from_stats, full_emf_pair, AngularEmf, FramePair, FullEmf};
use crate::error::{Error, Result};
use crate::geom::{triangulate_lookat, Camera};
use crate::io::{self, DepthKind, IoError, SequenceManifest};
use crate::metrics::{masked_lpips_aggregate, pck_transfer, KeypointSet, MaskedImageMetric, PckResult};
use crate::raster::BinaryMask;

fn cameras_for(m: &SequenceManifest, frames: &[usize]) -> Vec<Camera> {
    frames.iter().map(|&i| m.camera(i).expect("frame list comes from the manifest").clone()).collect()
}

/// Angular EMF over the training frames. `lookat` overrides the manifest's
/// look-at point; without either, it is triangulated.
pub fn sequence_angular_emf(m: &SequenceManifest, lookat: Option<Vector3<f64>>) -> Result<AngularEmf> {
    let cams = cameras_for(m, &m.train_frames());
    Ok(compute_angular_emf(&cams, m.fps, lookat.or(m.lookat_vector()))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FullEmfOptions {
    /// Defaults to `1e-6` times the median camera-to-look-at distance.
    pub eps_flow: Option<f64>,
    pub lookat: Option<Vector3<f64>>,
    pub interp: DepthInterpolation,
    /// Seed for per-frame disparity alignment of relative depth.
    pub align_seed: u64,
}

struct FrameData {
    depth: DepthMap,
    mask: BinaryMask,
}

fn load_frame(m: &SequenceManifest, index: usize, anchors: Option<&SparseAnchorSet>, seed: u64) -> Result<FrameData> {
    let entry = m.frame(index).expect("frame list comes from the manifest");
    let depth_path = entry
        .depth
        .as_ref()
        .ok_or_else(|| Error::Input(format!("frame {index} has no depth map, which the full EMF requires")))?;
    let mut depth = io::read_depth(&m.resolve(depth_path))?;
    if m.depth_kind == DepthKind::Relative {
        let set = anchors.expect("relative manifests carry anchors");
        let local: Vec<_> = set.for_frame(index).copied().collect();
        let cam = m.camera(index).expect("camera loaded with manifest");
        let align = fit_disparity_alignment(&depth, &local, cam, &AlignmentParams::with_seed(seed.wrapping_add(index as u64)))?;
        depth = apply_disparity_alignment(&depth, &align);
    }
    let mask = match &entry.mask {
        Some(p) => io::read_mask(&m.resolve(p))?,
        None => BinaryMask::filled(depth.width, depth.height, true),
    };
    Ok(FrameData { depth, mask })
}

/// Full EMF over consecutive training frames, streaming one pair at a time.
pub fn sequence_full_emf(m: &SequenceManifest, opts: &FullEmfOptions) -> Result<FullEmf> {
    let frames = m.train_frames();
    if frames.len() < 2 {
        return Err(Error::Input(format!("full EMF needs at least 2 training frames, got {}", frames.len())));
    }
    let eps = match opts.eps_flow {
        Some(e) => e,
        None => {
            let cams = cameras_for(m, &frames);
            let lookat = match opts.lookat.or(m.lookat_vector()) {
                Some(a) => a,
                None => triangulate_lookat(&cams)?.point,
            };
            default_eps_flow(&cams, &lookat)
        }
    };
    let pairs: Vec<(usize, usize)> = frames.windows(2).map(|w| (w[0], w[1])).collect();
    for &(a, b) in &pairs {
        if m.flow_pair(a, b).is_none() {
            return Err(IoError::NoFlowPair { manifest: m.root.join("manifest.json"), src: a, dst: b }.into());
        }
    }
    let anchors = match &m.anchors {
        Some(p) if m.depth_kind == DepthKind::Relative => Some(io::read_anchors(&m.resolve(p))?),
        _ => None,
    };
    let stats = pairs
        .par_iter()
        .map(|&(a, b)| -> Result<_> {
            let fa = load_frame(m, a, anchors.as_ref(), opts.align_seed)?;
            let fb = load_frame(m, b, anchors.as_ref(), opts.align_seed)?;
            let fp = m.flow_pair(a, b).expect("checked above");
            let fwd = io::read_flow(&m.resolve(&fp.fwd))?;
            let bwd = io::read_flow(&m.resolve(&fp.bwd))?;
            let pair = FramePair {
                t: a,
                cam_t: m.camera(a).expect("camera loaded"),
                cam_t1: m.camera(b).expect("camera loaded"),
                depth_t: &fa.depth,
                depth_t1: &fb.depth,
                fwd: &fwd,
                bwd: &bwd,
                fg_mask: &fa.mask,
            };
            Ok(full_emf_pair(&pair, eps, opts.interp)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(full_emf_from_stats(stats, eps)?)
}

/// Co-visibility of a test frame against every training frame, using the
/// manifest's `(test, train)` flow pairs.
pub fn sequence_covisibility(m: &SequenceManifest, test_frame: usize) -> Result<CovisibilityHeatmap> {
    let train = m.train_frames();
    let flows = train
        .par_iter()
        .map(|&k| -> Result<_> {
            let fp = m
                .flow_pair(test_frame, k)
                .ok_or_else(|| IoError::NoFlowPair { manifest: m.root.join("manifest.json"), src: test_frame, dst: k })?;
            Ok((io::read_flow(&m.resolve(&fp.fwd))?, io::read_flow(&m.resolve(&fp.bwd))?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(covisibility_heatmap(&flows)?)
}

/// Test frames: the test split, or every non-training frame.
pub fn test_frames(m: &SequenceManifest) -> Vec<usize> {
    let t = m.splits.test_frames();
    if !t.is_empty() {
        return t;
    }
    let train = m.train_frames();
    m.frames.iter().map(|f| f.index).filter(|i| !train.contains(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvsFrameResult {
    pub frame: usize,
    pub beta: u32,
    pub covisible_pixels: usize,
    pub scores: Vec<(&'static str, f64)>,
    pub mlpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NvsReport {
    pub frames: Vec<NvsFrameResult>,
    /// Per-metric mean over frames, in metric order.
    pub means: Vec<(&'static str, f64)>,
    pub mlpips: Option<f64>,
}

fn rgb_stem(m: &SequenceManifest, frame: usize) -> String {
    m.frame(frame)
        .and_then(|f| f.rgb.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| frame.to_string())
}

/// `<dir>/<stem>.png`, falling back to `<dir>/<index>.png`, where `stem`
/// is the ground-truth file stem.
pub fn prediction_path(m: &SequenceManifest, dir: &Path, frame: usize) -> PathBuf {
    let by_stem = dir.join(format!("{}.png", rgb_stem(m, frame)));
    if by_stem.is_file() {
        by_stem
    } else {
        dir.join(format!("{frame}.png"))
    }
}

/// Distance maps `<dir>/<stem>_*.dpth` (or `<index>_*.dpth`), sorted by name.
pub fn lpips_paths(m: &SequenceManifest, dir: &Path, frame: usize) -> Result<Vec<PathBuf>> {
    let listing = std::fs::read_dir(dir).map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?;
    let names: Vec<PathBuf> = listing.filter_map(|e| e.ok().map(|e| e.path())).collect();
    for prefix in [rgb_stem(m, frame), frame.to_string()] {
        let p = format!("{prefix}_");
        let mut hits: Vec<PathBuf> = names
            .iter()
            .filter(|n| {
                n.extension().is_some_and(|e| e == "dpth")
                    && n.file_name().is_some_and(|f| f.to_string_lossy().starts_with(&p))
            })
            .cloned()
            .collect();
        if !hits.is_empty() {
            hits.sort();
            return Ok(hits);
        }
    }
    Err(Error::Input(format!("no distance maps for frame {frame} in {}", dir.display())))
}

pub struct NvsOptions<'a> {
    pub pred_dir: &'a Path,
    pub lpips_dir: Option<&'a Path>,
    pub rule: BetaRule,
    pub metrics: Vec<std::sync::Arc<dyn MaskedImageMetric>>,
    /// Evaluate every pixel instead of the co-visible ones.
    pub no_mask: bool,
}

/// Masked novel-view metrics on every test frame.
pub fn sequence_nvs(m: &SequenceManifest, opts: &NvsOptions<'_>) -> Result<NvsReport> {
    let frames = test_frames(m);
    if frames.is_empty() {
        return Err(Error::Input("manifest has no test frames".into()));
    }
    let results = frames
        .iter()
        .map(|&t| -> Result<NvsFrameResult> {
            let entry = m.frame(t).expect("frame list comes from the manifest");
            let gt = io::read_rgb(&m.resolve(&entry.rgb))?;
            let pred = io::read_rgb(&prediction_path(m, opts.pred_dir, t))?;
            let mask = if opts.no_mask {
                CovisibilityMask::full(gt.width, gt.height)
            } else {
                covisibility_mask(&sequence_covisibility(m, t)?, &opts.rule)
            };
            let scores = opts
                .metrics
                .par_iter()
                .map(|mt| Ok((mt.name(), mt.evaluate(&pred, &gt, &mask)?)))
                .collect::<Result<Vec<_>>>()?;
            let mlpips = match opts.lpips_dir {
                Some(dir) => {
                    let maps = lpips_paths(m, dir, t)?
                        .iter()
                        .map(|p| io::read_distance_map(p))
                        .collect::<Result<Vec<_>, _>>()?;
                    Some(masked_lpips_aggregate(&maps, &mask)?)
                }
                None => None,
            };
            Ok(NvsFrameResult { frame: t, beta: mask.beta, covisible_pixels: mask.count(), scores, mlpips })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let means = opts
        .metrics
        .iter()
        .enumerate()
        .map(|(k, mt)| (mt.name(), results.iter().map(|r| r.scores[k].1).sum::<f64>() / n))
        .collect();
    let mlpips = opts.lpips_dir.map(|_| results.iter().filter_map(|r| r.mlpips).sum::<f64>() / n);
    Ok(NvsReport { frames: results, means, mlpips })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub frames: Vec<(usize, PckResult)>,
    /// Mean of per-frame PCK-T.
    pub pck_t: f64,
}

/// PCK-T of predicted keypoints against the manifest's annotations, averaged
/// over the predicted frames.
pub fn sequence_pck(m: &SequenceManifest, pred: &std::collections::BTreeMap<usize, Vec<crate::metrics::Keypoint>>, alpha: f64) -> Result<PckReport> {
    if pred.is_empty() {
        return Err(Error::Input("prediction file lists no frames".into()));
    }
    let mut frames = Vec::with_capacity(pred.len());
    for (&frame, kps) in pred {
        let cam = m.camera(frame).ok_or_else(|| Error::Input(format!("predicted frame {frame} is not in the manifest")))?;
        let gt_path = m.keypoint_file(frame).ok_or_else(|| Error::Input(format!("frame {frame} has no keypoint annotations")))?;
        let gt = KeypointSet { frame, image_size: cam.image_size, keypoints: io::read_keypoints(&gt_path)? };
        let p = KeypointSet { frame, image_size: cam.image_size, keypoints: kps.clone() };
        frames.push((frame, pck_transfer(&p, &gt, alpha)?));
    }
    let pck_t = frames.iter().map(|(_, r)| r.value()).sum::<f64>() / frames.len() as f64;
    Ok(PckReport { frames, pck_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricRegistry;
    use crate::synth::{analytic_emf, generate_orbit_capture, OrbitSpec, PlaneSpec};

    fn spec() -> OrbitSpec {
        OrbitSpec {
            n_frames: 6,
            n_test: 1,
            image_size: [32, 24],
            focal_length: 30.0,
            plane: PlaneSpec { velocity: [0.01, 0.004, 0.0], ..PlaneSpec::default() },
            ..OrbitSpec::default()
        }
    }

    #[test]
    fn file_pipeline_matches_analytic() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec();
        let m = generate_orbit_capture(&s, dir.path()).unwrap();
        let a = analytic_emf(&s);
        let ang = sequence_angular_emf(&m, None).unwrap();
        assert!((ang.omega_deg_per_s - a.omega_deg_per_s).abs() < 1e-9);
        let full = sequence_full_emf(&m, &FullEmfOptions::default()).unwrap();
        let want = a.omega_full.unwrap();
        assert!(((full.omega - want) / want).abs() < 1e-4, "{} vs {want}", full.omega);

        let reg = MetricRegistry::default();
        let rgb_dir = dir.path().join("rgb");
        let opts = NvsOptions {
            pred_dir: &rgb_dir,
            lpips_dir: None,
            rule: BetaRule::default(),
            metrics: reg.select(&["mpsnr", "mssim"]).unwrap(),
            no_mask: false,
        };
        let r = sequence_nvs(&m, &opts).unwrap();
        assert_eq!(r.means[0].1, f64::INFINITY);
        assert!(r.means[1].1 >= 1.0 - 1e-9);
    }

    #[test]
    fn missing_pair_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_orbit_capture(&spec(), dir.path()).unwrap();
        m.flow_pairs.retain(|p| !(p.src == 6 && p.dst == 2));
        let err = sequence_covisibility(&m, 6).unwrap_err();
        assert!(err.to_string().contains("(6, 2)"), "{err}");
    }
}
