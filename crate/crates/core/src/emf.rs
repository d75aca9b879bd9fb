//! Effective multi-view factors.
//!
//! * Full EMF `Ω`: expectation over consecutive frame pairs of the mean ratio
//!   between camera displacement and per-pixel 3D scene flow.
//! * Angular EMF `ω`: mean angle subtended at the look-at point by consecutive
//!   camera centres, scaled by the frame rate, in degrees per second.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::depth::{DepthInterpolation, DepthMap};
use crate::flow::{is_occluded, FlowField};
use crate::geom::{triangulate_lookat, Camera, GeomError};
use crate::raster::BinaryMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmfError {
    #[error("raster dimensions differ for frame pair starting at t={t}: {what}")]
    DimensionMismatch { t: usize, what: String },
    #[error("no valid scene-flow pixels in any frame pair (first pair t={first_pair})")]
    EmptyStatistics { first_pair: usize },
    #[error("need at least 2 cameras, got {0}")]
    TooFewCameras(usize),
    #[error("frame rate must be positive, got {0}")]
    InvalidFps(f64),
    #[error("eps_flow must be positive, got {0}")]
    InvalidEps(f64),
    #[error("camera {index} coincides with the look-at point")]
    CameraAtLookAt { index: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Why a pixel did or did not produce a scene-flow vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleStatus {
    Ok,
    Occluded,
    OffImage,
    InvalidDepth,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneFlowSample {
    pub pixel: Vector2<f64>,
    pub x_t: Vector3<f64>,
    pub x_t1: Vector3<f64>,
    /// `x_t1 − x_t` when valid, zero otherwise.
    pub flow3d: Vector3<f64>,
    pub status: SampleStatus,
}

impl SceneFlowSample {
    pub fn is_valid(&self) -> bool {
        self.status == SampleStatus::Ok
    }

    fn rejected(pixel: Vector2<f64>, status: SampleStatus) -> Self {
        Self { pixel, x_t: Vector3::zeros(), x_t1: Vector3::zeros(), flow3d: Vector3::zeros(), status }
    }
}

/// Inputs for one consecutive pair `(t, t+1)`.
#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub t: usize,
    pub cam_t: &'a Camera,
    pub cam_t1: &'a Camera,
    pub depth_t: &'a DepthMap,
    pub depth_t1: &'a DepthMap,
    pub fwd: &'a FlowField,
    pub bwd: &'a FlowField,
    pub fg_mask: &'a BinaryMask,
}

impl FramePair<'_> {
    fn check_dims(&self) -> Result<(usize, usize), EmfError> {
        let (w, h) = (self.depth_t.width, self.depth_t.height);
        let dims = [
            ("depth_t1", self.depth_t1.width, self.depth_t1.height),
            ("forward flow", self.fwd.width, self.fwd.height),
            ("backward flow", self.bwd.width, self.bwd.height),
            ("foreground mask", self.fg_mask.width, self.fg_mask.height),
        ];
        for (what, dw, dh) in dims {
            if (dw, dh) != (w, h) {
                return Err(EmfError::DimensionMismatch { t: self.t, what: format!("{what} is {dw}x{dh}, depth_t is {w}x{h}") });
            }
        }
        Ok((w, h))
    }
}

/// Per-pixel 3D scene flow between `t` and `t+1` from depth and optical flow.
pub fn compute_scene_flow(pair: &FramePair<'_>, interp: DepthInterpolation) -> Result<Vec<SceneFlowSample>, EmfError> {
    let (w, h) = pair.check_dims()?;
    let samples = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let u = Vector2::new(x as f64, y as f64);
            if !pair.fg_mask.data[i] {
                return SceneFlowSample::rejected(u, SampleStatus::Background);
            }
            let z = pair.depth_t.data[i];
            if !(z > 0.0 && z.is_finite()) {
                return SceneFlowSample::rejected(u, SampleStatus::InvalidDepth);
            }
            let u1 = u + pair.fwd.data[i];
            if pair.bwd.sample(&u1).is_err() {
                return SceneFlowSample::rejected(u, SampleStatus::OffImage);
            }
            if is_occluded(pair.fwd, pair.bwd, x, y) {
                return SceneFlowSample::rejected(u, SampleStatus::Occluded);
            }
            let Some(z1) = pair.depth_t1.sample(&u1, interp) else {
                return SceneFlowSample::rejected(u, SampleStatus::InvalidDepth);
            };
            match (pair.cam_t.backproject(&u, z), pair.cam_t1.backproject(&u1, z1)) {
                (Ok(x_t), Ok(x_t1)) => SceneFlowSample { pixel: u, x_t, x_t1, flow3d: x_t1 - x_t, status: SampleStatus::Ok },
                _ => SceneFlowSample::rejected(u, SampleStatus::InvalidDepth),
            }
        })
        .collect();
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairStats {
    pub t: usize,
    pub camera_motion: f64,
    /// Mean of per-pixel ratios; `None` when no pixel contributed.
    pub mean_ratio: Option<f64>,
    pub valid_pixel_count: usize,
    pub excluded_small_flow: usize,
    pub occluded: usize,
    pub off_image: usize,
    pub invalid_depth: usize,
    pub background: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullEmf {
    pub omega: f64,
    pub eps_flow: f64,
    pub pairs: Vec<PairStats>,
}

fn pair_stats(pair: &FramePair<'_>, eps_flow: f64, interp: DepthInterpolation) -> Result<PairStats, EmfError> {
    let samples = compute_scene_flow(pair, interp)?;
    let camera_motion = (pair.cam_t1.position - pair.cam_t.position).norm();
    let mut stats = PairStats {
        t: pair.t,
        camera_motion,
        mean_ratio: None,
        valid_pixel_count: 0,
        excluded_small_flow: 0,
        occluded: 0,
        off_image: 0,
        invalid_depth: 0,
        background: 0,
    };
    let mut sum = 0.0;
    for s in &samples {
        match s.status {
            SampleStatus::Ok => {
                let m = s.flow3d.norm();
                if m < eps_flow {
                    stats.excluded_small_flow += 1;
                } else {
                    sum += camera_motion / m;
                    stats.valid_pixel_count += 1;
                }
            }
            SampleStatus::Occluded => stats.occluded += 1,
            SampleStatus::OffImage => stats.off_image += 1,
            SampleStatus::InvalidDepth => stats.invalid_depth += 1,
            SampleStatus::Background => stats.background += 1,
        }
    }
    if stats.valid_pixel_count > 0 {
        stats.mean_ratio = Some(sum / stats.valid_pixel_count as f64);
    }
    Ok(stats)
}

/// Full EMF over consecutive frame pairs. Pairs without any contributing
/// pixel are reported but left out of the outer mean.
pub fn full_emf(pairs: &[FramePair<'_>], eps_flow: f64, interp: DepthInterpolation) -> Result<FullEmf, EmfError> {
    if !(eps_flow > 0.0 && eps_flow.is_finite()) {
        return Err(EmfError::InvalidEps(eps_flow));
    }
    let stats = pairs
        .par_iter()
        .map(|p| pair_stats(p, eps_flow, interp))
        .collect::<Result<Vec<_>, _>>()?;
    full_emf_from_stats(stats, eps_flow)
}

/// Reduces per-pair statistics in index order.
pub fn full_emf_from_stats(stats: Vec<PairStats>, eps_flow: f64) -> Result<FullEmf, EmfError> {
    let ratios: Vec<f64> = stats.iter().filter_map(|s| s.mean_ratio).collect();
    if ratios.is_empty() {
        return Err(EmfError::EmptyStatistics { first_pair: stats.first().map_or(0, |s| s.t) });
    }
    let omega = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(FullEmf { omega, eps_flow, pairs: stats })
}

/// Statistics for a single pair; used by callers that stream pairs from disk.
pub fn full_emf_pair(pair: &FramePair<'_>, eps_flow: f64, interp: DepthInterpolation) -> Result<PairStats, EmfError> {
    pair_stats(pair, eps_flow, interp)
}

/// Default scene-flow cutoff: `1e-6` times the median camera-to-look-at distance.
pub fn default_eps_flow(cams: &[Camera], lookat: &Vector3<f64>) -> f64 {
    let mut d: Vec<f64> = cams.iter().map(|c| (c.position - lookat).norm()).collect();
    d.sort_by(f64::total_cmp);
    let median = if d.is_empty() {
        1.0
    } else if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    1e-6 * if median > 0.0 { median } else { 1.0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngularEmf {
    pub omega_deg_per_s: f64,
    pub fps: f64,
    pub lookat: Vector3<f64>,
    /// RMS distance to the optical axes when the look-at point was triangulated.
    pub lookat_residual_rms: Option<f64>,
    /// Angle between consecutive camera centres, degrees.
    pub pair_angles_deg: Vec<f64>,
}

/// Angle in radians between `a − o1` and `a − o2`.
pub fn subtended_angle(lookat: &Vector3<f64>, o1: &Vector3<f64>, o2: &Vector3<f64>) -> Option<f64> {
    let d1 = lookat - o1;
    let d2 = lookat - o2;
    let n = d1.norm() * d2.norm();
    (n > 0.0).then(|| (d1.dot(&d2) / n).clamp(-1.0, 1.0).acos())
}

/// Angular EMF of a time-ordered camera trajectory. The look-at point is
/// triangulated from the optical axes when not given.
pub fn compute_angular_emf(cams: &[Camera], fps: f64, lookat: Option<Vector3<f64>>) -> Result<AngularEmf, EmfError> {
    if cams.len() < 2 {
        return Err(EmfError::TooFewCameras(cams.len()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(EmfError::InvalidFps(fps));
    }
    let (lookat, residual) = match lookat {
        Some(a) => (a, None),
        None => {
            let la = triangulate_lookat(cams)?;
            (la.point, Some(la.residual_rms))
        }
    };
    let mut angles = Vec::with_capacity(cams.len() - 1);
    for (i, w) in cams.windows(2).enumerate() {
        let theta = subtended_angle(&lookat, &w[0].position, &w[1].position).ok_or_else(|| {
            let index = if (lookat - w[0].position).norm() == 0.0 { i } else { i + 1 };
            EmfError::CameraAtLookAt { index }
        })?;
        angles.push(theta.to_degrees());
    }
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    Ok(AngularEmf {
        omega_deg_per_s: mean * fps,
        fps,
        lookat,
        lookat_residual_rms: residual,
        pair_angles_deg: angles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn orbit_cams(n: usize, radius: f64, step_deg: f64) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let a = (i as f64 * step_deg).to_radians();
                Camera::pinhole(100.0, Vector2::new(32.0, 24.0), (64, 48))
                    .looking_at(Vector3::new(radius * a.sin(), 0.0, -radius * a.cos()), Vector3::zeros(), Vector3::y())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn one_degree_per_frame_at_30fps() {
        let cams = orbit_cams(20, 3.0, 1.0);
        let r = compute_angular_emf(&cams, 30.0, Some(Vector3::zeros())).unwrap();
        assert!((r.omega_deg_per_s - 30.0).abs() < 1e-9, "{}", r.omega_deg_per_s);
        let r = compute_angular_emf(&cams, 30.0, None).unwrap();
        assert!((r.omega_deg_per_s - 30.0).abs() < 1e-9);
    }

    #[test]
    fn static_camera_has_zero_omega() {
        let cams = vec![orbit_cams(1, 3.0, 0.0)[0].clone(); 5];
        let r = compute_angular_emf(&cams, 30.0, Some(Vector3::zeros())).unwrap();
        assert_eq!(r.omega_deg_per_s, 0.0);
    }

    #[test]
    fn tangential_speed_scenario() {
        // 1 m/s along a 3 m orbit: chord per frame = 1/fps
        for fps in [15.0, 30.0, 60.0] {
            let step = 2.0 * (1.0f64 / (2.0 * 3.0 * fps)).asin();
            let cams = orbit_cams(10, 3.0, step.to_degrees());
            let r = compute_angular_emf(&cams, fps, None).unwrap();
            assert!((r.omega_deg_per_s - 19.0986).abs() < 0.05, "{}", r.omega_deg_per_s);
        }
    }

    #[test]
    fn camera_on_lookat_is_degenerate() {
        let cams = orbit_cams(3, 3.0, 1.0);
        let lookat = cams[1].position;
        assert!(matches!(compute_angular_emf(&cams, 30.0, Some(lookat)), Err(EmfError::CameraAtLookAt { index: 1 })));
    }

    #[test]
    fn angular_input_validation() {
        let cams = orbit_cams(3, 3.0, 1.0);
        assert!(matches!(compute_angular_emf(&cams[..1], 30.0, None), Err(EmfError::TooFewCameras(1))));
        assert!(matches!(compute_angular_emf(&cams, 0.0, None), Err(EmfError::InvalidFps(_))));
        // parallel axes: triangulation failure propagates
        let same = vec![cams[0].clone(), cams[0].clone()];
        assert!(matches!(compute_angular_emf(&same, 30.0, None), Err(EmfError::Geom(_))));
    }

    struct Rasters {
        cams: [Camera; 2],
        depth: DepthMap,
        flow0: FlowField,
        mask: BinaryMask,
    }

    fn static_rasters() -> Rasters {
        let cam = Camera::pinhole(50.0, Vector2::new(4.0, 3.0), (9, 7));
        Rasters {
            cams: [cam.clone(), cam],
            depth: DepthMap::constant(9, 7, 1.0),
            flow0: FlowField::constant(9, 7, Vector2::zeros()),
            mask: BinaryMask::filled(9, 7, true),
        }
    }

    #[test]
    fn static_scene_has_zero_scene_flow() {
        let r = static_rasters();
        let pair = FramePair {
            t: 0,
            cam_t: &r.cams[0],
            cam_t1: &r.cams[1],
            depth_t: &r.depth,
            depth_t1: &r.depth,
            fwd: &r.flow0,
            bwd: &r.flow0,
            fg_mask: &r.mask,
        };
        let s = compute_scene_flow(&pair, DepthInterpolation::Disparity).unwrap();
        assert!(s.iter().all(|s| s.is_valid() && s.flow3d == Vector3::zeros()));
        // every pixel is below eps → empty statistics
        assert!(matches!(full_emf(&[pair], 1e-6, DepthInterpolation::Disparity), Err(EmfError::EmptyStatistics { first_pair: 0 })));
    }

    #[test]
    fn status_codes() {
        let mut r = static_rasters();
        r.mask.data[0] = false;
        r.depth.data[1] = 0.0;
        let mut fwd = r.flow0.clone();
        fwd.data[8] = Vector2::new(5.0, 0.0); // exits the 9-wide image from x = 8
        fwd.data[9 + 2] = Vector2::new(3.0, 0.0); // inconsistent with zero backward flow
        let depth1 = DepthMap::constant(9, 7, 1.0);
        let pair = FramePair {
            t: 0,
            cam_t: &r.cams[0],
            cam_t1: &r.cams[1],
            depth_t: &r.depth,
            depth_t1: &depth1,
            fwd: &fwd,
            bwd: &r.flow0,
            fg_mask: &r.mask,
        };
        let s = compute_scene_flow(&pair, DepthInterpolation::Disparity).unwrap();
        assert_eq!(s[0].status, SampleStatus::Background);
        assert_eq!(s[1].status, SampleStatus::InvalidDepth);
        assert_eq!(s[8].status, SampleStatus::OffImage);
        assert_eq!(s[11].status, SampleStatus::Occluded);
        assert!(!s[11].is_valid());
        assert_eq!(s[12].status, SampleStatus::Ok);
    }

    #[test]
    fn constant_ratio_gives_exact_omega() {
        // camera steps 0.1 along x; every point moves 0.05 along x.
        // Static camera translation t: pixel flow f = (Δx_point − Δx_cam)·f/z.
        let cam0 = Camera::pinhole(50.0, Vector2::new(10.0, 8.0), (21, 17));
        let mut cam1 = cam0.clone();
        cam1.position = Vector3::new(0.1, 0.0, 0.0);
        let z = 2.0;
        let du = (0.05 - 0.1) * 50.0 / z;
        let depth = DepthMap::constant(21, 17, z);
        let fwd = FlowField::constant(21, 17, Vector2::new(du, 0.0));
        let bwd = fwd.negated();
        let mask = BinaryMask::filled(21, 17, true);
        let pair = FramePair { t: 3, cam_t: &cam0, cam_t1: &cam1, depth_t: &depth, depth_t1: &depth, fwd: &fwd, bwd: &bwd, fg_mask: &mask };
        let s = compute_scene_flow(&pair, DepthInterpolation::Disparity).unwrap();
        for v in s.iter().filter(|s| s.is_valid()) {
            assert!((v.flow3d - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-12);
        }
        let r = full_emf(&[pair], 1e-6, DepthInterpolation::Disparity).unwrap();
        assert!((r.omega - 2.0).abs() < 1e-9, "{}", r.omega);
        let p = &r.pairs[0];
        assert_eq!(p.t, 3);
        assert_eq!(p.valid_pixel_count + p.off_image, 21 * 17);
    }

    #[test]
    fn pairs_without_valid_pixels_are_skipped() {
        let stats = vec![
            PairStats { t: 0, camera_motion: 1.0, mean_ratio: None, valid_pixel_count: 0, excluded_small_flow: 3, occluded: 0, off_image: 0, invalid_depth: 0, background: 0 },
            PairStats { t: 1, camera_motion: 1.0, mean_ratio: Some(4.0), valid_pixel_count: 2, excluded_small_flow: 0, occluded: 0, off_image: 0, invalid_depth: 0, background: 0 },
            PairStats { t: 2, camera_motion: 1.0, mean_ratio: Some(2.0), valid_pixel_count: 2, excluded_small_flow: 0, occluded: 0, off_image: 0, invalid_depth: 0, background: 0 },
        ];
        assert_eq!(full_emf_from_stats(stats, 1e-6).unwrap().omega, 3.0);
    }

    proptest! {
        #[test]
        fn omega_is_linear_in_fps(step in 0.01f64..5.0, fps in 1.0f64..120.0, k in 0.1f64..10.0) {
            let cams = orbit_cams(6, 2.0, step);
            let a = compute_angular_emf(&cams, fps, Some(Vector3::zeros())).unwrap().omega_deg_per_s;
            let b = compute_angular_emf(&cams, fps * k, Some(Vector3::zeros())).unwrap().omega_deg_per_s;
            prop_assert!((b - a * k).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
