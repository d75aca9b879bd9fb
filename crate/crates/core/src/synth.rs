//! Synthetic orbit captures with analytic ground truth.
//!
//! A pinhole camera orbits the look-at point in the `xz`-plane while a
//! checker-textured plane translates by a fixed vector per frame. Depth,
//! optical flow and keypoints follow in closed form, so every downstream
//! quantity (EMFs, co-visibility, metrics) has an exact reference.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::DepthMap;
use crate::flow::FlowField;
use crate::geom::{Camera, GeomError};
use crate::io::{self, DepthKind, FlowPairEntry, FrameEntry, IoError, SequenceManifest, Splits};
use crate::metrics::{ImageFrame, Keypoint};
use crate::raster::BinaryMask;

/// Flow written where a pixel has no surface; any chained lookup leaves the
/// image, so such pixels read as occluded.
pub const UNKNOWN_FLOW: f64 = 1e9;
pub const TRAIN_CAMERA_ID: &str = "orbit";
pub const TEST_CAMERA_ID: &str = "test";
const KEYPOINT_GRID: usize = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid orbit spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Plane `n̂·x = offset` at frame 0, translated by `velocity` per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
    pub velocity: [f64; 3],
    /// Edge length of a checker cell, world units.
    #[serde(default = "default_checker")]
    pub checker_size: f64,
}

fn default_checker() -> f64 {
    0.1
}

impl Default for PlaneSpec {
    fn default() -> Self {
        Self { normal: [0.0, 0.0, 1.0], offset: 0.0, velocity: [0.005, 0.002, 0.0], checker_size: default_checker() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub radius: f64,
    pub angular_step_deg: f64,
    pub fps: f64,
    pub n_frames: usize,
    #[serde(default)]
    pub lookat: [f64; 3],
    #[serde(default)]
    pub plane: PlaneSpec,
    /// `[width, height]`.
    pub image_size: [u32; 2],
    pub focal_length: f64,
    /// Held-out views, each halfway between two orbit positions.
    #[serde(default)]
    pub n_test: usize,
}

fn default_name() -> String {
    "synth-orbit".into()
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            name: default_name(),
            radius: 3.0,
            angular_step_deg: 1.0,
            fps: 30.0,
            n_frames: 30,
            lookat: [0.0; 3],
            plane: PlaneSpec::default(),
            image_size: [64, 48],
            focal_length: 60.0,
            n_test: 2,
        }
    }
}

impl OrbitSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return bad("radius must be positive");
        }
        if self.n_frames < 2 {
            return bad("n_frames must be at least 2");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !self.angular_step_deg.is_finite() {
            return bad("angular_step_deg must be finite");
        }
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return bad("focal_length must be positive");
        }
        if self.image_size[0] < 2 || self.image_size[1] < 2 {
            return bad("image must be at least 2x2 pixels");
        }
        let n = Vector3::from(self.plane.normal);
        if !(n.norm() > 0.0 && n.iter().all(|v| v.is_finite())) {
            return bad("plane normal must be a non-zero finite vector");
        }
        if !(self.plane.offset.is_finite() && self.plane.velocity.iter().all(|v| v.is_finite())) {
            return bad("plane offset and velocity must be finite");
        }
        if !(self.plane.checker_size > 0.0) {
            return bad("checker_size must be positive");
        }
        if self.lookat.iter().any(|v| !v.is_finite()) {
            return bad("lookat must be finite");
        }
        Ok(())
    }

    pub fn lookat(&self) -> Vector3<f64> {
        Vector3::from(self.lookat)
    }

    /// Camera at orbit angle `angle_deg`, aimed at the look-at point.
    pub fn camera_at_angle(&self, angle_deg: f64) -> Result<Camera, SynthError> {
        let a = angle_deg.to_radians();
        let pos = self.lookat() + Vector3::new(a.sin(), 0.0, -a.cos()) * self.radius;
        let [w, h] = self.image_size;
        let pp = Vector2::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        Ok(Camera::pinhole(self.focal_length, pp, (w, h)).looking_at(pos, self.lookat(), Vector3::y())?)
    }

    pub fn train_camera(&self, i: usize) -> Result<Camera, SynthError> {
        self.camera_at_angle(i as f64 * self.angular_step_deg)
    }

    /// Time (in frames) of test view `j`; the view sits at the orbit angle
    /// halfway between this frame and the next.
    pub fn test_time(&self, j: usize) -> usize {
        ((2 * j + 1) * (self.n_frames - 1) / (2 * self.n_test.max(1))).min(self.n_frames - 2)
    }

    pub fn test_camera(&self, j: usize) -> Result<Camera, SynthError> {
        self.camera_at_angle((self.test_time(j) as f64 + 0.5) * self.angular_step_deg)
    }

    /// FNV-1a over the serialized spec; keys the texture.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        fnv1a(&bytes, 0xcbf2_9ce4_8422_2325)
    }
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// The moving plane.
#[derive(Debug, Clone, Copy)]
struct Plane {
    n: Vector3<f64>,
    offset: f64,
    v: Vector3<f64>,
    origin: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    cell: f64,
    key: u64,
}

impl Plane {
    fn new(spec: &OrbitSpec) -> Self {
        let n = Vector3::from(spec.plane.normal).normalize();
        let a = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
        let e1 = n.cross(&a).normalize();
        let e2 = n.cross(&e1);
        let la = spec.lookat();
        Self {
            n,
            offset: spec.plane.offset,
            v: Vector3::from(spec.plane.velocity),
            origin: la - n * (n.dot(&la) - spec.plane.offset),
            e1,
            e2,
            cell: spec.plane.checker_size,
            key: spec.hash(),
        }
    }

    /// z-depth of the plane seen through `pixel` at time `t`.
    fn depth(&self, cam: &Camera, pixel: &Vector2<f64>, t: f64) -> Option<f64> {
        let nrm = cam.pixel_to_undistorted(pixel).ok()?;
        let d = cam.orientation.transpose() * Vector3::new(nrm.x, nrm.y, 1.0);
        let denom = self.n.dot(&d);
        if denom == 0.0 {
            return None;
        }
        let s = (self.offset + t * self.n.dot(&self.v) - self.n.dot(&cam.position)) / denom;
        (s > 0.0 && s.is_finite()).then_some(s)
    }

    fn color(&self, x: &Vector3<f64>, t: f64) -> [f64; 3] {
        let p = x - self.v * t - self.origin;
        let (i, j) = ((p.dot(&self.e1) / self.cell).floor() as i64, (p.dot(&self.e2) / self.cell).floor() as i64);
        let mut buf = [0u8; 16];
        buf[..8].copy_from_slice(&i.to_le_bytes());
        buf[8..].copy_from_slice(&j.to_le_bytes());
        let h = fnv1a(&buf, self.key);
        let light = (i + j).rem_euclid(2) == 0;
        std::array::from_fn(|c| {
            let tint = ((h >> (8 * c)) & 0x3f) as u32;
            let base = if light { 160 } else { 40 };
            (base + tint) as f64 / 255.0
        })
    }

    fn keypoint_positions(&self) -> Vec<Vector3<f64>> {
        let half = (KEYPOINT_GRID - 1) as f64 / 2.0;
        let step = 1.5 * self.cell;
        (0..KEYPOINT_GRID * KEYPOINT_GRID)
            .map(|k| {
                let (a, b) = ((k % KEYPOINT_GRID) as f64 - half, (k / KEYPOINT_GRID) as f64 - half);
                self.origin + self.e1 * (a * step) + self.e2 * (b * step)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub index: usize,
    pub time: f64,
    pub camera_id: &'static str,
    pub camera: Camera,
    pub depth: DepthMap,
    pub mask: BinaryMask,
    pub rgb: ImageFrame,
    pub keypoints: Vec<Keypoint>,
}

/// `fwd` maps `src → dst`, `bwd` maps `dst → src`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub src: usize,
    pub dst: usize,
    pub fwd: FlowField,
    pub bwd: FlowField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitCapture {
    pub spec: OrbitSpec,
    /// Orbit frames `0..n_frames`, then test views.
    pub frames: Vec<RenderedFrame>,
    /// Consecutive orbit pairs `(t, t+1)`, then test-to-orbit pairs.
    pub pairs: Vec<RenderedPair>,
}

impl OrbitCapture {
    pub fn train(&self) -> &[RenderedFrame] {
        &self.frames[..self.spec.n_frames]
    }

    pub fn test(&self) -> &[RenderedFrame] {
        &self.frames[self.spec.n_frames..]
    }

    pub fn pair(&self, src: usize, dst: usize) -> Option<&RenderedPair> {
        self.pairs.iter().find(|p| p.src == src && p.dst == dst)
    }
}

fn render_frame(plane: &Plane, index: usize, time: f64, camera_id: &'static str, camera: Camera) -> RenderedFrame {
    let (w, h) = (camera.width(), camera.height());
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    let mut rgb = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        let px = Vector2::new((i % w) as f64, (i / w) as f64);
        if let Some(z) = plane.depth(&camera, &px, time) {
            depth[i] = z;
            mask[i] = true;
            let x = camera.backproject(&px, z).expect("positive depth");
            rgb[3 * i..3 * i + 3].copy_from_slice(&plane.color(&x, time));
        }
    }
    let keypoints = plane
        .keypoint_positions()
        .iter()
        .enumerate()
        .map(|(id, p)| {
            let x = p + plane.v * time;
            let (position, visible) = match camera.project(&x) {
                Ok(u) => (u, u.x >= 0.0 && u.y >= 0.0 && u.x <= (w - 1) as f64 && u.y <= (h - 1) as f64),
                Err(_) => (Vector2::zeros(), false),
            };
            Keypoint { id: id as u32, position, visible }
        })
        .collect();
    RenderedFrame {
        index,
        time,
        camera_id,
        depth: DepthMap { width: w, height: h, data: depth },
        mask: BinaryMask { width: w, height: h, data: mask },
        rgb: ImageFrame { width: w, height: h, data: rgb },
        camera,
        keypoints,
    }
}

/// Flow from `a` to `b`: each visible surface point moves with the plane and
/// is reprojected into `b`.
fn analytic_flow(plane: &Plane, a: &RenderedFrame, b: &RenderedFrame) -> FlowField {
    let (w, h) = (a.depth.width, a.depth.height);
    let shift = plane.v * (b.time - a.time);
    let data = (0..w * h)
        .map(|i| {
            let z = a.depth.data[i];
            let unknown = Vector2::repeat(UNKNOWN_FLOW);
            if z <= 0.0 {
                return unknown;
            }
            let px = Vector2::new((i % w) as f64, (i / w) as f64);
            let x = a.camera.backproject(&px, z).expect("positive depth") + shift;
            b.camera.project(&x).map_or(unknown, |u| u - px)
        })
        .collect();
    FlowField { width: w, height: h, data, src_frame: a.index, dst_frame: b.index }
}

/// Renders the capture in memory.
pub fn render_orbit(spec: &OrbitSpec) -> Result<OrbitCapture, SynthError> {
    spec.validate()?;
    let plane = Plane::new(spec);
    let n = spec.n_frames;
    let mut views = Vec::with_capacity(n + spec.n_test);
    for i in 0..n {
        views.push((i, i as f64, TRAIN_CAMERA_ID, spec.train_camera(i)?));
    }
    for j in 0..spec.n_test {
        views.push((n + j, spec.test_time(j) as f64, TEST_CAMERA_ID, spec.test_camera(j)?));
    }
    let frames: Vec<RenderedFrame> = views
        .into_par_iter()
        .map(|(index, time, id, cam)| render_frame(&plane, index, time, id, cam))
        .collect();

    let mut links: Vec<(usize, usize)> = (0..n - 1).map(|t| (t, t + 1)).collect();
    for j in 0..spec.n_test {
        links.extend((0..n).map(|k| (n + j, k)));
    }
    let pairs = links
        .into_par_iter()
        .map(|(s, d)| RenderedPair {
            src: s,
            dst: d,
            fwd: analytic_flow(&plane, &frames[s], &frames[d]),
            bwd: analytic_flow(&plane, &frames[d], &frames[s]),
        })
        .collect();
    Ok(OrbitCapture { spec: spec.clone(), frames, pairs })
}

/// Writes a rendered capture under `out_dir` and returns the loaded manifest.
pub fn write_capture(cap: &OrbitCapture, out_dir: &Path) -> Result<SequenceManifest, SynthError> {
    let spec = &cap.spec;
    let entries: Vec<FrameEntry> = cap
        .frames
        .par_iter()
        .map(|f| -> Result<FrameEntry, IoError> {
            let stem = format!("{:05}", f.index);
            let e = FrameEntry {
                index: f.index,
                time: Some(f.time),
                camera_id: Some(f.camera_id.to_string()),
                rgb: format!("rgb/{stem}.png").into(),
                camera: format!("camera/{stem}.json").into(),
                depth: Some(format!("depth/{stem}.dpth").into()),
                mask: Some(format!("mask/{stem}.png").into()),
            };
            io::write_rgb(&out_dir.join(&e.rgb), &f.rgb)?;
            io::write_camera(&out_dir.join(&e.camera), &f.camera)?;
            io::write_depth(&out_dir.join(e.depth.as_ref().unwrap()), &f.depth)?;
            io::write_mask(&out_dir.join(e.mask.as_ref().unwrap()), &f.mask)?;
            io::write_keypoints(&out_dir.join(format!("keypoints/{stem}.json")), &f.keypoints)?;
            Ok(e)
        })
        .collect::<Result<_, _>>()?;
    let flow_pairs: Vec<FlowPairEntry> = cap
        .pairs
        .par_iter()
        .map(|p| -> Result<FlowPairEntry, IoError> {
            let e = FlowPairEntry {
                src: p.src,
                dst: p.dst,
                fwd: format!("flow/{:05}_{:05}.flo", p.src, p.dst).into(),
                bwd: format!("flow/{:05}_{:05}.flo", p.dst, p.src).into(),
            };
            io::write_flow(&out_dir.join(&e.fwd), &p.fwd)?;
            io::write_flow(&out_dir.join(&e.bwd), &p.bwd)?;
            Ok(e)
        })
        .collect::<Result<_, _>>()?;
    let mut splits = Splits::default();
    splits.train.insert(TRAIN_CAMERA_ID.into(), (0..spec.n_frames).collect());
    if spec.n_test > 0 {
        splits.test.insert(TEST_CAMERA_ID.into(), (spec.n_frames..spec.n_frames + spec.n_test).collect());
    }
    let keypoints: BTreeMap<String, _> = cap
        .frames
        .iter()
        .map(|f| (f.index.to_string(), format!("keypoints/{:05}.json", f.index).into()))
        .collect();
    let manifest = SequenceManifest {
        name: spec.name.clone(),
        fps: spec.fps,
        depth_kind: DepthKind::Metric,
        lookat: Some(spec.lookat),
        anchors: None,
        frames: entries,
        flow_pairs,
        splits,
        keypoints,
        root: out_dir.to_path_buf(),
        cameras: vec![],
    };
    let path = out_dir.join("manifest.json");
    io::save_manifest(&path, &manifest)?;
    let spec_path = out_dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec).expect("spec serializes") + "\n")
        .map_err(|source| IoError::Io { path: spec_path, source })?;
    Ok(io::load_manifest(&path)?)
}

/// Renders and writes a capture; see [`render_orbit`] and [`write_capture`].
pub fn generate_orbit_capture(spec: &OrbitSpec, out_dir: &Path) -> Result<SequenceManifest, SynthError> {
    write_capture(&render_orbit(spec)?, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticEmf {
    /// Full EMF; absent for a static scene.
    pub omega_full: Option<f64>,
    pub omega_deg_per_s: f64,
}

/// Closed-form EMFs: `ω = |step|·fps` and `Ω = 2r·sin(step/2) / ‖v_s‖`.
pub fn analytic_emf(spec: &OrbitSpec) -> AnalyticEmf {
    let step = spec.angular_step_deg.abs();
    let vs = Vector3::from(spec.plane.velocity).norm();
    let chord = 2.0 * spec.radius * (step.to_radians() / 2.0).sin();
    AnalyticEmf { omega_full: (vs > 0.0).then(|| chord / vs), omega_deg_per_s: step * spec.fps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::occlusion_mask;

    fn small(step: f64, v: [f64; 3]) -> OrbitSpec {
        OrbitSpec {
            angular_step_deg: step,
            n_frames: 4,
            n_test: 1,
            image_size: [24, 16],
            focal_length: 20.0,
            plane: PlaneSpec { velocity: v, ..PlaneSpec::default() },
            ..OrbitSpec::default()
        }
    }

    #[test]
    fn analytic_values() {
        let s = OrbitSpec { radius: 3.0, angular_step_deg: 1.0, fps: 30.0, ..OrbitSpec::default() };
        assert!((analytic_emf(&s).omega_deg_per_s - 30.0).abs() < 1e-12);
        let s = OrbitSpec { radius: 3.0, angular_step_deg: 0.5, plane: PlaneSpec { velocity: [0.01, 0.0, 0.0], ..PlaneSpec::default() }, ..OrbitSpec::default() };
        let om = analytic_emf(&s).omega_full.unwrap();
        assert!((om - 2.0 * 3.0 * 0.25f64.to_radians().sin() / 0.01).abs() < 1e-12);
        assert!((om - 2.61799).abs() < 1e-5);
        // tangential speed 1 m/s on a 3 m orbit at 30 fps
        let step = (2.0 * (1.0f64 / 30.0 / 6.0).asin()).to_degrees();
        let s = OrbitSpec { radius: 3.0, angular_step_deg: step, fps: 30.0, ..OrbitSpec::default() };
        assert!((analytic_emf(&s).omega_deg_per_s - 19.0986).abs() < 1e-4);
        assert_eq!(analytic_emf(&small(1.0, [0.0; 3])).omega_full, None);
    }

    #[test]
    fn static_scene_and_camera() {
        let cap = render_orbit(&small(0.0, [0.0; 3])).unwrap();
        for p in &cap.pairs {
            assert!(p.fwd.data.iter().all(|f| f.norm() < 1e-9));
        }
        for f in cap.train() {
            assert_eq!(f.rgb, cap.frames[0].rgb);
            assert_eq!(f.depth, cap.frames[0].depth);
        }
    }

    #[test]
    fn static_scene_flow_is_camera_induced() {
        let cap = render_orbit(&small(1.0, [0.0; 3])).unwrap();
        let (a, b) = (&cap.frames[0], &cap.frames[1]);
        let p = cap.pair(0, 1).unwrap();
        for i in (0..a.depth.data.len()).step_by(7) {
            let px = Vector2::new((i % 24) as f64, (i / 24) as f64);
            let x = a.camera.backproject(&px, a.depth.data[i]).unwrap();
            let u = b.camera.project(&x).unwrap();
            assert!((p.fwd.data[i] - (u - px)).norm() < 1e-9);
        }
    }

    #[test]
    fn occlusion_only_at_image_exits() {
        let cap = render_orbit(&small(2.0, [0.02, 0.01, 0.0])).unwrap();
        for p in &cap.pairs {
            let occ = occlusion_mask(&p.fwd, &p.bwd).unwrap();
            for (i, &o) in occ.data.iter().enumerate() {
                let px = Vector2::new((i % 24) as f64, (i / 24) as f64);
                let target = px + p.fwd.data[i];
                let inside = target.x >= 0.0 && target.y >= 0.0 && target.x <= 23.0 && target.y <= 15.0;
                assert_eq!(o, !inside, "pair ({}, {}) pixel {i}", p.src, p.dst);
            }
        }
    }

    #[test]
    fn depth_and_mask_cover_the_plane() {
        let cap = render_orbit(&small(1.0, [0.0; 3])).unwrap();
        let f = &cap.frames[0];
        assert_eq!(f.mask.count(), 24 * 16);
        // camera on the optical axis looks straight at the plane z = 0 from z = -3
        assert!((f.depth.get(0, 0) - 3.0).abs() < 1e-12);
        assert!(f.keypoints.iter().all(|k| k.visible));
    }

    #[test]
    fn test_views_sit_between_orbit_positions() {
        let s = OrbitSpec { n_frames: 10, n_test: 3, ..OrbitSpec::default() };
        for j in 0..3 {
            let t = s.test_time(j);
            assert!(t + 1 < s.n_frames);
            let c = s.test_camera(j).unwrap();
            let a = s.train_camera(t).unwrap();
            let b = s.train_camera(t + 1).unwrap();
            assert!(((c.position - a.position).norm() - (c.position - b.position).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn texture_is_keyed_by_spec() {
        let a = render_orbit(&small(1.0, [0.0; 3])).unwrap();
        let b = render_orbit(&small(1.0, [0.0; 3])).unwrap();
        let mut s = small(1.0, [0.0; 3]);
        s.name = "other".into();
        let c = render_orbit(&s).unwrap();
        assert_eq!(a.frames[0].rgb, b.frames[0].rgb);
        assert_ne!(a.frames[0].rgb, c.frames[0].rgb);
    }

    #[test]
    fn invalid_specs() {
        assert!(render_orbit(&OrbitSpec { radius: 0.0, ..OrbitSpec::default() }).is_err());
        assert!(render_orbit(&OrbitSpec { n_frames: 1, ..OrbitSpec::default() }).is_err());
    }

    #[test]
    fn written_capture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_orbit_capture(&small(1.0, [0.01, 0.0, 0.0]), dir.path()).unwrap();
        assert_eq!(m.frames.len(), 5);
        assert_eq!(m.train_frames(), vec![0, 1, 2, 3]);
        assert_eq!(m.splits.test_frames(), vec![4]);
        assert!(m.flow_pair(0, 1).is_some());
        assert!(m.flow_pair(4, 3).is_some());
        assert_eq!(m.cameras.len(), 5);
    }
}
