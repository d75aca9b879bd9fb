//! File formats and sequence manifests.
//!
//! * `.flo`: Middlebury optical flow (magic `202021.25` as f32, i32 width,
//!   i32 height, interleaved f32 `(u, v)`, little-endian).
//! * DPTH: `"DPTH"`, u32 version 1, u32 width, u32 height, u32 channels,
//!   then f32 little-endian row-major channel-interleaved values.
//! * PNG: 8-bit RGB frames and 8-bit grayscale masks (`> 127` is set).
//! * JSON: Nerfies-style cameras, keypoints, 2D–3D correspondences, anchors
//!   and the sequence manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::Correspondence2D3D;
use crate::covis::CovisibilityHeatmap;
use crate::depth::{Anchor, DepthMap, SparseAnchorSet};
use crate::flow::FlowField;
use crate::geom::{nearest_rotation, orthonormality_error, Camera, ORTHONORMAL_TOL};
use crate::metrics::{DistanceMap, ImageFrame, Keypoint};
use crate::raster::BinaryMask;
use crate::warp::GridWarp;

pub const FLO_MAGIC: f32 = 202021.25;
pub const DPTH_MAGIC: &[u8; 4] = b"DPTH";
pub const DPTH_VERSION: u32 = 1;
pub const DPTH_HEADER_LEN: usize = 20;
/// Orientations further than this from orthonormal are rejected on load.
pub const ORIENTATION_LOAD_TOL: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: bad magic {found}", path.display())]
    BadMagic { path: PathBuf, found: String },
    #[error("{}: unsupported DPTH version {version}", path.display())]
    BadVersion { path: PathBuf, version: u32 },
    #[error("{}: truncated payload, expected {expected} bytes, got {got}", path.display())]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("{}: payload size mismatch, expected {expected} bytes, got {got}", path.display())]
    SizeMismatch { path: PathBuf, expected: usize, got: usize },
    #[error("{}: invalid JSON: {msg}", path.display())]
    Json { path: PathBuf, msg: String },
    #[error("{}: schema violation: {msg}", path.display())]
    Schema { path: PathBuf, msg: String },
    #[error("{}: orientation is not orthonormal (max |RᵀR − I| entry {err:e} exceeds {ORIENTATION_LOAD_TOL:e})", path.display())]
    NonOrthonormal { path: PathBuf, err: f64 },
    #[error("{}: {what} file {} does not exist", manifest.display(), path.display())]
    MissingFile { manifest: PathBuf, path: PathBuf, what: String },
    #[error("{}: flow pair ({src}, {dst}) references missing file {}", manifest.display(), path.display())]
    MissingFlow { manifest: PathBuf, src: usize, dst: usize, path: PathBuf },
    #[error("{}: no flow pair ({src}, {dst})", manifest.display())]
    NoFlowPair { manifest: PathBuf, src: usize, dst: usize },
    #[error("{}: image: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
    #[error("{}: {msg}", path.display())]
    Invalid { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::Json { path: path.to_path_buf(), msg: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| IoError::Json { path: path.to_path_buf(), msg: e.to_string() })?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

// ---- .flo ----

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + flow.data.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for v in &flow.data {
        out.extend_from_slice(&(v.x as f32).to_le_bytes());
        out.extend_from_slice(&(v.y as f32).to_le_bytes());
    }
    out
}

/// `path` only labels errors.
pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<FlowField, IoError> {
    if bytes.len() < 12 {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected: 12, got: bytes.len() });
    }
    let magic = le_f32(bytes, 0);
    if magic != FLO_MAGIC {
        return Err(IoError::BadMagic { path: path.to_path_buf(), found: format!("{magic}") });
    }
    let w = le_u32(bytes, 4) as i32;
    let h = le_u32(bytes, 8) as i32;
    if w < 0 || h < 0 {
        return Err(IoError::Invalid { path: path.to_path_buf(), msg: format!("negative dimensions {w}x{h}") });
    }
    let (w, h) = (w as usize, h as usize);
    let expected = w * h * 8;
    let got = bytes.len() - 12;
    if got < expected {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected, got });
    }
    if got > expected {
        return Err(IoError::SizeMismatch { path: path.to_path_buf(), expected, got });
    }
    let data = (0..w * h)
        .map(|i| Vector2::new(le_f32(bytes, 12 + 8 * i) as f64, le_f32(bytes, 16 + 8 * i) as f64))
        .collect();
    FlowField::new(w, h, data).map_err(|e| IoError::Invalid { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn read_flow(path: &Path) -> Result<FlowField, IoError> {
    decode_flow(&read_bytes(path)?, path)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<(), IoError> {
    write_bytes(path, &encode_flow(flow))
}

// ---- DPTH ----

/// Raw contents of a DPTH container.
#[derive(Debug, Clone, PartialEq)]
pub struct DpthArray {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn encode_dpth(a: &DpthArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(DPTH_HEADER_LEN + a.data.len() * 4);
    out.extend_from_slice(DPTH_MAGIC);
    for v in [DPTH_VERSION, a.width as u32, a.height as u32, a.channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &a.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dpth(bytes: &[u8], path: &Path) -> Result<DpthArray, IoError> {
    if bytes.len() < DPTH_HEADER_LEN {
        return Err(IoError::Truncated { path: path.to_path_buf(), expected: DPTH_HEADER_LEN, got: bytes.len() });
    }
    if &bytes[..4] != DPTH_MAGIC {
        return Err(IoError::BadMagic { path: path.to_path_buf(), found: format!("{:?}", String::from_utf8_lossy(&bytes[..4])) });
    }
    let version = le_u32(bytes, 4);
    if version != DPTH_VERSION {
        return Err(IoError::BadVersion { path: path.to_path_buf(), version });
    }
    let (w, h, c) = (le_u32(bytes, 8) as usize, le_u32(bytes, 12) as usize, le_u32(bytes, 16) as usize);
    let expected = w * h * c * 4;
    let got = bytes.len() - DPTH_HEADER_LEN;
    if got != expected {
        return Err(IoError::SizeMismatch { path: path.to_path_buf(), expected, got });
    }
    let data = (0..w * h * c).map(|i| le_f32(bytes, DPTH_HEADER_LEN + 4 * i)).collect();
    Ok(DpthArray { width: w, height: h, channels: c, data })
}

pub fn read_dpth(path: &Path) -> Result<DpthArray, IoError> {
    decode_dpth(&read_bytes(path)?, path)
}

pub fn write_dpth(path: &Path, a: &DpthArray) -> Result<(), IoError> {
    if a.data.len() != a.width * a.height * a.channels {
        return Err(IoError::Invalid { path: path.to_path_buf(), msg: "DPTH data length does not match its shape".into() });
    }
    write_bytes(path, &encode_dpth(a))
}

/// Reads a single-channel depth map. Non-finite values become `0` (invalid).
pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    let a = read_dpth(path)?;
    if a.channels != 1 {
        return Err(IoError::Invalid { path: path.to_path_buf(), msg: format!("depth map must have 1 channel, got {}", a.channels) });
    }
    let data = a.data.iter().map(|&v| if v.is_finite() { v as f64 } else { 0.0 }).collect();
    DepthMap::new(a.width, a.height, data).map_err(|e| IoError::Invalid { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn write_depth(path: &Path, d: &DepthMap) -> Result<(), IoError> {
    write_dpth(path, &DpthArray { width: d.width, height: d.height, channels: 1, data: d.data.iter().map(|&v| v as f32).collect() })
}

pub fn write_heatmap(path: &Path, h: &CovisibilityHeatmap) -> Result<(), IoError> {
    write_dpth(path, &DpthArray { width: h.width, height: h.height, channels: 1, data: h.counts.iter().map(|&c| c as f32).collect() })
}

/// Reads a single-channel distance map (e.g. a spatial LPIPS output).
pub fn read_distance_map(path: &Path) -> Result<DistanceMap, IoError> {
    let a = read_dpth(path)?;
    if a.channels != 1 {
        return Err(IoError::Invalid { path: path.to_path_buf(), msg: format!("distance map must have 1 channel, got {}", a.channels) });
    }
    Ok(DistanceMap { width: a.width, height: a.height, data: a.data.iter().map(|&v| v as f64).collect() })
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    dims: [usize; 3],
    min: [f64; 3],
    max: [f64; 3],
}

/// Sidecar holding the lattice box: `<path>.json`.
pub fn grid_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Stores a grid warp as a 3-channel DPTH of width `nx` and height `ny·nz`.
pub fn write_grid_warp(path: &Path, g: &GridWarp) -> Result<(), IoError> {
    let [nx, ny, nz] = g.dims;
    let data = g.values.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect();
    write_dpth(path, &DpthArray { width: nx, height: ny * nz, channels: 3, data })?;
    write_json(&grid_sidecar_path(path), &GridSidecar { dims: g.dims, min: g.min.into(), max: g.max.into() })
}

pub fn read_grid_warp(path: &Path) -> Result<GridWarp, IoError> {
    let a = read_dpth(path)?;
    let side: GridSidecar = read_json(&grid_sidecar_path(path))?;
    let [nx, ny, nz] = side.dims;
    if a.channels != 3 || a.width != nx || a.height != ny * nz {
        return Err(IoError::Invalid {
            path: path.to_path_buf(),
            msg: format!("grid payload {}x{}x{} does not match dims {:?}", a.width, a.height, a.channels, side.dims),
        });
    }
    let values = a.data.chunks_exact(3).map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)).collect();
    GridWarp::new(side.dims, side.min.into(), side.max.into(), values).map_err(|e| IoError::Invalid { path: path.to_path_buf(), msg: e.to_string() })
}

// ---- PNG ----

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<ImageFrame, IoError> {
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| IoError::Image { path: path.to_path_buf(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    ImageFrame::new(w as usize, h as usize, data).map_err(|e| IoError::Invalid { path: path.to_path_buf(), msg: e.to_string() })
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_rgb(path: &Path, img: &ImageFrame) -> Result<(), IoError> {
    let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let out = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| IoError::Invalid { path: path.to_path_buf(), msg: "image buffer does not match its size".into() })?;
    save_png(path, |p| out.save_with_format(p, image::ImageFormat::Png))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, IoError> {
    let img = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| IoError::Image { path: path.to_path_buf(), msg: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b > 127).collect();
    Ok(BinaryMask::new(w as usize, h as usize, data).expect("decoder returns a full raster"))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), IoError> {
    let buf: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let out = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, buf)
        .ok_or_else(|| IoError::Invalid { path: path.to_path_buf(), msg: "mask buffer does not match its size".into() })?;
    save_png(path, |p| out.save_with_format(p, image::ImageFormat::Png))
}

fn save_png(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    save(path).map_err(|e| IoError::Image { path: path.to_path_buf(), msg: e.to_string() })
}

// ---- cameras ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub orientation: [[f64; 3]; 3],
    pub position: [f64; 3],
    pub focal_length: f64,
    pub principal_point: [f64; 2],
    #[serde(default)]
    pub skew: f64,
    #[serde(default = "one")]
    pub pixel_aspect_ratio: f64,
    #[serde(default)]
    pub radial_distortion: Vec<f64>,
    #[serde(default)]
    pub tangential_distortion: Vec<f64>,
    pub image_size: [u32; 2],
}

fn one() -> f64 {
    1.0
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let o = &c.orientation;
        Self {
            orientation: std::array::from_fn(|r| std::array::from_fn(|k| o[(r, k)])),
            position: c.position.into(),
            focal_length: c.focal_length,
            principal_point: c.principal_point.into(),
            skew: c.skew,
            pixel_aspect_ratio: c.pixel_aspect_ratio,
            radial_distortion: c.radial_distortion.to_vec(),
            tangential_distortion: c.tangential_distortion.to_vec(),
            image_size: [c.image_size.0, c.image_size.1],
        }
    }
}

impl CameraJson {
    /// Validates and converts. Orientations within the load tolerance of a
    /// rotation are projected onto the nearest rotation with a warning.
    pub fn to_camera(&self, path: &Path) -> Result<Camera, IoError> {
        let schema = |msg: String| IoError::Schema { path: path.to_path_buf(), msg };
        if self.radial_distortion.len() > 3 {
            return Err(schema(format!("radial_distortion has {} coefficients, at most 3 allowed", self.radial_distortion.len())));
        }
        if self.tangential_distortion.len() > 2 {
            return Err(schema(format!("tangential_distortion has {} coefficients, at most 2 allowed", self.tangential_distortion.len())));
        }
        let o = Matrix3::from_fn(|r, c| self.orientation[r][c]);
        if o.iter().any(|v| !v.is_finite()) {
            return Err(schema("orientation has non-finite entries".into()));
        }
        if o.determinant() < 0.0 {
            return Err(schema("orientation has negative determinant (reflection)".into()));
        }
        let err = orthonormality_error(&o);
        let orientation = if err > ORIENTATION_LOAD_TOL {
            return Err(IoError::NonOrthonormal { path: path.to_path_buf(), err });
        } else if err > ORTHONORMAL_TOL {
            log::warn!("{}: orientation off by {err:e}, projecting onto the nearest rotation", path.display());
            nearest_rotation(&o).ok_or_else(|| schema("orientation is singular".into()))?
        } else {
            o
        };
        let mut radial = [0.0; 3];
        radial[..self.radial_distortion.len()].copy_from_slice(&self.radial_distortion);
        let mut tangential = [0.0; 2];
        tangential[..self.tangential_distortion.len()].copy_from_slice(&self.tangential_distortion);
        let cam = Camera {
            orientation,
            position: Vector3::from(self.position),
            focal_length: self.focal_length,
            principal_point: Vector2::from(self.principal_point),
            skew: self.skew,
            pixel_aspect_ratio: self.pixel_aspect_ratio,
            radial_distortion: radial,
            tangential_distortion: tangential,
            image_size: (self.image_size[0], self.image_size[1]),
        };
        cam.validate().map_err(|e| schema(e.to_string()))?;
        Ok(cam)
    }
}

pub fn read_camera(path: &Path) -> Result<Camera, IoError> {
    read_json::<CameraJson>(path)?.to_camera(path)
}

pub fn write_camera(path: &Path, cam: &Camera) -> Result<(), IoError> {
    write_json(path, &CameraJson::from(cam))
}

// ---- annotations ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointJson {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    #[serde(default = "yes")]
    pub visible: bool,
}

fn yes() -> bool {
    true
}

impl From<KeypointJson> for Keypoint {
    fn from(k: KeypointJson) -> Self {
        Keypoint { id: k.id, position: Vector2::new(k.x, k.y), visible: k.visible }
    }
}

impl From<&Keypoint> for KeypointJson {
    fn from(k: &Keypoint) -> Self {
        KeypointJson { id: k.id, x: k.position.x, y: k.position.y, visible: k.visible }
    }
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>, IoError> {
    let raw: Vec<KeypointJson> = read_json(path)?;
    Ok(raw.into_iter().map(Keypoint::from).collect())
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint]) -> Result<(), IoError> {
    write_json(path, &kps.iter().map(KeypointJson::from).collect::<Vec<_>>())
}

/// Predicted keypoints for several frames: `{"<frame>": [{id, x, y, visible}]}`.
pub fn read_keypoint_predictions(path: &Path) -> Result<BTreeMap<usize, Vec<Keypoint>>, IoError> {
    let raw: BTreeMap<String, Vec<KeypointJson>> = read_json(path)?;
    raw.into_iter()
        .map(|(k, v)| {
            let frame = k.parse().map_err(|_| IoError::Schema { path: path.to_path_buf(), msg: format!("frame key {k:?} is not an index") })?;
            Ok((frame, v.into_iter().map(Keypoint::from).collect()))
        })
        .collect()
}

pub fn read_correspondences(path: &Path) -> Result<Vec<Correspondence2D3D>, IoError> {
    read_json(path)
}

pub fn write_correspondences(path: &Path, c: &[Correspondence2D3D]) -> Result<(), IoError> {
    write_json(path, &c)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AnchorJson {
    world: [f64; 3],
    frame: usize,
}

/// Sparse metric anchors: `[{world: [x, y, z], frame}]`.
pub fn read_anchors(path: &Path) -> Result<SparseAnchorSet, IoError> {
    let raw: Vec<AnchorJson> = read_json(path)?;
    Ok(SparseAnchorSet {
        points: raw.into_iter().map(|a| Anchor { world_position: Vector3::from(a.world), frame: a.frame }).collect(),
        source: path.display().to_string(),
    })
}

pub fn write_anchors(path: &Path, set: &SparseAnchorSet) -> Result<(), IoError> {
    let raw: Vec<AnchorJson> = set.points.iter().map(|a| AnchorJson { world: a.world_position.into(), frame: a.frame }).collect();
    write_json(path, &raw)
}

// ---- manifest ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthKind {
    #[default]
    Metric,
    /// Predicted up to a per-frame disparity scale and shift; needs anchors.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    /// Capture time in frame units; defaults to the index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<String>,
    pub rgb: PathBuf,
    pub camera: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Flow between two frames: `fwd` maps `src → dst`, `bwd` maps `dst → src`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPairEntry {
    pub src: usize,
    pub dst: usize,
    pub fwd: PathBuf,
    pub bwd: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub test: BTreeMap<String, Vec<usize>>,
}

impl Splits {
    fn sorted(map: &BTreeMap<String, Vec<usize>>) -> Vec<usize> {
        let mut v: Vec<usize> = map.values().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn train_frames(&self) -> Vec<usize> {
        Self::sorted(&self.train)
    }

    pub fn test_frames(&self) -> Vec<usize> {
        Self::sorted(&self.test)
    }
}

/// Sequence description. File paths are relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub name: String,
    pub fps: f64,
    #[serde(default)]
    pub depth_kind: DepthKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookat: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<PathBuf>,
    pub frames: Vec<FrameEntry>,
    #[serde(default)]
    pub flow_pairs: Vec<FlowPairEntry>,
    #[serde(default)]
    pub splits: Splits,
    #[serde(default)]
    pub keypoints: BTreeMap<String, PathBuf>,
    /// Directory the relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
    /// Cameras in frame order, filled in by [`load_manifest`].
    #[serde(skip)]
    pub cameras: Vec<Camera>,
}

impl SequenceManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn frame_position(&self, index: usize) -> Option<usize> {
        self.frames.binary_search_by_key(&index, |f| f.index).ok()
    }

    pub fn frame(&self, index: usize) -> Option<&FrameEntry> {
        self.frame_position(index).map(|i| &self.frames[i])
    }

    pub fn camera(&self, index: usize) -> Option<&Camera> {
        self.frame_position(index).and_then(|i| self.cameras.get(i))
    }

    pub fn flow_pair(&self, src: usize, dst: usize) -> Option<&FlowPairEntry> {
        self.flow_pairs.iter().find(|p| p.src == src && p.dst == dst)
    }

    /// Frames forming the monocular training sequence: the union of the
    /// training split, or every frame when no split is given.
    pub fn train_frames(&self) -> Vec<usize> {
        let t = self.splits.train_frames();
        if t.is_empty() {
            self.frames.iter().map(|f| f.index).collect()
        } else {
            t
        }
    }

    pub fn lookat_vector(&self) -> Option<Vector3<f64>> {
        self.lookat.map(Vector3::from)
    }

    pub fn keypoint_file(&self, frame: usize) -> Option<PathBuf> {
        self.keypoints.iter().find(|(k, _)| k.parse::<usize>().ok() == Some(frame)).map(|(_, p)| self.resolve(p))
    }
}

/// Loads and eagerly validates a manifest and its cameras.
pub fn load_manifest(path: &Path) -> Result<SequenceManifest, IoError> {
    let mut m: SequenceManifest = read_json(path)?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let schema = |msg: String| IoError::Schema { path: path.to_path_buf(), msg };
    let must_exist = |p: &Path, what: String| -> Result<(), IoError> {
        let full = m.root.join(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(IoError::MissingFile { manifest: path.to_path_buf(), path: full, what })
        }
    };

    if !(m.fps > 0.0 && m.fps.is_finite()) {
        return Err(schema(format!("fps must be positive, got {}", m.fps)));
    }
    if m.frames.is_empty() {
        return Err(schema("manifest lists no frames".into()));
    }
    if let Some(w) = m.frames.windows(2).find(|w| w[0].index >= w[1].index) {
        return Err(schema(format!("frame indices must be unique and increasing ({} then {})", w[0].index, w[1].index)));
    }
    if m.lookat.is_some_and(|a| a.iter().any(|v| !v.is_finite())) {
        return Err(schema("lookat must be finite".into()));
    }
    for f in &m.frames {
        must_exist(&f.rgb, format!("frame {} rgb", f.index))?;
        must_exist(&f.camera, format!("frame {} camera", f.index))?;
        if let Some(d) = &f.depth {
            must_exist(d, format!("frame {} depth", f.index))?;
        }
        if let Some(k) = &f.mask {
            must_exist(k, format!("frame {} mask", f.index))?;
        }
    }
    for p in &m.flow_pairs {
        for i in [p.src, p.dst] {
            if m.frame_position(i).is_none() {
                return Err(schema(format!("flow pair ({}, {}) references unknown frame {i}", p.src, p.dst)));
            }
        }
        for f in [&p.fwd, &p.bwd] {
            let full = m.root.join(f);
            if !full.is_file() {
                return Err(IoError::MissingFlow { manifest: path.to_path_buf(), src: p.src, dst: p.dst, path: full });
            }
        }
    }
    for (split, map) in [("train", &m.splits.train), ("test", &m.splits.test)] {
        for (cam_id, idx) in map {
            if let Some(i) = idx.iter().find(|&&i| m.frame_position(i).is_none()) {
                return Err(schema(format!("{split} split '{cam_id}' references unknown frame {i}")));
            }
        }
    }
    for (k, p) in &m.keypoints {
        let frame: usize = k.parse().map_err(|_| schema(format!("keypoint key {k:?} is not a frame index")))?;
        if m.frame_position(frame).is_none() {
            return Err(schema(format!("keypoints reference unknown frame {frame}")));
        }
        must_exist(p, format!("frame {frame} keypoints"))?;
    }
    if let Some(a) = &m.anchors {
        must_exist(a, "anchors".into())?;
    }
    if m.depth_kind == DepthKind::Relative && m.anchors.is_none() {
        return Err(schema("relative depth requires an anchors file".into()));
    }
    m.cameras = m.frames.iter().map(|f| read_camera(&m.root.join(&f.camera))).collect::<Result<_, _>>()?;
    Ok(m)
}

/// Writes the manifest JSON (paths as stored, i.e. relative to `root`).
pub fn save_manifest(path: &Path, m: &SequenceManifest) -> Result<(), IoError> {
    write_json(path, m)
}
