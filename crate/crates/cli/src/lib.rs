//! Command-line frontend for `monocheck`.
//!
//! [`run`] parses arguments, executes one subcommand and writes a report.
//! Exit codes: `0` success, `2` input or validation error, `3` numerical
//! failure (non-convergence, no consensus, empty statistics).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde_json::{json, Map, Value};

use monocheck::calib::{solve_pnp_ransac, PnpParams, DEFAULT_INLIER_PX, DEFAULT_MAX_ITERS};
use monocheck::covis::{covisibility_mask, BetaRule};
use monocheck::depth::{default_grad_threshold, filter_depth_edges, DepthInterpolation};
use monocheck::io::{self, load_manifest, SequenceManifest};
use monocheck::metrics::MetricRegistry;
use monocheck::sequence::{self, FullEmfOptions, NvsOptions};
use monocheck::synth::{analytic_emf, generate_orbit_capture, OrbitSpec};
use monocheck::{Error, ErrorKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "monocheck", version, about = "Evaluate monocular dynamic view synthesis captures and renderings")]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "MONOCHECK_THREADS")]
    pub threads: Option<usize>,
    /// Omit the `meta` block (tool version and timestamp) from reports.
    #[arg(long, global = true)]
    pub no_meta: bool,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Report destination; standard output when absent.
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Effective multi-view factors.
    #[command(subcommand)]
    Emf(EmfCommand),
    /// Co-visibility heatmaps and masks for the test frames.
    Covis(CovisArgs),
    /// Evaluation of renderings and correspondences.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Rig registration.
    #[command(subcommand)]
    Calib(CalibCommand),
    /// Depth map utilities.
    #[command(subcommand)]
    Depth(DepthCommand),
    /// Synthetic captures with analytic ground truth.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Subcommand)]
pub enum EmfCommand {
    /// Angular EMF ω in degrees per second.
    Angular(AngularArgs),
    /// Full EMF Ω from depth and optical flow.
    Full(FullArgs),
}

#[derive(Debug, Args)]
pub struct AngularArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Look-at point `x,y,z`; overrides the manifest and triangulation.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub lookat: Option<Vector3<f64>>,
}

#[derive(Debug, Args)]
pub struct FullArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Scene-flow magnitude below which pixels are excluded.
    #[arg(long)]
    pub eps_flow: Option<f64>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub lookat: Option<Vector3<f64>>,
    /// Interpolation of depth at flow targets: `disparity` or `depth`.
    #[arg(long, default_value = "disparity")]
    pub depth_interp: DepthInterpolation,
    /// Seed for disparity alignment; required for relative depth.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct BetaArgs {
    #[arg(long, default_value_t = 5)]
    pub beta_min: u32,
    #[arg(long, default_value_t = 0.1)]
    pub beta_frac: f64,
}

impl BetaArgs {
    fn rule(&self) -> Result<BetaRule, Error> {
        if !(self.beta_frac >= 0.0 && self.beta_frac.is_finite()) {
            return Err(Error::Input(format!("beta-frac must be non-negative, got {}", self.beta_frac)));
        }
        Ok(BetaRule { min: self.beta_min, frac: self.beta_frac })
    }
}

#[derive(Debug, Args)]
pub struct CovisArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Test frames to process; all test frames when omitted.
    #[arg(long = "test-frame")]
    pub test_frames: Vec<usize>,
    #[command(flatten)]
    pub beta: BetaArgs,
    /// Writes `<index>_heatmap.dpth` and `<index>_mask.png` per test frame.
    #[arg(long)]
    pub heatmap_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Masked novel-view metrics (mPSNR, mSSIM, optional mLPIPS).
    Nvs(NvsArgs),
    /// Keypoint transfer accuracy PCK-T.
    Pck(PckArgs),
}

#[derive(Debug, Args)]
pub struct NvsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions named like the ground-truth frames, or `<index>.png`.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Precomputed distance maps `<stem>_*.dpth` per test frame.
    #[arg(long)]
    pub lpips_dir: Option<PathBuf>,
    /// Comma-separated metric names.
    #[arg(long, value_delimiter = ',', default_value = "mpsnr,mssim")]
    pub metrics: Vec<String>,
    #[command(flatten)]
    pub beta: BetaArgs,
    /// Evaluate all pixels instead of the co-visible ones.
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Args)]
pub struct PckArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON object mapping frame index to predicted keypoints.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
}

#[derive(Debug, Subcommand)]
pub enum CalibCommand {
    /// RANSAC PnP over pooled 2D–3D correspondences.
    Pnp(PnpArgs),
}

#[derive(Debug, Args)]
pub struct PnpArgs {
    /// JSON array of `{world, pixel, frame}`.
    #[arg(long)]
    pub correspondences: PathBuf,
    /// Camera JSON supplying intrinsics; its pose is ignored.
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_INLIER_PX)]
    pub inlier_px: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Writes the registered camera JSON here.
    #[arg(long)]
    pub camera_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DepthCommand {
    /// Invalidates depth discontinuities.
    Filter(FilterArgs),
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub depth_out: PathBuf,
    /// Sobel magnitude threshold; defaults to 5% of the median valid depth.
    #[arg(long)]
    pub grad_threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Orbit around a translating textured plane.
    Orbit(OrbitArgs),
}

#[derive(Debug, Args)]
pub struct OrbitArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Base spec JSON; individual flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub angular_step_deg: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub n_frames: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Plane translation per frame `x,y,z`.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub velocity: Option<Vector3<f64>>,
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub lookat: Option<Vector3<f64>>,
    /// `WIDTHxHEIGHT`.
    #[arg(long, value_parser = parse_size)]
    pub image_size: Option<[u32; 2]>,
    #[arg(long)]
    pub focal_length: Option<f64>,
}

fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vector3::new(x, y, z)),
        _ => Err(format!("expected three finite comma-separated numbers, got {s:?}")),
    }
}

fn parse_size(s: &str) -> Result<[u32; 2], String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let p = |t: &str| t.trim().parse::<u32>().map_err(|e| format!("{t:?}: {e}"));
    Ok([p(w)?, p(h)?])
}

/// Finite numbers as JSON numbers; non-finite ones as `"inf"`, `"-inf"`, `"nan"`.
pub fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("nan")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn vec3(v: &Vector3<f64>) -> Value {
    json!([num(v.x), num(v.y), num(v.z)])
}

fn conventions() -> Value {
    json!({
        "orientation": "world_to_camera",
        "depth": "z_depth",
        "pixel_centers": "integer",
        "angles": "degrees",
        "beta": "max(beta_min, ceil(beta_frac * n_train))",
        "mpsnr": "-10*log10(MSE over co-visible pixels and channels), mean over test frames",
        "mssim": "11x11 gaussian (sigma 1.5) partial-convolution SSIM over co-visible valid windows, mean over frames",
        "pck_threshold": "alpha * max(width, height)",
    })
}

/// A report under construction.
pub struct Report {
    sequence: String,
    params: Map<String, Value>,
    metrics: Map<String, Value>,
    per_frame: Vec<Value>,
    extra: Map<String, Value>,
}

impl Report {
    fn new(sequence: &str) -> Self {
        let mut params = Map::new();
        params.insert("conventions".into(), conventions());
        Self { sequence: sequence.into(), params, metrics: Map::new(), per_frame: vec![], extra: Map::new() }
    }

    fn param(&mut self, k: &str, v: Value) -> &mut Self {
        self.params.insert(k.into(), v);
        self
    }

    fn metric(&mut self, k: &str, v: Value) -> &mut Self {
        self.metrics.insert(k.into(), v);
        self
    }

    fn to_json(&self, meta: bool) -> Value {
        let mut root = Map::new();
        root.insert("sequence".into(), json!(self.sequence));
        root.insert("params".into(), Value::Object(self.params.clone()));
        root.insert("metrics".into(), Value::Object(self.metrics.clone()));
        root.insert("per_frame".into(), Value::Array(self.per_frame.clone()));
        for (k, v) in &self.extra {
            root.insert(k.clone(), v.clone());
        }
        if meta {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            root.insert("meta".into(), json!({"tool": "monocheck", "version": env!("CARGO_PKG_VERSION"), "unix_time": ts}));
        }
        Value::Object(root)
    }

    fn to_csv(&self) -> String {
        fn cell(v: &Value) -> String {
            let s = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s
            }
        }
        let mut out = String::from("section,row,key,value\n");
        for (k, v) in &self.metrics {
            out += &format!("metrics,,{},{}\n", cell(&json!(k)), cell(v));
        }
        for (i, row) in self.per_frame.iter().enumerate() {
            if let Value::Object(m) = row {
                for (k, v) in m {
                    out += &format!("per_frame,{i},{},{}\n", cell(&json!(k)), cell(v));
                }
            }
        }
        out
    }
}

fn load(path: &Path) -> Result<SequenceManifest, Error> {
    Ok(load_manifest(path)?)
}

fn cmd_emf_angular(a: &AngularArgs) -> Result<Report, Error> {
    let m = load(&a.manifest)?;
    let res = sequence::sequence_angular_emf(&m, a.lookat)?;
    let source = if a.lookat.is_some() {
        "flag"
    } else if m.lookat.is_some() {
        "manifest"
    } else {
        "triangulated"
    };
    let mut r = Report::new(&m.name);
    r.param("manifest", json!(a.manifest))
        .param("fps", num(m.fps))
        .param("lookat", vec3(&res.lookat))
        .param("lookat_source", json!(source))
        .param("lookat_residual_rms", res.lookat_residual_rms.map_or(Value::Null, num))
        .metric("omega_deg_per_s", num(res.omega_deg_per_s));
    let frames = m.train_frames();
    r.per_frame = res
        .pair_angles_deg
        .iter()
        .enumerate()
        .map(|(k, ang)| json!({"src": frames[k], "dst": frames[k + 1], "angle_deg": num(*ang)}))
        .collect();
    Ok(r)
}

fn cmd_emf_full(a: &FullArgs) -> Result<Report, Error> {
    let m = load(&a.manifest)?;
    if m.depth_kind == io::DepthKind::Relative && a.seed.is_none() {
        return Err(Error::Input("relative depth needs --seed for disparity alignment".into()));
    }
    let opts = FullEmfOptions { eps_flow: a.eps_flow, lookat: a.lookat, interp: a.depth_interp, align_seed: a.seed.unwrap_or(0) };
    let res = sequence::sequence_full_emf(&m, &opts)?;
    let mut r = Report::new(&m.name);
    r.param("manifest", json!(a.manifest))
        .param("eps_flow", num(res.eps_flow))
        .param("eps_flow_source", json!(if a.eps_flow.is_some() { "flag" } else { "1e-6 * median camera-to-lookat distance" }))
        .param("depth_interp", json!(a.depth_interp.name()))
        .param("depth_kind", json!(m.depth_kind))
        .param("seed", a.seed.map_or(Value::Null, |s| json!(s)))
        .metric("Omega", num(res.omega));
    r.per_frame = res
        .pairs
        .iter()
        .map(|p| {
            json!({
                "t": p.t,
                "camera_motion": num(p.camera_motion),
                "mean_ratio": p.mean_ratio.map_or(Value::Null, num),
                "valid_pixels": p.valid_pixel_count,
                "excluded_small_flow": p.excluded_small_flow,
                "occluded": p.occluded,
                "off_image": p.off_image,
                "invalid_depth": p.invalid_depth,
                "background": p.background,
            })
        })
        .collect();
    Ok(r)
}

fn cmd_covis(a: &CovisArgs) -> Result<Report, Error> {
    let m = load(&a.manifest)?;
    let rule = a.beta.rule()?;
    let frames = if a.test_frames.is_empty() { sequence::test_frames(&m) } else { a.test_frames.clone() };
    if frames.is_empty() {
        return Err(Error::Input("no test frames to process".into()));
    }
    let mut r = Report::new(&m.name);
    r.param("manifest", json!(a.manifest)).param("beta_min", json!(a.beta.beta_min)).param("beta_frac", num(a.beta.beta_frac));
    let mut fractions = Vec::new();
    for &t in &frames {
        if m.frame(t).is_none() {
            return Err(Error::Input(format!("test frame {t} is not in the manifest")));
        }
        let h = sequence::sequence_covisibility(&m, t)?;
        let mask = covisibility_mask(&h, &rule);
        if let Some(dir) = &a.heatmap_dir {
            io::write_heatmap(&dir.join(format!("{t}_heatmap.dpth")), &h)?;
            let bm = monocheck::raster::BinaryMask { width: mask.width, height: mask.height, data: mask.data.clone() };
            io::write_mask(&dir.join(format!("{t}_mask.png")), &bm)?;
        }
        let total = h.width * h.height;
        let frac = mask.count() as f64 / total as f64;
        fractions.push(frac);
        let mean_count = h.counts.iter().map(|&c| c as f64).sum::<f64>() / total as f64;
        r.per_frame.push(json!({
            "frame": t,
            "n_train": h.n_train,
            "beta": mask.beta,
            "covisible_pixels": mask.count(),
            "total_pixels": total,
            "covisible_fraction": num(frac),
            "mean_count": num(mean_count),
        }));
    }
    r.metric("covisible_fraction", num(fractions.iter().sum::<f64>() / fractions.len() as f64));
    Ok(r)
}

fn cmd_eval_nvs(a: &NvsArgs) -> Result<Report, Error> {
    let m = load(&a.manifest)?;
    let registry = MetricRegistry::default();
    let names: Vec<&str> = a.metrics.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    let metrics = registry.select(&names)?;
    let opts = NvsOptions { pred_dir: &a.pred_dir, lpips_dir: a.lpips_dir.as_deref(), rule: a.beta.rule()?, metrics, no_mask: a.no_mask };
    let res = sequence::sequence_nvs(&m, &opts)?;
    let mut r = Report::new(&m.name);
    r.param("manifest", json!(a.manifest))
        .param("pred_dir", json!(a.pred_dir))
        .param("lpips_dir", json!(a.lpips_dir))
        .param("metrics", json!(names))
        .param("beta_min", json!(a.beta.beta_min))
        .param("beta_frac", num(a.beta.beta_frac))
        .param("mask", json!(if a.no_mask { "none" } else { "covisibility" }));
    for (k, v) in &res.means {
        r.metric(k, num(*v));
    }
    if let Some(v) = res.mlpips {
        r.metric("mlpips", num(v));
    }
    r.per_frame = res
        .frames
        .iter()
        .map(|f| {
            let mut o = Map::new();
            o.insert("frame".into(), json!(f.frame));
            o.insert("beta".into(), json!(f.beta));
            o.insert("covisible_pixels".into(), json!(f.covisible_pixels));
            for (k, v) in &f.scores {
                o.insert((*k).into(), num(*v));
            }
            if let Some(v) = f.mlpips {
                o.insert("mlpips".into(), num(v));
            }
            Value::Object(o)
        })
        .collect();
    Ok(r)
}

fn cmd_eval_pck(a: &PckArgs) -> Result<Report, Error> {
    let m = load(&a.manifest)?;
    let pred = io::read_keypoint_predictions(&a.pred)?;
    let res = sequence::sequence_pck(&m, &pred, a.alpha)?;
    let mut r = Report::new(&m.name);
    r.param("manifest", json!(a.manifest)).param("pred", json!(a.pred)).param("alpha", num(a.alpha)).metric("pck_t", num(res.pck_t));
    r.per_frame = res
        .frames
        .iter()
        .map(|(f, p)| json!({"frame": f, "correct": p.correct, "scored": p.scored, "threshold_px": num(p.threshold_px), "pck_t": num(p.value())}))
        .collect();
    Ok(r)
}

fn cmd_calib_pnp(a: &PnpArgs) -> Result<Report, Error> {
    let corrs = io::read_correspondences(&a.correspondences)?;
    let intr = io::read_camera(&a.intrinsics)?;
    let params = PnpParams { inlier_px: a.inlier_px, max_iters: a.max_iters, ..PnpParams::with_seed(a.seed) };
    let est = solve_pnp_ransac(&corrs, &intr, &params)?;
    let cam = est.camera(&intr);
    if let Some(p) = &a.camera_out {
        io::write_camera(p, &cam)?;
    }
    let name = a.correspondences.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = Report::new(&name);
    r.param("correspondences", json!(a.correspondences))
        .param("intrinsics", json!(a.intrinsics))
        .param("seed", json!(a.seed))
        .param("inlier_px", num(a.inlier_px))
        .param("max_iters", json!(a.max_iters))
        .param("confidence", num(params.confidence))
        .metric("inlier_count", json!(est.inliers.len()))
        .metric("inlier_ratio", num(est.inliers.len() as f64 / corrs.len() as f64))
        .metric("mean_reproj_error_px", num(est.mean_reproj_error))
        .metric("ransac_iterations", json!(est.ransac_iterations));
    let rot: Vec<Value> = (0..3).map(|i| json!([num(est.rotation[(i, 0)]), num(est.rotation[(i, 1)]), num(est.rotation[(i, 2)])])).collect();
    r.extra.insert(
        "pose".into(),
        json!({"rotation": rot, "translation": vec3(&est.translation), "position": vec3(&cam.position), "inliers": est.inliers}),
    );
    let mut frames: Vec<usize> = corrs.iter().map(|c| c.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    r.per_frame = frames
        .iter()
        .map(|&f| {
            let total = corrs.iter().filter(|c| c.frame == f).count();
            let inl = est.inliers.iter().filter(|&&i| corrs[i].frame == f).count();
            json!({"frame": f, "correspondences": total, "inliers": inl})
        })
        .collect();
    Ok(r)
}

fn cmd_depth_filter(a: &FilterArgs) -> Result<Report, Error> {
    let d = io::read_depth(&a.input)?;
    let thr = match a.grad_threshold {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return Err(Error::Input(format!("grad-threshold must be positive, got {t}"))),
        None => default_grad_threshold(&d).ok_or_else(|| Error::Input("depth map has no valid pixels".into()))?,
    };
    let f = filter_depth_edges(&d, thr);
    io::write_depth(&a.depth_out, &f)?;
    let name = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut r = Report::new(&name);
    r.param("input", json!(a.input))
        .param("depth_out", json!(a.depth_out))
        .param("grad_threshold", num(thr))
        .param("grad_threshold_source", json!(if a.grad_threshold.is_some() { "flag" } else { "0.05 * median valid depth" }))
        .metric("valid_before", json!(d.valid_count()))
        .metric("valid_after", json!(f.valid_count()))
        .metric("invalidated", json!(d.valid_count() - f.valid_count()));
    Ok(r)
}

fn cmd_synth_orbit(a: &OrbitArgs) -> Result<Report, Error> {
    let mut spec: OrbitSpec = match &a.spec {
        Some(p) => {
            let bytes = fs::read(p).map_err(|source| io::IoError::Io { path: p.clone(), source })?;
            serde_json::from_slice(&bytes).map_err(|e| io::IoError::Json { path: p.clone(), msg: e.to_string() })?
        }
        None => OrbitSpec::default(),
    };
    if let Some(v) = &a.name {
        spec.name = v.clone();
    }
    if let Some(v) = a.radius {
        spec.radius = v;
    }
    if let Some(v) = a.angular_step_deg {
        spec.angular_step_deg = v;
    }
    if let Some(v) = a.fps {
        spec.fps = v;
    }
    if let Some(v) = a.n_frames {
        spec.n_frames = v;
    }
    if let Some(v) = a.n_test {
        spec.n_test = v;
    }
    if let Some(v) = a.velocity {
        spec.plane.velocity = v.into();
    }
    if let Some(v) = a.lookat {
        spec.lookat = v.into();
    }
    if let Some(v) = a.image_size {
        spec.image_size = v;
    }
    if let Some(v) = a.focal_length {
        spec.focal_length = v;
    }
    let m = generate_orbit_capture(&spec, &a.out_dir)?;
    let an = analytic_emf(&spec);
    let mut r = Report::new(&m.name);
    r.param("out_dir", json!(a.out_dir))
        .param("spec", serde_json::to_value(&spec).expect("spec serializes"))
        .param("manifest", json!(a.out_dir.join("manifest.json")))
        .metric("omega_deg_per_s", num(an.omega_deg_per_s))
        .metric("Omega", an.omega_full.map_or(Value::Null, num))
        .metric("frames_written", json!(m.frames.len()))
        .metric("flow_pairs_written", json!(m.flow_pairs.len()));
    Ok(r)
}

fn execute(cmd: &Command) -> Result<Report, Error> {
    match cmd {
        Command::Emf(EmfCommand::Angular(a)) => cmd_emf_angular(a),
        Command::Emf(EmfCommand::Full(a)) => cmd_emf_full(a),
        Command::Covis(a) => cmd_covis(a),
        Command::Eval(EvalCommand::Nvs(a)) => cmd_eval_nvs(a),
        Command::Eval(EvalCommand::Pck(a)) => cmd_eval_pck(a),
        Command::Calib(CalibCommand::Pnp(a)) => cmd_calib_pnp(a),
        Command::Depth(DepthCommand::Filter(a)) => cmd_depth_filter(a),
        Command::Synth(SynthCommand::Orbit(a)) => cmd_synth_orbit(a),
    }
}

fn render(cli: &Cli, r: &Report) -> String {
    match cli.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&r.to_json(!cli.no_meta)).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Csv => r.to_csv(),
    }
}

fn emit(cli: &Cli, text: &str) -> Result<(), Error> {
    match &cli.output {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|source| io::IoError::Io { path: dir.to_path_buf(), source })?;
            }
            fs::write(p, text).map_err(|source| io::IoError::Io { path: p.clone(), source })?;
            log::info!("wrote report to {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Input => EXIT_INPUT,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

/// Runs the tool with `argv` (including the program name) and returns the
/// process exit code. Diagnostics go to standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match cli.threads.filter(|&n| n > 0) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(&cli.command)),
            Err(e) => Err(Error::Input(format!("cannot start {n} worker threads: {e}"))),
        },
        None => execute(&cli.command),
    };
    match result.and_then(|r| emit(&cli, &render(&cli, &r))) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsers() {
        assert_eq!(parse_vec3("1,-2.5, 3").unwrap(), Vector3::new(1.0, -2.5, 3.0));
        assert!(parse_vec3("1,2").is_err());
        assert!(parse_vec3("1,2,nan").is_err());
        assert_eq!(parse_size("64x48").unwrap(), [64, 48]);
        assert!(parse_size("64").is_err());
    }

    #[test]
    fn non_finite_numbers_become_strings() {
        assert_eq!(num(f64::INFINITY), json!("inf"));
        assert_eq!(num(f64::NEG_INFINITY), json!("-inf"));
        assert_eq!(num(f64::NAN), json!("nan"));
        assert_eq!(num(1.5), json!(1.5));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["monocheck", "emf"]), EXIT_INPUT);
        assert_eq!(run(["monocheck", "bogus"]), EXIT_INPUT);
        assert_eq!(run(["monocheck", "--help"]), EXIT_OK);
    }

    #[test]
    fn csv_quoting() {
        let mut r = Report::new("s");
        r.metric("a", json!("x,y"));
        r.per_frame.push(json!({"frame": 1}));
        let csv = r.to_csv();
        assert!(csv.contains("metrics,,a,\"x,y\""));
        assert!(csv.contains("per_frame,0,frame,1"));
    }
}
