//! Correspondence readout through 3D warps: volume-rendering weights,
//! warp-integrate-project, Broyden inversion of backward warps, and chaining
//! of per-step scene flow.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::geom::{Camera, GeomError};

pub const DEFAULT_BROYDEN_TOL: f64 = 1e-6;
pub const DEFAULT_BROYDEN_MAX_ITER: usize = 50;
const MAX_STEP_HALVINGS: usize = 10;
const MIN_WEIGHT_SUM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("ray carries no surface (weight sum {0:e} <= 1e-6)")]
    VacuumRay(f64),
    #[error("ray samples are inconsistent: {0}")]
    BadSamples(String),
    #[error("Broyden solver did not converge in {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("point {point:?} left the warp domain at step {step}")]
    OutOfDomain { step: usize, point: [f64; 3] },
    #[error("chain needs steps {t1}..{t2} but only {available} step evaluators exist")]
    MissingStep { t1: usize, t2: usize, available: usize },
    #[error("invalid time range: t1 = {t1} > t2 = {t2}")]
    TimeOrder { t1: usize, t2: usize },
    #[error("grid warp: {0}")]
    Grid(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    Analytic,
    Grid,
    Chained,
}

/// Maps a 3D point from one time to another.
pub trait WarpField: Send + Sync {
    fn kind(&self) -> WarpKind;

    fn warp(&self, x: &Vector3<f64>, src_t: f64, dst_t: f64) -> Result<Vector3<f64>, WarpError>;
}

/// Warp given by a closure, used for closed-form test deformations.
pub struct AnalyticWarp<F> {
    f: F,
}

impl<F> AnalyticWarp<F>
where
    F: Fn(&Vector3<f64>, f64, f64) -> Vector3<f64> + Send + Sync,
{
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F> WarpField for AnalyticWarp<F>
where
    F: Fn(&Vector3<f64>, f64, f64) -> Vector3<f64> + Send + Sync,
{
    fn kind(&self) -> WarpKind {
        WarpKind::Analytic
    }

    fn warp(&self, x: &Vector3<f64>, src_t: f64, dst_t: f64) -> Result<Vector3<f64>, WarpError> {
        Ok((self.f)(x, src_t, dst_t))
    }
}

pub struct IdentityWarp;

impl WarpField for IdentityWarp {
    fn kind(&self) -> WarpKind {
        WarpKind::Analytic
    }

    fn warp(&self, x: &Vector3<f64>, _: f64, _: f64) -> Result<Vector3<f64>, WarpError> {
        Ok(*x)
    }
}

/// `x ↦ A·x + b`, independent of time.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineWarp {
    pub matrix: Matrix3<f64>,
    pub offset: Vector3<f64>,
}

impl WarpField for AffineWarp {
    fn kind(&self) -> WarpKind {
        WarpKind::Analytic
    }

    fn warp(&self, x: &Vector3<f64>, _: f64, _: f64) -> Result<Vector3<f64>, WarpError> {
        Ok(self.matrix * x + self.offset)
    }
}

/// Displaced positions stored on a regular lattice over an axis-aligned box,
/// read back by trilinear interpolation. The map is fixed: the evaluation
/// times are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWarp {
    /// Lattice resolution `[nx, ny, nz]`, each at least 2.
    pub dims: [usize; 3],
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// `x`-fastest, then `y`, then `z`.
    pub values: Vec<Vector3<f64>>,
}

impl GridWarp {
    pub fn new(dims: [usize; 3], min: Vector3<f64>, max: Vector3<f64>, values: Vec<Vector3<f64>>) -> Result<Self, WarpError> {
        if dims.iter().any(|&n| n < 2) {
            return Err(WarpError::Grid(format!("every lattice dimension must be >= 2, got {dims:?}")));
        }
        if (0..3).any(|i| !(max[i] > min[i])) {
            return Err(WarpError::Grid("box max must exceed min on every axis".into()));
        }
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(WarpError::Grid(format!("expected {} lattice values, got {}", dims[0] * dims[1] * dims[2], values.len())));
        }
        Ok(Self { dims, min, max, values })
    }

    /// Samples `f` on the lattice.
    pub fn from_fn(dims: [usize; 3], min: Vector3<f64>, max: Vector3<f64>, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Result<Self, WarpError> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(&Self::node(dims, &min, &max, [i, j, k])));
                }
            }
        }
        Self::new(dims, min, max, values)
    }

    fn node(dims: [usize; 3], min: &Vector3<f64>, max: &Vector3<f64>, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::from_fn(|a, _| min[a] + (max[a] - min[a]) * idx[a] as f64 / (dims[a] - 1) as f64)
    }

    fn value(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.values[(k * self.dims[1] + j) * self.dims[0] + i]
    }

    /// Trilinear interpolation; `None` outside the box.
    pub fn sample(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let s = (x[a] - self.min[a]) / (self.max[a] - self.min[a]) * (self.dims[a] - 1) as f64;
            if !(0.0..=(self.dims[a] - 1) as f64).contains(&s) {
                return None;
            }
            let b = (s.floor() as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = s - b as f64;
        }
        let mut out = Vector3::zeros();
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
                    if w != 0.0 {
                        out += self.value(base[0] + di, base[1] + dj, base[2] + dk) * w;
                    }
                }
            }
        }
        Some(out)
    }
}

impl WarpField for GridWarp {
    fn kind(&self) -> WarpKind {
        WarpKind::Grid
    }

    fn warp(&self, x: &Vector3<f64>, _: f64, _: f64) -> Result<Vector3<f64>, WarpError> {
        self.sample(x).ok_or(WarpError::OutOfDomain { step: 0, point: [x.x, x.y, x.z] })
    }
}

/// Composition of per-step flows; step `t` maps time `t` to `t + 1`.
pub struct ChainedWarp {
    pub steps: Vec<Box<dyn WarpField>>,
}

impl WarpField for ChainedWarp {
    fn kind(&self) -> WarpKind {
        WarpKind::Chained
    }

    /// Times must be non-negative integers with `src_t <= dst_t`.
    fn warp(&self, x: &Vector3<f64>, src_t: f64, dst_t: f64) -> Result<Vector3<f64>, WarpError> {
        let t1 = src_t.max(0.0).round() as usize;
        let t2 = dst_t.max(0.0).round() as usize;
        let refs: Vec<&dyn WarpField> = self.steps.iter().map(|s| s.as_ref()).collect();
        chain_scene_flow(&refs, x, t1, t2)
    }
}

/// Applies steps `t1, t1+1, …, t2−1` in order.
pub fn chain_scene_flow(flows: &[&dyn WarpField], x: &Vector3<f64>, t1: usize, t2: usize) -> Result<Vector3<f64>, WarpError> {
    if t1 > t2 {
        return Err(WarpError::TimeOrder { t1, t2 });
    }
    if t2 > flows.len() {
        return Err(WarpError::MissingStep { t1, t2, available: flows.len() });
    }
    let mut p = *x;
    for (t, step) in flows.iter().enumerate().take(t2).skip(t1) {
        p = step.warp(&p, t as f64, (t + 1) as f64).map_err(|e| match e {
            WarpError::OutOfDomain { point, .. } => WarpError::OutOfDomain { step: t, point },
            other => other,
        })?;
    }
    Ok(p)
}

/// Samples along one camera ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vector3<f64>>,
    /// Source-frame densities, per world unit.
    pub sigmas: Vec<f64>,
    /// Spacing after each sample, world units.
    pub deltas: Vec<f64>,
    /// Densities of the same samples evaluated at the target time.
    pub target_sigmas: Option<Vec<f64>>,
}

impl RaySamples {
    pub fn new(positions: Vec<Vector3<f64>>, sigmas: Vec<f64>, deltas: Vec<f64>) -> Result<Self, WarpError> {
        let s = Self { positions, sigmas, deltas, target_sigmas: None };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), WarpError> {
        let n = self.positions.len();
        if self.sigmas.len() != n || self.deltas.len() != n {
            return Err(WarpError::BadSamples(format!(
                "{} positions, {} densities, {} spacings",
                n,
                self.sigmas.len(),
                self.deltas.len()
            )));
        }
        if let Some(t) = &self.target_sigmas {
            if t.len() != n {
                return Err(WarpError::BadSamples("target densities length differs".into()));
            }
        }
        if self.sigmas.iter().chain(self.target_sigmas.iter().flatten()).any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(WarpError::BadSamples("densities must be finite and non-negative".into()));
        }
        if self.deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(WarpError::BadSamples("spacings must be positive".into()));
        }
        if n >= 2 {
            let dir = self.positions[n - 1] - self.positions[0];
            if self.positions.windows(2).any(|w| (w[1] - w[0]).dot(&dir) <= 0.0) {
                return Err(WarpError::BadSamples("positions are not strictly ordered along the ray".into()));
            }
        }
        Ok(())
    }
}

/// `wᵢ = Tᵢ·(1 − exp(−σᵢδᵢ))` with `Tᵢ = exp(−Σ_{j<i} σⱼδⱼ)`.
pub fn volume_weights(sigmas: &[f64], deltas: &[f64]) -> Vec<f64> {
    let mut acc = 0.0f64;
    sigmas
        .iter()
        .zip(deltas)
        .map(|(s, d)| {
            let tau = s * d;
            let w = (-acc).exp() * -(-tau).exp_m1();
            acc += tau;
            w
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensitySource {
    #[default]
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegrateOptions {
    /// Divide the weights by their sum before taking the expectation.
    pub normalize_weights: bool,
    pub density_source: DensitySource,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { normalize_weights: true, density_source: DensitySource::Source }
    }
}

/// Warps the ray samples to `t2`, takes their weighted expectation and
/// projects it into `cam2`.
pub fn warp_integrate_project(
    samples: &RaySamples,
    warp: &dyn WarpField,
    t1: f64,
    t2: f64,
    cam2: &Camera,
    opts: IntegrateOptions,
) -> Result<Vector2<f64>, WarpError> {
    samples.validate()?;
    let sigmas = match opts.density_source {
        DensitySource::Source => &samples.sigmas,
        DensitySource::Target => samples
            .target_sigmas
            .as_ref()
            .ok_or_else(|| WarpError::BadSamples("target densities requested but not supplied".into()))?,
    };
    let weights = volume_weights(sigmas, &samples.deltas);
    let total: f64 = weights.iter().sum();
    if !(total > MIN_WEIGHT_SUM) {
        return Err(WarpError::VacuumRay(total));
    }
    let norm = if opts.normalize_weights { total } else { 1.0 };
    let mut expect = Vector3::zeros();
    for (x, w) in samples.positions.iter().zip(&weights) {
        if *w != 0.0 {
            expect += warp.warp(x, t1, t2)? * (w / norm);
        }
    }
    Ok(cam2.project(&expect)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BroydenOptions {
    /// Starting point; defaults to the target.
    pub init: Option<Vector3<f64>>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BroydenOptions {
    fn default() -> Self {
        Self { init: None, tol: DEFAULT_BROYDEN_TOL, max_iter: DEFAULT_BROYDEN_MAX_ITER }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BroydenSolution {
    pub x: Vector3<f64>,
    /// Jacobian updates taken; 0 when the start point already solves the system.
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `f(x) = target` with Broyden's good method, starting from the
/// identity Jacobian. Steps that increase the residual are halved, at most
/// ten times per iteration.
pub fn broyden_solve<F>(f: F, target: &Vector3<f64>, opts: &BroydenOptions) -> Result<BroydenSolution, WarpError>
where
    F: Fn(&Vector3<f64>) -> Result<Vector3<f64>, WarpError>,
{
    let mut x = opts.init.unwrap_or(*target);
    let mut g = f(&x)? - target;
    let mut gn = g.norm();
    // inverse Jacobian estimate
    let mut h = Matrix3::<f64>::identity();
    for it in 0..opts.max_iter {
        if gn <= opts.tol {
            return Ok(BroydenSolution { x, iterations: it, residual: gn });
        }
        let mut dx = -(h * g);
        let mut x_new = x + dx;
        let mut g_new = f(&x_new)? - target;
        let mut halvings = 0;
        while g_new.norm() > gn && halvings < MAX_STEP_HALVINGS {
            dx *= 0.5;
            x_new = x + dx;
            g_new = f(&x_new)? - target;
            halvings += 1;
        }
        let dg = g_new - g;
        let hdg = h * dg;
        let denom = dx.dot(&hdg);
        if denom.abs() > f64::EPSILON * dx.norm() * hdg.norm() {
            h += (dx - hdg) * (dx.transpose() * h) / denom;
        }
        x = x_new;
        g = g_new;
        gn = g.norm();
    }
    if gn <= opts.tol {
        return Ok(BroydenSolution { x, iterations: opts.max_iter, residual: gn });
    }
    Err(WarpError::NonConvergence { iterations: opts.max_iter, residual: gn })
}

/// Finds `x_t` with `W_{t→c}(x_t) = target_canonical` for a backward
/// (observation-to-canonical) warp, i.e. evaluates the forward warp.
pub fn broyden_invert_warp(
    inverse_warp: &dyn WarpField,
    t: f64,
    canonical_t: f64,
    target_canonical: &Vector3<f64>,
    opts: &BroydenOptions,
) -> Result<BroydenSolution, WarpError> {
    broyden_solve(|x| inverse_warp.warp(x, t, canonical_t), target_canonical, opts)
}
