//! Rig registration: RANSAC Perspective-n-Point from 6-point DLT hypotheses,
//! refined by Gauss–Newton on the reprojection error.
//!
//! All frames' correspondences are pooled into one solve, so every frame of
//! a sequence shares the recovered pose.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x4, Matrix4, Matrix6, Rotation3, SMatrix, Vector2, Vector3, Vector6};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Camera;
use crate::rng::stream_rng;

pub const SAMPLE_SIZE: usize = 6;
pub const DEFAULT_INLIER_PX: f64 = 3.0;
pub const DEFAULT_MAX_ITERS: usize = 1000;
pub const DEFAULT_CONFIDENCE: f64 = 0.999;
pub const MIN_INLIER_RATIO: f64 = 0.3;
/// Smallest-to-largest singular value ratio of the centred world points
/// below which the set is treated as planar.
pub const COPLANAR_RATIO: f64 = 1e-6;

const BATCH: usize = 16;
const GN_MAX_ITERS: usize = 20;
const GN_REL_TOL: f64 = 1e-10;
const GN_MAX_HALVINGS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("need at least {SAMPLE_SIZE} correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("correspondence {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("world points are coplanar (singular value ratio {ratio:e})")]
    CoplanarDegeneracy { ratio: f64 },
    #[error("no consensus: best inlier ratio {ratio:.3} is below {MIN_INLIER_RATIO}")]
    NoConsensus { ratio: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub world: [f64; 3],
    pub pixel: [f64; 2],
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    /// World to camera.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Indices into the input correspondences, ascending.
    pub inliers: Vec<usize>,
    pub mean_reproj_error: f64,
    pub ransac_iterations: usize,
}

impl PoseEstimate {
    /// Applies the pose to `intrinsics`.
    pub fn camera(&self, intrinsics: &Camera) -> Camera {
        Camera {
            orientation: self.rotation,
            position: -(self.rotation.transpose() * self.translation),
            ..intrinsics.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpParams {
    pub seed: u64,
    pub inlier_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
}

impl PnpParams {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, inlier_px: DEFAULT_INLIER_PX, max_iters: DEFAULT_MAX_ITERS, confidence: DEFAULT_CONFIDENCE }
    }
}

struct Pose {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

struct Problem<'a> {
    cam: &'a Camera,
    world: Vec<Vector3<f64>>,
    pixels: Vec<Vector2<f64>>,
    /// Undistorted normalized image coordinates; `None` if undistortion failed.
    normalized: Vec<Option<Vector2<f64>>>,
}

impl Problem<'_> {
    fn residual(&self, pose: &Pose, i: usize) -> Option<Vector2<f64>> {
        let p = pose.r * self.world[i] + pose.t;
        if p.z <= 0.0 {
            return None;
        }
        let n = Vector2::new(p.x / p.z, p.y / p.z);
        Some(self.cam.normalized_to_pixel(&self.cam.distort(&n)) - self.pixels[i])
    }

    fn inliers(&self, pose: &Pose, tol: f64) -> Vec<usize> {
        (0..self.world.len())
            .filter(|&i| self.residual(pose, i).is_some_and(|r| r.norm() <= tol))
            .collect()
    }

    fn cost(&self, pose: &Pose, idx: &[usize]) -> f64 {
        idx.iter()
            .map(|&i| self.residual(pose, i).map_or(f64::INFINITY, |r| r.norm_squared()))
            .sum()
    }

    /// Jacobian of the pixel residual w.r.t. `(δθ, δt)` under `R ← exp(δθ)R`.
    fn jacobian(&self, pose: &Pose, i: usize) -> Option<(Vector2<f64>, SMatrix<f64, 2, 6>)> {
        let rx = pose.r * self.world[i];
        let p = rx + pose.t;
        if p.z <= 0.0 {
            return None;
        }
        let iz = 1.0 / p.z;
        let n = Vector2::new(p.x * iz, p.y * iz);
        let dn_dp = Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz);
        let dd_dn = distortion_jacobian(self.cam, &n);
        let f = self.cam.focal_length;
        let du_dd = Matrix2::new(f, self.cam.skew, 0.0, f * self.cam.pixel_aspect_ratio);
        let du_dp = du_dd * dd_dn * dn_dp;
        let mut j = SMatrix::<f64, 2, 6>::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(du_dp * -rx.cross_matrix()));
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&du_dp);
        let r = self.cam.normalized_to_pixel(&self.cam.distort(&n)) - self.pixels[i];
        Some((r, j))
    }
}

fn distortion_jacobian(cam: &Camera, n: &Vector2<f64>) -> Matrix2<f64> {
    let [k1, k2, k3] = cam.radial_distortion;
    let [p1, p2] = cam.tangential_distortion;
    let (x, y) = (n.x, n.y);
    let r2 = x * x + y * y;
    let radial = 1.0 + r2 * (k1 + r2 * (k2 + k3 * r2));
    let dradial = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2);
    Matrix2::new(
        radial + 2.0 * x * x * dradial + 2.0 * p1 * y + 6.0 * p2 * x,
        2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y,
        2.0 * x * y * dradial + 2.0 * p1 * x + 2.0 * p2 * y,
        radial + 2.0 * y * y * dradial + 6.0 * p1 * y + 2.0 * p2 * x,
    )
}

fn coplanarity_ratio(pts: &[Vector3<f64>]) -> f64 {
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    let s = cov.symmetric_eigenvalues().map(|v| v.max(0.0).sqrt());
    let (lo, hi) = (s.min(), s.max());
    if hi > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

fn hartley_3d(pts: &[Vector3<f64>]) -> Matrix4<f64> {
    let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mean_d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64;
    let s = if mean_d > 0.0 { 3f64.sqrt() / mean_d } else { 1.0 };
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-c * s));
    t
}

fn hartley_2d(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let c = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let mean_d = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / pts.len() as f64;
    let s = if mean_d > 0.0 { 2f64.sqrt() / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Pose from exactly six world/normalized-image pairs via normalized DLT,
/// polar projection and cheirality sign selection.
fn dlt_pose(world: &[Vector3<f64>; SAMPLE_SIZE], img: &[Vector2<f64>; SAMPLE_SIZE]) -> Option<Pose> {
    let t3 = hartley_3d(world);
    let t2 = hartley_2d(img);
    let mut a = SMatrix::<f64, 12, 12>::zeros();
    for k in 0..SAMPLE_SIZE {
        let x = t3 * world[k].push(1.0);
        let u = t2 * img[k].push(1.0);
        let (u, v) = (u.x / u.z, u.y / u.z);
        for c in 0..4 {
            a[(2 * k, c)] = x[c];
            a[(2 * k, 8 + c)] = -u * x[c];
            a[(2 * k + 1, 4 + c)] = x[c];
            a[(2 * k + 1, 8 + c)] = -v * x[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let imin = svd.singular_values.imin();
    let h = v_t.row(imin);
    let pn = Matrix3x4::from_fn(|r, c| h[4 * r + c]);
    let p = t2.try_inverse()? * pn * t3;

    // choose the sign putting most sample points in front of the camera
    let in_front = world.iter().filter(|x| (p * x.push(1.0)).z > 0.0).count();
    let p = if 2 * in_front >= SAMPLE_SIZE { p } else { -p };
    let m = p.fixed_view::<3, 3>(0, 0).into_owned();
    if !(m.determinant() > 0.0) {
        return None;
    }
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    let scale = svd.singular_values.mean();
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let t = p.column(3) / scale;
    Some(Pose { r, t })
}

fn hypothesis(prob: &Problem<'_>, usable: &[usize], seed: u64, iter: usize) -> Option<Pose> {
    let mut rng = stream_rng(seed, iter as u64);
    let picks = index::sample(&mut rng, usable.len(), SAMPLE_SIZE);
    let mut world = [Vector3::zeros(); SAMPLE_SIZE];
    let mut img = [Vector2::zeros(); SAMPLE_SIZE];
    for (k, j) in picks.iter().enumerate() {
        let i = usable[j];
        world[k] = prob.world[i];
        img[k] = prob.normalized[i]?;
    }
    if coplanarity_ratio(&world) < COPLANAR_RATIO {
        return None;
    }
    dlt_pose(&world, &img)
}

fn required_iterations(inlier_ratio: f64, confidence: f64) -> f64 {
    let good = inlier_ratio.powi(SAMPLE_SIZE as i32);
    if good >= 1.0 {
        return 1.0;
    }
    if good <= 0.0 {
        return f64::INFINITY;
    }
    ((1.0 - confidence).ln() / (1.0 - good).ln()).ceil()
}

fn refine(prob: &Problem<'_>, mut pose: Pose, idx: &[usize]) -> Pose {
    let mut cost = prob.cost(&pose, idx);
    for _ in 0..GN_MAX_ITERS {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in idx {
            let Some((r, j)) = prob.jacobian(&pose, i) else { return pose };
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(delta) = jtj.cholesky().map(|c| c.solve(&-jtr)).or_else(|| jtj.lu().solve(&-jtr)) else {
            break;
        };
        let mut step = delta;
        let mut accepted = None;
        for _ in 0..=GN_MAX_HALVINGS {
            let cand = Pose {
                r: Rotation3::new(step.fixed_rows::<3>(0).into_owned()).into_inner() * pose.r,
                t: pose.t + step.fixed_rows::<3>(3),
            };
            let c = prob.cost(&cand, idx);
            if c <= cost {
                accepted = Some((cand, c));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c)) = accepted else { break };
        let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
        pose = cand;
        cost = c;
        if rel < GN_REL_TOL {
            break;
        }
    }
    pose
}

/// Estimates the world-to-camera pose of `intrinsics` (its own pose is
/// ignored) from 2D–3D correspondences.
pub fn solve_pnp_ransac(corrs: &[Correspondence2D3D], intrinsics: &Camera, params: &PnpParams) -> Result<PoseEstimate, CalibError> {
    if !(params.inlier_px > 0.0) {
        return Err(CalibError::InvalidParameter(format!("inlier_px must be positive, got {}", params.inlier_px)));
    }
    if params.max_iters == 0 {
        return Err(CalibError::InvalidParameter("max_iters must be positive".into()));
    }
    if !(params.confidence > 0.0 && params.confidence < 1.0) {
        return Err(CalibError::InvalidParameter(format!("confidence must lie in (0, 1), got {}", params.confidence)));
    }
    let n = corrs.len();
    if n < SAMPLE_SIZE {
        return Err(CalibError::TooFewCorrespondences(n));
    }
    for (i, c) in corrs.iter().enumerate() {
        if c.world.iter().chain(&c.pixel).any(|v| !v.is_finite()) {
            return Err(CalibError::NonFinite(i));
        }
    }
    let world: Vec<Vector3<f64>> = corrs.iter().map(|c| Vector3::from(c.world)).collect();
    let ratio = coplanarity_ratio(&world);
    if ratio < COPLANAR_RATIO {
        return Err(CalibError::CoplanarDegeneracy { ratio });
    }
    let pixels: Vec<Vector2<f64>> = corrs.iter().map(|c| Vector2::from(c.pixel)).collect();
    let normalized = pixels.iter().map(|p| intrinsics.pixel_to_undistorted(p).ok()).collect();
    let prob = Problem { cam: intrinsics, world, pixels, normalized };
    let usable: Vec<usize> = (0..n).filter(|&i| prob.normalized[i].is_some()).collect();
    if usable.len() < SAMPLE_SIZE {
        return Err(CalibError::TooFewCorrespondences(usable.len()));
    }

    let mut best: Option<(usize, usize)> = None;
    let mut done = 0;
    let mut budget = params.max_iters;
    while done < budget {
        let end = (done + BATCH).min(params.max_iters);
        let scores: Vec<Option<usize>> = (done..end)
            .into_par_iter()
            .map(|it| hypothesis(&prob, &usable, params.seed, it).map(|p| prob.inliers(&p, params.inlier_px).len()))
            .collect();
        for (k, s) in scores.into_iter().enumerate() {
            if let Some(c) = s {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((done + k, c));
                }
            }
        }
        done = end;
        if let Some((_, c)) = best {
            let need = required_iterations(c as f64 / n as f64, params.confidence);
            budget = if need.is_finite() { (need as usize).clamp(1, params.max_iters) } else { params.max_iters };
        }
    }

    let Some((best_iter, count)) = best else {
        return Err(CalibError::NoConsensus { ratio: 0.0 });
    };
    let ratio = count as f64 / n as f64;
    if ratio < MIN_INLIER_RATIO {
        return Err(CalibError::NoConsensus { ratio });
    }
    let mut pose = hypothesis(&prob, &usable, params.seed, best_iter).ok_or(CalibError::NoConsensus { ratio })?;
    let mut inliers = prob.inliers(&pose, params.inlier_px);
    for _ in 0..3 {
        pose = refine(&prob, pose, &inliers);
        let next = prob.inliers(&pose, params.inlier_px);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    if inliers.is_empty() {
        return Err(CalibError::NoConsensus { ratio: 0.0 });
    }
    let mean_reproj_error = inliers
        .iter()
        .filter_map(|&i| prob.residual(&pose, i).map(|r| r.norm()))
        .sum::<f64>()
        / inliers.len() as f64;
    Ok(PoseEstimate { rotation: pose.r, translation: pose.t, inliers, mean_reproj_error, ransac_iterations: done })
}

/// Angle in radians of `a·bᵀ`.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    // chord form stays accurate for tiny angles, unlike acos of the trace
    2.0 * ((a - b).norm() / (2.0 * std::f64::consts::SQRT_2)).min(1.0).asin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> Camera {
        Camera::pinhole(500.0, Vector2::new(320.0, 240.0), (640, 480))
    }

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation3::new(axis * rng.random_range(0.0..1.0)).into_inner()
    }

    /// Points in front of the camera given by `(r, t)`.
    fn scene(rng: &mut impl Rng, cam: &Camera, r: &Matrix3<f64>, t: &Vector3<f64>, n: usize) -> Vec<Correspondence2D3D> {
        (0..n)
            .map(|_| {
                let pc = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(3.0..6.0));
                let w = r.transpose() * (pc - t);
                let n = Vector2::new(pc.x / pc.z, pc.y / pc.z);
                let px = cam.normalized_to_pixel(&cam.distort(&n));
                Correspondence2D3D { world: w.into(), pixel: px.into(), frame: 0 }
            })
            .collect()
    }

    #[test]
    fn identity_pose_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = intrinsics();
        let corrs = scene(&mut rng, &cam, &Matrix3::identity(), &Vector3::zeros(), 20);
        let est = solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(0)).unwrap();
        assert!(rotation_angle_between(&est.rotation, &Matrix3::identity()) < 1e-6);
        assert!(est.translation.norm() < 1e-6);
        assert_eq!(est.inliers.len(), 20);
        assert!((est.rotation.determinant() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = intrinsics();
        let r = random_rotation(&mut rng);
        let t = Vector3::new(0.2, -0.1, 0.5);
        let mut corrs = scene(&mut rng, &cam, &r, &t, 100);
        for c in corrs.iter_mut().take(30) {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            c.pixel[0] += 50.0 * a.cos();
            c.pixel[1] += 50.0 * a.sin();
        }
        let est = solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(3)).unwrap();
        assert_eq!(est.inliers, (30..100).collect::<Vec<_>>());
        assert!(rotation_angle_between(&est.rotation, &r) < 1e-6);
        assert!((est.translation - t).norm() < 1e-6);
    }

    #[test]
    fn distorted_intrinsics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cam = intrinsics();
        cam.radial_distortion = [-0.1, 0.02, 0.0];
        cam.tangential_distortion = [0.001, -0.0005];
        let r = random_rotation(&mut rng);
        let t = Vector3::new(-0.3, 0.1, 0.2);
        let corrs = scene(&mut rng, &cam, &r, &t, 40);
        let est = solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(5)).unwrap();
        assert!(rotation_angle_between(&est.rotation, &r) < 1e-6);
        assert!((est.translation - t).norm() < 1e-6);
    }

    #[test]
    fn distortion_jacobian_matches_finite_differences() {
        let mut cam = intrinsics();
        cam.radial_distortion = [-0.2, 0.05, 0.01];
        cam.tangential_distortion = [0.002, -0.001];
        let n = Vector2::new(0.3, -0.2);
        let j = distortion_jacobian(&cam, &n);
        let h = 1e-6;
        for c in 0..2 {
            let mut e = Vector2::zeros();
            e[c] = h;
            let fd = (cam.distort(&(n + e)) - cam.distort(&(n - e))) / (2.0 * h);
            assert!((j.column(c) - fd).norm() < 1e-8);
        }
    }

    #[test]
    fn coplanar_points_rejected() {
        let cam = intrinsics();
        let corrs: Vec<_> = (0..6)
            .map(|i| {
                let w = [i as f64 * 0.1, (i * i) as f64 * 0.05, 4.0];
                let px = cam.project(&Vector3::from(w)).unwrap();
                Correspondence2D3D { world: w, pixel: px.into(), frame: 0 }
            })
            .collect();
        assert!(matches!(solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(0)), Err(CalibError::CoplanarDegeneracy { .. })));
    }

    #[test]
    fn too_few_and_no_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cam = intrinsics();
        let corrs = scene(&mut rng, &cam, &Matrix3::identity(), &Vector3::zeros(), 5);
        assert_eq!(solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(0)), Err(CalibError::TooFewCorrespondences(5)));
        let mut corrs = scene(&mut rng, &cam, &Matrix3::identity(), &Vector3::zeros(), 40);
        for c in &mut corrs {
            c.pixel = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        }
        assert!(matches!(solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(0)), Err(CalibError::NoConsensus { .. })));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = intrinsics();
        let r = random_rotation(&mut rng);
        let mut corrs = scene(&mut rng, &cam, &r, &Vector3::new(0.1, 0.2, 0.3), 60);
        for c in corrs.iter_mut().step_by(3) {
            c.pixel[0] += 40.0;
        }
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| solve_pnp_ransac(&corrs, &cam, &PnpParams::with_seed(11)).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a, b);
    }
}
