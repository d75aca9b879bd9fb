//! Pinhole camera with Brown–Conrady distortion, pixel rays, and look-at
//! triangulation from optical axes.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// Maximum `|RᵀR − I|` entry accepted for a camera orientation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

const BEHIND_CAMERA_Z: f64 = 1e-12;
const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_TOL: f64 = 1e-10;
const LOOKAT_MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point is behind the camera (camera-space z = {z:e})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("distortion inversion did not converge in {iterations} iterations (last step {step:e})")]
    UndistortDiverged { iterations: usize, step: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

/// Pinhole camera in the Nerfies parameterization.
///
/// `orientation` maps world to camera coordinates (rows are the camera axes
/// expressed in world space); `position` is the camera centre in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub orientation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub focal_length: f64,
    pub principal_point: Vector2<f64>,
    pub skew: f64,
    pub pixel_aspect_ratio: f64,
    pub radial_distortion: [f64; 3],
    pub tangential_distortion: [f64; 2],
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
}

/// Largest absolute entry of `RᵀR − I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest rotation in Frobenius norm (polar decomposition via SVD).
/// Returns `None` if the matrix has a non-positive determinant.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    if m.determinant() <= 0.0 {
        return None;
    }
    let svd = m.svd(true, true);
    let r = svd.u? * svd.v_t?;
    (r.determinant() > 0.0).then_some(r)
}

impl Camera {
    /// Undistorted camera at the world origin looking down +z.
    pub fn pinhole(focal_length: f64, principal_point: Vector2<f64>, image_size: (u32, u32)) -> Self {
        Self {
            orientation: Matrix3::identity(),
            position: Vector3::zeros(),
            focal_length,
            principal_point,
            skew: 0.0,
            pixel_aspect_ratio: 1.0,
            radial_distortion: [0.0; 3],
            tangential_distortion: [0.0; 2],
            image_size,
        }
    }

    /// Re-poses the camera at `position`, aimed at `target`, with image rows
    /// running opposite to `up`.
    pub fn looking_at(mut self, position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeomError> {
        let forward = target - position;
        let norm = forward.norm();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(GeomError::Degenerate("camera coincides with its target".into()));
        }
        let z = forward / norm;
        let x = z.cross(&up);
        let xn = x.norm();
        if xn < 1e-12 {
            return Err(GeomError::Degenerate("up vector parallel to viewing direction".into()));
        }
        let x = x / xn;
        let y = z.cross(&x);
        self.orientation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        self.position = position;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let err = orthonormality_error(&self.orientation);
        if !(err < ORTHONORMAL_TOL) {
            return Err(GeomError::InvalidCamera(format!("orientation is not orthonormal (|RᵀR−I| = {err:e})")));
        }
        if self.orientation.determinant() <= 0.0 {
            return Err(GeomError::InvalidCamera("orientation has negative determinant".into()));
        }
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return Err(GeomError::InvalidCamera(format!("focal length must be positive, got {}", self.focal_length)));
        }
        if !(self.pixel_aspect_ratio > 0.0 && self.pixel_aspect_ratio.is_finite()) {
            return Err(GeomError::InvalidCamera("pixel aspect ratio must be positive".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(GeomError::InvalidCamera("image size must be positive".into()));
        }
        if !self.position.iter().all(|v| v.is_finite()) || !self.principal_point.iter().all(|v| v.is_finite()) {
            return Err(GeomError::InvalidCamera("non-finite position or principal point".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.image_size.0 as usize
    }

    pub fn height(&self) -> usize {
        self.image_size.1 as usize
    }

    /// World-space unit vector of the optical axis.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.orientation.row(2).transpose()
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * (x - self.position)
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.transpose() * p + self.position
    }

    fn has_distortion(&self) -> bool {
        self.radial_distortion.iter().chain(&self.tangential_distortion).any(|&k| k != 0.0)
    }

    /// Applies radial and tangential distortion to normalized coordinates.
    pub fn distort(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, k3] = self.radial_distortion;
        let [p1, p2] = self.tangential_distortion;
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + k3 * r2));
        let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        Vector2::new(x * radial + dx, y * radial + dy)
    }

    /// Inverts [`Camera::distort`] by fixed-point iteration.
    pub fn undistort(&self, d: &Vector2<f64>) -> Result<Vector2<f64>, GeomError> {
        if !self.has_distortion() {
            return Ok(*d);
        }
        let [k1, k2, k3] = self.radial_distortion;
        let [p1, p2] = self.tangential_distortion;
        let mut p = *d;
        let mut step = f64::INFINITY;
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (x, y) = (p.x, p.y);
            let r2 = x * x + y * y;
            let radial = 1.0 + r2 * (k1 + r2 * (k2 + k3 * r2));
            let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
            let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
            let next = Vector2::new((d.x - dx) / radial, (d.y - dy) / radial);
            step = (next - p).norm();
            p = next;
            if step < UNDISTORT_TOL {
                return Ok(p);
            }
        }
        Err(GeomError::UndistortDiverged { iterations: UNDISTORT_MAX_ITERS, step })
    }

    /// Distorted normalized coordinates to pixels.
    pub fn normalized_to_pixel(&self, d: &Vector2<f64>) -> Vector2<f64> {
        let f = self.focal_length;
        Vector2::new(
            f * d.x + self.skew * d.y + self.principal_point.x,
            f * self.pixel_aspect_ratio * d.y + self.principal_point.y,
        )
    }

    /// Pixels to distorted normalized coordinates.
    pub fn pixel_to_normalized(&self, u: &Vector2<f64>) -> Vector2<f64> {
        let f = self.focal_length;
        let y = (u.y - self.principal_point.y) / (f * self.pixel_aspect_ratio);
        let x = (u.x - self.principal_point.x - self.skew * y) / f;
        Vector2::new(x, y)
    }

    /// Undistorted normalized image coordinates of a pixel.
    pub fn pixel_to_undistorted(&self, u: &Vector2<f64>) -> Result<Vector2<f64>, GeomError> {
        self.undistort(&self.pixel_to_normalized(u))
    }

    /// Projects a world point to pixel coordinates. The result may fall
    /// outside the image.
    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, GeomError> {
        let p = self.world_to_camera(x);
        if p.z <= BEHIND_CAMERA_Z {
            return Err(GeomError::BehindCamera { z: p.z });
        }
        let n = Vector2::new(p.x / p.z, p.y / p.z);
        Ok(self.normalized_to_pixel(&self.distort(&n)))
    }

    /// World point seen at `pixel` with z-depth `z_depth`.
    pub fn backproject(&self, pixel: &Vector2<f64>, z_depth: f64) -> Result<Vector3<f64>, GeomError> {
        if !(z_depth > 0.0) {
            return Err(GeomError::NonPositiveDepth(z_depth));
        }
        let n = self.pixel_to_undistorted(pixel)?;
        Ok(self.camera_to_world(&Vector3::new(n.x * z_depth, n.y * z_depth, z_depth)))
    }

    /// Ray from the camera centre through `pixel`.
    pub fn pixel_ray(&self, pixel: &Vector2<f64>) -> Result<Ray, GeomError> {
        let n = self.pixel_to_undistorted(pixel)?;
        let dir = self.orientation.transpose() * Vector3::new(n.x, n.y, 1.0);
        Ok(Ray { origin: self.position, direction: dir.normalize() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.origin + self.direction * s
    }

    /// Perpendicular distance from `x` to the (infinite) line of the ray.
    pub fn distance_to(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.origin;
        (d - self.direction * d.dot(&self.direction)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookAtPoint {
    pub point: Vector3<f64>,
    /// RMS distance from the point to the optical axes, world units.
    pub residual_rms: f64,
}

/// Least-squares point closest to all camera optical axes.
pub fn triangulate_lookat(cams: &[Camera]) -> Result<LookAtPoint, GeomError> {
    if cams.len() < 2 {
        return Err(GeomError::Degenerate(format!("look-at triangulation needs at least 2 cameras, got {}", cams.len())));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for cam in cams {
        let d = cam.optical_axis();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * cam.position;
    }
    let eig = a.symmetric_eigen();
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > 0.0) || hi / lo > LOOKAT_MAX_CONDITION {
        return Err(GeomError::Degenerate("optical axes are (nearly) parallel".into()));
    }
    let point = a
        .lu()
        .solve(&b)
        .ok_or_else(|| GeomError::Degenerate("singular look-at system".into()))?;
    let sq: f64 = cams
        .iter()
        .map(|cam| {
            let d = cam.optical_axis();
            let v = point - cam.position;
            (v - d * d.dot(&v)).norm_squared()
        })
        .sum();
    Ok(LookAtPoint { point, residual_rms: (sq / cams.len() as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_cam() -> Camera {
        Camera::pinhole(100.0, Vector2::new(50.0, 50.0), (100, 100))
    }

    fn distorted_cam() -> Camera {
        let mut cam = Camera::pinhole(400.0, Vector2::new(320.0, 240.0), (640, 480))
            .looking_at(Vector3::new(1.0, -0.5, -3.0), Vector3::zeros(), Vector3::y())
            .unwrap();
        cam.radial_distortion = [-0.08, 0.02, -0.004];
        cam.tangential_distortion = [0.001, -0.0015];
        cam.skew = 0.3;
        cam.pixel_aspect_ratio = 1.02;
        cam
    }

    #[test]
    fn project_principal_axis() {
        let u = identity_cam().project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(u, Vector2::new(50.0, 50.0));
    }

    #[test]
    fn project_similar_triangles() {
        let u = identity_cam().project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((u - Vector2::new(60.0, 50.0)).norm() < 1e-12);
    }

    #[test]
    fn project_with_radial_distortion() {
        let mut cam = identity_cam();
        cam.radial_distortion[0] = 0.1;
        let u = cam.project(&Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((u.x - 60.01).abs() < 1e-12, "{u}");
        assert!((u.y - 50.0).abs() < 1e-12);
    }

    #[test]
    fn project_behind_camera_fails() {
        let err = identity_cam().project(&Vector3::new(0.0, 0.0, -1.0)).unwrap_err();
        assert!(matches!(err, GeomError::BehindCamera { .. }));
        assert!(identity_cam().project(&Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn backproject_examples() {
        let cam = identity_cam();
        let x = cam.backproject(&Vector2::new(50.0, 50.0), 2.0).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 2.0));
        let x = cam.backproject(&Vector2::new(60.0, 50.0), 1.0).unwrap();
        assert!((x - Vector3::new(0.1, 0.0, 1.0)).norm() < 1e-15);
        assert_eq!(cam.backproject(&Vector2::new(1.0, 1.0), 0.0), Err(GeomError::NonPositiveDepth(0.0)));
    }

    #[test]
    fn distorted_round_trip_oracle() {
        let cam = distorted_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            // random point inside the frustum at depth 1..6
            let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let z = rng.random_range(1.0..6.0);
            let x = cam.backproject(&px, z).unwrap();
            let zc = cam.world_to_camera(&x).z;
            let u = cam.project(&x).unwrap();
            assert!((u - px).norm() < 1e-6);
            let x2 = cam.backproject(&u, zc).unwrap();
            assert!((x2 - x).norm() < 1e-6);
        }
    }

    #[test]
    fn undistort_reports_divergence() {
        let mut cam = identity_cam();
        cam.radial_distortion = [5.0, 0.0, 0.0];
        let err = cam.undistort(&Vector2::new(0.8, 0.8)).unwrap_err();
        assert!(matches!(err, GeomError::UndistortDiverged { .. }));
    }

    #[test]
    fn pixel_ray_examples() {
        let cam = identity_cam();
        let r = cam.pixel_ray(&Vector2::new(50.0, 50.0)).unwrap();
        assert_eq!(r.direction, Vector3::new(0.0, 0.0, 1.0));
        let r = cam.pixel_ray(&Vector2::new(60.0, 50.0)).unwrap();
        let expect = Vector3::new(0.1, 0.0, 1.0).normalize();
        assert!((r.direction - expect).norm() < 1e-15);
    }

    #[test]
    fn backprojected_points_lie_on_pixel_ray() {
        let cam = distorted_cam();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let z = rng.random_range(0.2..20.0);
            let x = cam.backproject(&px, z).unwrap();
            let ray = cam.pixel_ray(&px).unwrap();
            assert!(ray.distance_to(&x) < 1e-9);
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn looking_at_aims_the_optical_axis() {
        let cam = identity_cam()
            .looking_at(Vector3::new(3.0, 1.0, 2.0), Vector3::new(1.0, 2.0, 3.0), Vector3::y())
            .unwrap();
        cam.validate().unwrap();
        let c = cam.world_to_camera(&Vector3::new(1.0, 2.0, 3.0));
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        // world up appears towards smaller image rows
        let above = cam.project(&Vector3::new(1.0, 2.5, 3.0)).unwrap();
        assert!(above.y < 50.0);
    }

    #[test]
    fn validate_rejects_reflection() {
        let mut cam = identity_cam();
        cam.orientation[(0, 0)] = -1.0;
        assert!(cam.validate().is_err());
        let mut cam = identity_cam();
        cam.focal_length = 0.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn nearest_rotation_projects_perturbed_matrix() {
        let r = Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner();
        let noisy = r + Matrix3::repeat(1e-5);
        let fixed = nearest_rotation(&noisy).unwrap();
        assert!(orthonormality_error(&fixed) < 1e-14);
        assert!((fixed - r).abs().max() < 1e-4);
        assert!(nearest_rotation(&-Matrix3::<f64>::identity()).is_none());
    }

    fn cam_at(pos: Vector3<f64>, target: Vector3<f64>) -> Camera {
        identity_cam().looking_at(pos, target, Vector3::y()).unwrap()
    }

    #[test]
    fn lookat_two_cameras() {
        let cams = [cam_at(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()), cam_at(Vector3::new(-1.0, 0.0, 0.0), Vector3::zeros())];
        // both axes are the x axis: parallel, degenerate
        assert!(triangulate_lookat(&cams).is_err());

        let cams = [cam_at(Vector3::new(1.0, 0.0, -1.0), Vector3::zeros()), cam_at(Vector3::new(-1.0, 0.0, -1.0), Vector3::zeros())];
        let la = triangulate_lookat(&cams).unwrap();
        assert!(la.point.norm() < 1e-12);
        assert!(la.residual_rms < 1e-12);
    }

    #[test]
    fn lookat_circle_of_cameras() {
        let cams: Vec<_> = (0..10)
            .map(|i| {
                let a = i as f64 * 0.3;
                cam_at(Vector3::new(3.0 * a.sin(), 0.0, -3.0 * a.cos()), Vector3::zeros())
            })
            .collect();
        let la = triangulate_lookat(&cams).unwrap();
        assert!(la.point.norm() < 1e-9, "{}", la.point);
    }

    #[test]
    fn lookat_with_perturbed_axes() {
        let target = Vector3::new(1.0, 2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cams: Vec<_> = (0..12)
            .map(|i| {
                let a = i as f64 * 0.5;
                let pos = target + Vector3::new(4.0 * a.sin(), 0.5 * (i as f64 - 6.0) * 0.2, -4.0 * a.cos());
                let mut cam = cam_at(pos, target);
                let axis = Unit::new_normalize(Vector3::new(rng.random(), rng.random(), rng.random()) - Vector3::repeat(0.5));
                let tilt = Rotation3::from_axis_angle(&axis, 1e-3).into_inner();
                cam.orientation *= tilt;
                cam
            })
            .collect();
        let la = triangulate_lookat(&cams).unwrap();
        assert!((la.point - target).norm() < 1e-2, "{}", la.point);
        assert!(la.residual_rms > 0.0);
    }

    #[test]
    fn lookat_needs_two_cameras() {
        assert!(triangulate_lookat(&[identity_cam()]).is_err());
    }

    proptest! {
        #[test]
        fn project_backproject_identity(
            px in 0.0f64..640.0, py in 0.0f64..480.0, z in 0.1f64..50.0,
            yaw in -1.0f64..1.0, pitch in -0.5f64..0.5,
            cx in -2.0f64..2.0, cy in -2.0f64..2.0, cz in -5.0f64..-1.0,
            f in 200.0f64..900.0,
        ) {
            let mut cam = Camera::pinhole(f, Vector2::new(320.0, 240.0), (640, 480));
            cam.orientation = Rotation3::from_euler_angles(pitch, yaw, 0.0).into_inner();
            cam.position = Vector3::new(cx, cy, cz);
            let u = Vector2::new(px, py);
            let x = cam.backproject(&u, z).unwrap();
            let back = cam.project(&x).unwrap();
            prop_assert!((back - u).norm() < 1e-6);
        }

        #[test]
        fn lookat_is_rigid_invariant(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in -3.0f64..3.0,
            tx in -10.0f64..10.0, ty in -10.0f64..10.0, tz in -10.0f64..10.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cams: Vec<_> = (0..6).map(|_| {
                let pos = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-1.0..1.0), rng.random_range(-6.0..-2.0));
                let target = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
                cam_at(pos, target)
            }).collect();
            let rot = Rotation3::new(Vector3::new(ax, ay, az)).into_inner();
            let t = Vector3::new(tx, ty, tz);
            let moved: Vec<_> = cams.iter().map(|c| {
                let mut m = c.clone();
                m.position = rot * c.position + t;
                m.orientation = c.orientation * rot.transpose();
                m
            }).collect();
            let a = triangulate_lookat(&cams).unwrap().point;
            let b = triangulate_lookat(&moved).unwrap().point;
            let back = rot.transpose() * (b - t);
            prop_assert!((back - a).norm() < 1e-9);
        }
    }
}
