//! Rigid poses, the pinhole camera model and dense reprojection.
//!
//! Poses are camera-to-world transforms. Tangent vectors are ordered
//! `[translation; rotation]` and updates are applied on the left:
//! `G <- exp(xi) * G`.

use std::ops::Mul;

use nalgebra::{
    Matrix2x3, Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6,
};
use thiserror::Error;

use crate::grid::{scaled_dim, source_coord, Grid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("inverse depth must be positive, got {0}")]
    NonPositiveInverseDepth(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid inverse depth map: {0}")]
    InvalidDepthMap(String),
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Pose from a translation and an `(x, y, z, w)` quaternion as stored in
    /// trajectory files. The quaternion is normalized.
    pub fn from_tum(t: [f64; 3], q_xyzw: [f64; 4]) -> Self {
        let q = Quaternion::new(q_xyzw[3], q_xyzw[0], q_xyzw[1], q_xyzw[2]);
        Self::new(UnitQuaternion::from_quaternion(q), Vector3::from(t))
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`, with
    /// camera `y` pointing down (against `up`) and `z` forward.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        let rot = UnitQuaternion::from_matrix_eps(&r, 1e-15, 100, UnitQuaternion::identity());
        Self::new(rot, eye)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a pose from the upper 3×4 block of a homogeneous matrix. The
    /// rotation block is projected onto SO(3).
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        let rot = UnitQuaternion::from_matrix_eps(&r, 1e-15, 100, UnitQuaternion::identity());
        Self::new(rot, t)
    }

    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.inverse();
        SE3Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates for a camera-to-world pose.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn exp(xi: &Vector6<f64>) -> SE3Pose {
        let v = Vector3::new(xi[0], xi[1], xi[2]);
        let w = Vector3::new(xi[3], xi[4], xi[5]);
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let (b, c) = if theta < 1e-5 {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            (
                (1.0 - theta.cos()) / theta2,
                (theta - theta.sin()) / (theta2 * theta),
            )
        };
        let k = skew(&w);
        let jac = Matrix3::identity() + k * b + k * k * c;
        SE3Pose {
            rotation: UnitQuaternion::from_scaled_axis(w),
            translation: jac * v,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let w = self.rotation.scaled_axis();
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = skew(&w);
        let coeff = if theta < 1e-5 {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
        };
        let jac_inv = Matrix3::identity() - k * 0.5 + k * k * coeff;
        let v = jac_inv * self.translation;
        Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
    }

    /// Left retraction `exp(xi) * self`, renormalizing the quaternion.
    pub fn retract(&self, xi: &Vector6<f64>) -> SE3Pose {
        let mut out = SE3Pose::exp(xi).compose(self);
        out.rotation = UnitQuaternion::new_normalize(out.rotation.into_inner());
        out
    }

    /// Rotation angle (radians) of the relative rotation between two poses.
    pub fn angle_to(&self, other: &SE3Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        self.compose(&rhs)
    }
}

impl Mul<&SE3Pose> for &SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: &SE3Pose) -> SE3Pose {
        self.compose(rhs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Camera for the same view at a resolution scaled by `scale`. Pixel
    /// centers stay on integer coordinates at every resolution.
    pub fn scaled(&self, scale: f64) -> PinholeCamera {
        PinholeCamera {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: (self.cx + 0.5) * scale - 0.5,
            cy: (self.cy + 0.5) * scale - 0.5,
            width: scaled_dim(self.width, scale),
            height: scaled_dim(self.height, scale),
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    #[inline]
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Viewing ray through a pixel, normalized to unit depth.
    #[inline]
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    pub fn unproject(
        &self,
        pixel: &Vector2<f64>,
        inv_depth: f64,
    ) -> Result<Vector3<f64>, GeometryError> {
        if inv_depth <= 0.0 {
            return Err(GeometryError::NonPositiveInverseDepth(inv_depth));
        }
        Ok(self.ray(pixel) / inv_depth)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }
}

/// Per-pixel inverse depth with its marginal variance.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseDepthMap {
    pub values: Grid<f64>,
    pub covariance: Grid<f64>,
}

impl InverseDepthMap {
    pub fn new(values: Grid<f64>, covariance: Grid<f64>) -> Result<Self, GeometryError> {
        if !values.same_dims(&covariance) {
            return Err(GeometryError::InvalidDepthMap(format!(
                "values {:?} vs covariance {:?}",
                values.dims(),
                covariance.dims()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
            return Err(GeometryError::InvalidDepthMap(format!(
                "inverse depth {v} is not positive"
            )));
        }
        if let Some(c) = covariance.iter().find(|c| !(**c >= 0.0)) {
            return Err(GeometryError::InvalidDepthMap(format!(
                "covariance {c} is negative"
            )));
        }
        Ok(Self { values, covariance })
    }

    pub fn constant(width: usize, height: usize, inv_depth: f64) -> Self {
        Self {
            values: Grid::new(width, height, inv_depth),
            covariance: Grid::new(width, height, 0.0),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    /// Bilinear upsampling to a camera at `1/scale` times the grid
    /// resolution. Returns metric depth and its variance (first-order
    /// propagation `var_z = var_d / d^4`).
    pub fn upsample(&self, width: usize, height: usize, scale: f64) -> (Grid<f64>, Grid<f64>) {
        let inv = self.values.resample(width, height, scale);
        let cov = self.covariance.resample(width, height, scale);
        let depth = inv.map(|d| 1.0 / d);
        let var = Grid::from_fn(width, height, |x, y| {
            let d = inv[(x, y)];
            cov[(x, y)] / (d * d * d * d)
        });
        (depth, var)
    }
}

/// Reprojected pixel coordinates of one frame's pixels in another frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprojectionField {
    pub coords: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

/// Reprojects every pixel of frame `i` into frame `j` through
/// `G_j^{-1} * G_i`. Pixels landing behind camera `j` (or with non-positive
/// inverse depth) are flagged invalid and keep their source coordinate.
pub fn reproject_field(
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    camera: &PinholeCamera,
    inv_depth_i: &Grid<f64>,
) -> ReprojectionField {
    let rel = pose_j.inverse().compose(pose_i);
    let (w, h) = inv_depth_i.dims();
    let mut coords = Grid::new(w, h, Vector2::zeros());
    let mut valid = Grid::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let p = Vector2::new(x as f64, y as f64);
            let d = inv_depth_i[(x, y)];
            coords[(x, y)] = p;
            if d <= 0.0 {
                continue;
            }
            let pj = rel.transform_point(&(camera.ray(&p) / d));
            if pj.z > 0.0 {
                coords[(x, y)] = camera.project_unchecked(&pj);
                valid[(x, y)] = true;
            }
        }
    }
    ReprojectionField { coords, valid }
}

/// Pixel-center coordinate in a grid of resolution `scale` relative to the
/// full-resolution coordinate `u`.
pub fn rescale_coord(u: f64, scale: f64) -> f64 {
    (u + 0.5) * scale - 0.5
}

/// Full-resolution coordinate that maps onto pixel `i` of a grid scaled by
/// `scale`.
pub fn full_res_coord(i: usize, scale: f64) -> f64 {
    source_coord(i, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn project_examples() {
        let c = cam();
        assert_eq!(
            c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            Vector2::new(50.0, 50.0)
        );
        assert_eq!(
            c.project(&Vector3::new(0.5, 0.0, 1.0)).unwrap(),
            Vector2::new(100.0, 50.0)
        );
        assert_eq!(
            c.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(-1.0))
        );
    }

    #[test]
    fn unproject_examples() {
        let c = cam();
        assert_eq!(
            c.unproject(&Vector2::new(50.0, 50.0), 0.5).unwrap(),
            Vector3::new(0.0, 0.0, 2.0)
        );
        assert_eq!(
            c.unproject(&Vector2::new(100.0, 50.0), 1.0).unwrap(),
            Vector3::new(0.5, 0.0, 1.0)
        );
        assert!(matches!(
            c.unproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonPositiveInverseDepth(_))
        ));
    }

    #[test]
    fn camera_invariants_rejected() {
        assert!(PinholeCamera::new(0.0, 1.0, 5.0, 5.0, 10, 10).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 10.0, 5.0, 10, 10).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 5.0, 0.0, 10, 10).is_err());
    }

    #[test]
    fn exp_zero_is_identity() {
        let p = SE3Pose::exp(&Vector6::zeros());
        assert_eq!(p, SE3Pose::identity());
    }

    #[test]
    fn scaled_camera_keeps_principal_point_consistent() {
        let c = PinholeCamera::new(100.0, 100.0, 63.5, 47.5, 128, 96).unwrap();
        let s = c.scaled(0.125);
        assert_eq!((s.width, s.height), (16, 16 * 96 / 128));
        assert!((s.cx - 7.5).abs() < 1e-12 && (s.cy - 5.5).abs() < 1e-12);
        // A point projects onto consistent coordinates at both resolutions.
        let p = Vector3::new(0.2, -0.1, 1.7);
        let full = c.project(&p).unwrap();
        let low = s.project(&p).unwrap();
        assert!((rescale_coord(full.x, 0.125) - low.x).abs() < 1e-12);
        assert!((rescale_coord(full.y, 0.125) - low.y).abs() < 1e-12);
    }

    #[test]
    fn reprojection_identity_pose_is_exact() {
        let c = cam().scaled(0.1);
        let depth = Grid::from_fn(c.width, c.height, |x, y| 0.3 + 0.01 * (x + y) as f64);
        let pose = SE3Pose::exp(&Vector6::new(0.1, 0.2, -0.3, 0.05, -0.02, 0.1));
        let field = reproject_field(&pose, &pose, &c, &depth);
        for y in 0..c.height {
            for x in 0..c.width {
                assert!(field.valid[(x, y)]);
                let p = field.coords[(x, y)];
                assert!((p.x - x as f64).abs() < 1e-12 && (p.y - y as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reprojection_forward_translation_matches_per_pixel_oracle() {
        let c = PinholeCamera::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
        let depth = Grid::new(16, 12, 0.5); // plane at z = 2
        let gi = SE3Pose::identity();
        let gj = SE3Pose::from_translation(Vector3::new(0.0, 0.0, 0.5));
        let field = reproject_field(&gi, &gj, &c, &depth);
        for y in 0..12 {
            for x in 0..16 {
                // point (X, Y, 2) seen from z = 0.5 has depth 1.5
                let px = (x as f64 - 7.5) / 20.0 * 2.0;
                let py = (y as f64 - 5.5) / 20.0 * 2.0;
                let u = 20.0 * px / 1.5 + 7.5;
                let v = 20.0 * py / 1.5 + 5.5;
                let got = field.coords[(x, y)];
                assert!((got.x - u).abs() < 1e-12 && (got.y - v).abs() < 1e-12);
                // moving closer expands the field radially
                assert!((got.x - 7.5).abs() >= (x as f64 - 7.5).abs());
            }
        }
    }

    #[test]
    fn reprojection_behind_camera_is_invalid() {
        let c = PinholeCamera::new(20.0, 20.0, 7.5, 5.5, 16, 12).unwrap();
        let mut depth = Grid::new(16, 12, 0.5);
        depth[(3, 3)] = 10.0; // z = 0.1
        let gj = SE3Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let field = reproject_field(&SE3Pose::identity(), &gj, &c, &depth);
        assert!(!field.valid[(3, 3)]);
        assert!(field.valid[(4, 3)]);
    }

    fn tangent() -> impl Strategy<Value = Vector6<f64>> {
        prop::array::uniform6(-2.0f64..2.0).prop_map(|a| Vector6::from_row_slice(&a))
    }

    proptest! {
        #[test]
        fn exp_of_negated_tangent_inverts(xi in tangent()) {
            let p = SE3Pose::exp(&xi).compose(&SE3Pose::exp(&(-xi)));
            prop_assert!(p.rotation.angle() < 1e-9);
            prop_assert!(p.translation.norm() < 1e-9);
        }

        #[test]
        fn compose_with_inverse_is_identity(xi in tangent()) {
            let pose = SE3Pose::exp(&xi);
            let p = pose.compose(&pose.inverse());
            prop_assert!((pose.rotation.quaternion().norm() - 1.0).abs() < 1e-9);
            prop_assert!(p.rotation.angle() < 1e-9);
            prop_assert!(p.translation.norm() < 1e-9);
        }

        #[test]
        fn log_inverts_exp(xi in prop::array::uniform6(-1.0f64..1.0)) {
            let xi = Vector6::from_row_slice(&xi);
            let back = SE3Pose::exp(&xi).log();
            prop_assert!((back - xi).norm() < 1e-9);
        }
    }

    #[test]
    fn project_unproject_roundtrip_10k() {
        use rand::{Rng, SeedableRng};
        let c = PinholeCamera::new(525.0, 520.0, 319.5, 239.5, 640, 480).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let p = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let d = rng.random_range(0.05..5.0);
            let back = c.project(&c.unproject(&p, d).unwrap()).unwrap();
            assert!((back - p).norm() < 1e-9);
        }
    }
}
