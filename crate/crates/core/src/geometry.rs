//! Rigid-body algebra, the pinhole camera and 3D to 2D Gaussian projection.
//!
//! Twists are ordered `(ω, v)`: rotation first, translation second.
//! Cameras follow the +z forward, +x right, +y down convention and pixel
//! `(u, v)` is evaluated at the continuous coordinate `(u, v)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Gaussians closer to the camera than this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance, in px².
pub const BLUR_EPSILON: f64 = 0.3;
/// Smallest admissible scale of a Gaussian axis, in scene units.
pub const SCALE_FLOOR: f64 = 1e-4;
/// `log` refuses rotations closer than this to π.
pub const LOG_PI_MARGIN: f64 = 1e-6;

pub type Twist = [f64; 6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Unit norm with `w >= 0`.
    pub fn canonical(self) -> Self {
        let q = self.normalized();
        if q.w < 0.0 {
            Quaternion::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        }
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product: rotating by the result rotates by `other` first.
    pub fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize() * angle;
        Quaternion::exp_map(a)
    }

    /// Quaternion of the rotation vector `omega` (axis times angle).
    pub fn exp_map(omega: Vector3<f64>) -> Self {
        let theta = omega.norm();
        let half = 0.5 * theta;
        let k = if theta < 1e-8 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        Quaternion::new(half.cos(), k * omega.x, k * omega.y, k * omega.z)
    }

    /// Rotation vector of a unit quaternion, angle in `[0, π]`.
    pub fn log_map(self) -> Vector3<f64> {
        let q = self.canonical();
        let v = Vector3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-12 {
            // sin(θ/2) ≈ θ/2 and w ≈ 1
            return v * (2.0 / q.w);
        }
        let theta = 2.0 * s.atan2(q.w);
        v * (theta / s)
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(self) -> f64 {
        self.log_map().norm()
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_matrix(self) -> Matrix3<f64> {
        let Quaternion { w, x, y, z } = self.normalized();
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the result is canonical.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.canonical()
    }

    pub fn rotate(self, v: Vector3<f64>) -> Vector3<f64> {
        self.to_matrix() * v
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Se3::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Se3 { rotation: Quaternion::IDENTITY, translation: Vector3::zeros() }
    }

    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Se3 { rotation, translation }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Se3::new(Quaternion::IDENTITY, Vector3::new(x, y, z))
    }

    pub fn from_rotation(rotation: Quaternion) -> Self {
        Se3::new(rotation, Vector3::zeros())
    }

    pub fn rot_z(angle: f64) -> Self {
        Se3::from_rotation(Quaternion::from_axis_angle(Vector3::z(), angle))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation.mul(other.rotation).normalized(),
            translation: self.rotation_matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let r_inv = self.rotation.conjugate().normalized();
        Se3 { rotation: r_inv, translation: -(r_inv.to_matrix() * self.translation) }
    }

    pub fn exp(xi: &Twist) -> Se3 {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let rotation = Quaternion::exp_map(omega);
        let translation = left_jacobian(&omega) * v;
        Se3 { rotation, translation }
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        let omega = self.rotation.log_map();
        let theta = omega.norm();
        if theta > std::f64::consts::PI - LOG_PI_MARGIN {
            return Err(GeometryError::LogNearPi(theta));
        }
        let v = left_jacobian_inverse(&omega) * self.translation;
        Ok([omega.x, omega.y, omega.z, v.x, v.y, v.z])
    }

    /// Screw-linear interpolation `exp(τ · log(T))`.
    pub fn interpolate(&self, tau: f64) -> Result<Se3, GeometryError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(GeometryError::FractionOutOfRange(tau));
        }
        if tau == 0.0 {
            return Ok(Se3::identity());
        }
        let xi = self.log()?;
        if tau == 1.0 {
            return Ok(*self);
        }
        Ok(Se3::exp(&xi.map(|c| c * tau)))
    }

    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Rotation angle (radians) and translation distance of `self⁻¹ ∘ other`.
    pub fn distance(&self, other: &Se3) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation_angle(), (self.translation - other.translation).norm())
    }

    /// `T ∘ self ∘ T⁻¹`, the same motion expressed in another frame.
    pub fn conjugate_by(&self, frame: &Se3) -> Se3 {
        frame.compose(self).compose(&frame.inverse())
    }
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() + w * a + w * w * b
}

fn left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// `Σ = R · diag(s)² · Rᵀ`, with `s` clamped to the scale floor.
pub fn covariance_from_rs(r: Quaternion, s: Vector3<f64>) -> Matrix3<f64> {
    let rot = r.to_matrix();
    let m = rot * Matrix3::from_diagonal(&s.map(|v| v.max(SCALE_FLOOR)));
    m * m.transpose()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(with = "se3_serde")]
    pub world_to_camera: Se3,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: Se3,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { fx, fy, cx, cy, width, height, world_to_camera };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidCamera)
        }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = Quaternion::from_matrix(&rot);
        let translation = -(rotation.to_matrix() * eye);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            Se3::new(rotation, translation),
        )
    }

    pub fn to_camera_frame(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.apply(p)
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = self.to_camera_frame(p);
        (c.z > NEAR_PLANE).then(|| Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: Vector2<f64>,
    /// Includes the `BLUR_EPSILON` regularizer.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    /// Camera-frame center.
    pub cam_point: Vector3<f64>,
    /// Perspective Jacobian at `cam_point`.
    pub jacobian: Matrix2x3<f64>,
}

/// Projects a 3D Gaussian; `None` when its center is not in front of the near plane.
pub fn project_gaussian(mean: &Vector3<f64>, cov: &Matrix3<f64>, cam: &Camera) -> Option<ProjectedGaussian> {
    let pc = cam.to_camera_frame(mean);
    if pc.z <= NEAR_PLANE {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let jacobian = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let w = cam.world_to_camera.rotation_matrix();
    let t = jacobian * w;
    let cov2 = t * cov * t.transpose() + Matrix2::identity() * BLUR_EPSILON;
    Some(ProjectedGaussian {
        mean: Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
        cov: cov2,
        depth: z,
        cam_point: pc,
        jacobian,
    })
}

pub(crate) mod se3_serde {
    use super::{Quaternion, Se3};
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct PoseRepr {
        pub q: [f64; 4],
        pub t: [f64; 3],
    }

    impl From<&Se3> for PoseRepr {
        fn from(p: &Se3) -> Self {
            PoseRepr { q: p.rotation.to_array(), t: [p.translation.x, p.translation.y, p.translation.z] }
        }
    }

    impl From<PoseRepr> for Se3 {
        fn from(r: PoseRepr) -> Self {
            Se3::new(Quaternion::from_array(r.q), Vector3::from(r.t))
        }
    }

    pub fn serialize<S: Serializer>(p: &Se3, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr::from(p).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Se3, D::Error> {
        PoseRepr::deserialize(d).map(Se3::from)
    }
}
