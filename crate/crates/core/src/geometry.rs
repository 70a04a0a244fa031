//! Frame-aware rigid-body math, pinhole projection and the extrinsic error metrics.
//!
//! Conventions used throughout the crate:
//!
//! - A [`RigidTransform`] with `source = Lidar` and `target = Camera` is the
//!   extrinsic `T_C_L`: it maps a point expressed in the LiDAR frame into the
//!   camera frame, `p_C = R * p_L + t`.
//! - Camera frames are x-right, y-down, z-forward. The LiDAR frame is
//!   x-forward, y-left, z-up.
//! - Pixel `(u, v)` belongs to the integer cell `(floor(u + 0.5), floor(v + 0.5))`,
//!   so pixel centres sit on integer coordinates.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Depth below which a camera-frame point is treated as not imageable.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (deviation {0:e})")]
    NotARotation(f64),
    #[error("homogeneous matrix has an invalid bottom row")]
    NotRigid,
    #[error("cannot compose {outer_source:?}<-{outer_target:?} after {inner_source:?}->{inner_target:?}")]
    FrameMismatch {
        inner_source: Frame,
        inner_target: Frame,
        outer_source: Frame,
        outer_target: Frame,
    },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Coordinate frame labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Lidar,
    Camera,
    Virtual,
}

/// An SE(3) pose mapping points from `source` into `target`.
///
/// Serialized as a row-major 4x4 `matrix` plus the two frame labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRecord", into = "TransformRecord")]
pub struct RigidTransform {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
    source: Frame,
    target: Frame,
}

#[derive(Serialize, Deserialize)]
struct TransformRecord {
    matrix: [f64; 16],
    source: Frame,
    target: Frame,
}

impl From<RigidTransform> for TransformRecord {
    fn from(t: RigidTransform) -> Self {
        Self {
            matrix: t.to_row_major(),
            source: t.source,
            target: t.target,
        }
    }
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = GeometryError;

    fn try_from(r: TransformRecord) -> Result<Self, Self::Error> {
        // text round trips lose the last bits of orthonormality
        RigidTransform::from_row_major(&r.matrix, r.source, r.target, 1e-6)
    }
}

fn rotation_deviation(m: &Matrix3<f64>) -> f64 {
    let ortho = (m.transpose() * m - Matrix3::identity()).amax();
    ortho.max((m.determinant() - 1.0).abs())
}

impl RigidTransform {
    /// Builds a transform from a raw 3x3 matrix, rejecting anything that is not
    /// a proper rotation within [`ROTATION_TOLERANCE`].
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        source: Frame,
        target: Frame,
    ) -> Result<Self, GeometryError> {
        Self::with_tolerance(rotation, translation, source, target, ROTATION_TOLERANCE)
    }

    /// Like [`RigidTransform::new`] but with a caller-chosen tolerance; the
    /// accepted matrix is projected back onto SO(3).
    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        source: Frame,
        target: Frame,
        tolerance: f64,
    ) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation(f64::INFINITY));
        }
        let deviation = rotation_deviation(&rotation);
        if deviation > tolerance {
            return Err(GeometryError::NotARotation(deviation));
        }
        let rotation = if deviation > 0.0 {
            Rotation3::from_matrix_eps(&rotation, 1e-15, 100, Rotation3::identity())
        } else {
            Rotation3::from_matrix_unchecked(rotation)
        };
        Ok(Self {
            rotation,
            translation,
            source,
            target,
        })
    }

    pub fn from_rotation(
        rotation: Rotation3<f64>,
        translation: Vector3<f64>,
        source: Frame,
        target: Frame,
    ) -> Self {
        Self {
            rotation,
            translation,
            source,
            target,
        }
    }

    pub fn identity(source: Frame, target: Frame) -> Self {
        Self::from_rotation(Rotation3::identity(), Vector3::zeros(), source, target)
    }

    /// Parses a row-major homogeneous 4x4 matrix.
    pub fn from_matrix(
        m: &Matrix4<f64>,
        source: Frame,
        target: Frame,
        tolerance: f64,
    ) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > tolerance.max(1e-12))
        {
            return Err(GeometryError::NotRigid);
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::with_tolerance(r, t, source, target, tolerance)
    }

    /// `from_matrix` over a flat row-major slice of 16 values.
    pub fn from_row_major(
        values: &[f64],
        source: Frame,
        target: Frame,
        tolerance: f64,
    ) -> Result<Self, GeometryError> {
        if values.len() != 16 {
            return Err(GeometryError::NotRigid);
        }
        Self::from_matrix(&Matrix4::from_row_slice(values), source, target, tolerance)
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn source(&self) -> Frame {
        self.source
    }

    pub fn target(&self) -> Frame {
        self.target
    }

    /// Same rotation and translation, relabelled frames.
    pub fn relabel(&self, source: Frame, target: Frame) -> Self {
        Self {
            source,
            target,
            ..self.clone()
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            translation: -(r_inv * self.translation),
            rotation: r_inv,
            source: self.target,
            target: self.source,
        }
    }

    /// `self ∘ inner`: applies `inner` first. `inner.target` must equal `self.source`.
    pub fn compose(&self, inner: &RigidTransform) -> Result<Self, GeometryError> {
        if inner.target != self.source {
            return Err(GeometryError::FrameMismatch {
                inner_source: inner.source,
                inner_target: inner.target,
                outer_source: self.source,
                outer_target: self.target,
            });
        }
        Ok(Self {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
            source: inner.source,
            target: self.target,
        })
    }

    /// Position of the target frame's origin expressed in the source frame, `-R^T t`.
    pub fn origin_in_source(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn euler(&self) -> EulerAngles {
        EulerAngles::from_rotation(&self.rotation_matrix())
    }

    /// Checks the SO(3) invariant at the given tolerance.
    pub fn is_valid(&self, tolerance: f64) -> bool {
        rotation_deviation(self.rotation.matrix()) <= tolerance
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = self.euler().to_degrees();
        write!(
            f,
            "{:?}->{:?} ypr=({:.3}°, {:.3}°, {:.3}°) t=({:.4}, {:.4}, {:.4})",
            self.source,
            self.target,
            e[0],
            e[1],
            e[2],
            self.translation.x,
            self.translation.y,
            self.translation.z
        )
    }
}

/// Rotation of the canonical virtual camera relative to the LiDAR: LiDAR
/// x-forward becomes camera z-forward, LiDAR y-left becomes camera -x,
/// LiDAR z-up becomes camera -y.
pub fn canonical_rotation() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
}

/// The default LiDAR → virtual-camera pose: axis permutation, zero translation.
pub fn canonical_virtual_pose() -> RigidTransform {
    RigidTransform::from_rotation(
        Rotation3::from_matrix_unchecked(canonical_rotation()),
        Vector3::zeros(),
        Frame::Lidar,
        Frame::Virtual,
    )
}

/// Pinhole intrinsics plus image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Parses a row-major 3x3 camera matrix; skew must be zero.
    pub fn from_matrix(k: &Matrix3<f64>, width: u32, height: u32) -> Result<Self, GeometryError> {
        let expected_zero = [k[(0, 1)], k[(1, 0)], k[(2, 0)], k[(2, 1)]];
        if expected_zero.iter().any(|v| v.abs() > 1e-9) || (k[(2, 2)] - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidIntrinsics(
                "camera matrix must have the form [fx 0 cx; 0 fy cy; 0 0 1]".into(),
            ));
        }
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Camera-frame point at `depth` along the ray through `pixel`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Integer pixel cell containing `pixel`, if it lies inside the image.
    pub fn pixel_cell(&self, pixel: &Vector2<f64>) -> Option<(u32, u32)> {
        let u = (pixel.x + 0.5).floor();
        let v = (pixel.y + 0.5).floor();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as u32, v as u32))
        } else {
            None
        }
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        self.pixel_cell(pixel).is_some()
    }
}

/// Marker for a point that is on or behind the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Behind;

/// Pinhole projection of a camera-frame point.
pub fn project_point(p: &Vector3<f64>, k: &Intrinsics) -> Result<Vector2<f64>, Behind> {
    if p.z <= DEPTH_EPSILON || !p.z.is_finite() {
        return Err(Behind);
    }
    Ok(Vector2::new(
        k.fx * p.x / p.z + k.cx,
        k.fy * p.y / p.z + k.cy,
    ))
}

/// `R p + t`.
pub fn transform_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.transform_point(p)
}

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: Vector3<f64>,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(position: Vector3<f64>, intensity: f64) -> Self {
        Self {
            position,
            intensity,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.intensity.is_finite()
            && self.intensity >= 0.0
            && self.position.iter().all(|v| v.is_finite())
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    a - two_pi * ((a - PI) / two_pi).ceil()
}

/// Intrinsic Z-Y-X Euler angles: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self {
            yaw: wrap_angle(yaw),
            pitch: wrap_angle(pitch),
            roll: wrap_angle(roll),
        }
    }

    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        Self::new(yaw, pitch, roll)
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let (sr, cr) = self.roll.sin_cos();
        Matrix3::new(
            cy * cp,
            cy * sp * sr - sy * cr,
            cy * sp * cr + sy * sr,
            sy * cp,
            sy * sp * sr + cy * cr,
            sy * sp * cr - cy * sr,
            -sp,
            cp * sr,
            cp * cr,
        )
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.yaw, self.pitch, self.roll)
    }

    pub fn to_degrees(&self) -> [f64; 3] {
        [
            self.yaw.to_degrees(),
            self.pitch.to_degrees(),
            self.roll.to_degrees(),
        ]
    }
}

/// Euler angles of an extrinsic taken relative to the canonical axis
/// permutation, i.e. the camera attitude in LiDAR axes (yaw about LiDAR z-up,
/// pitch about y-left, roll about x-forward). The raw camera-axis Euler
/// decomposition of `T_C_L` sits at pitch = -90°, a gimbal singularity.
pub fn extrinsic_euler(t: &RigidTransform) -> EulerAngles {
    EulerAngles::from_rotation(&(canonical_rotation().transpose() * t.rotation_matrix()))
}

/// Builds `T_C_L` from LiDAR-axis Euler angles (inverse of [`extrinsic_euler`])
/// and a translation.
pub fn extrinsic_from_euler(euler: &EulerAngles, translation: Vector3<f64>) -> RigidTransform {
    let r = canonical_rotation() * euler.to_rotation();
    RigidTransform::from_rotation(
        Rotation3::from_matrix_unchecked(r),
        translation,
        Frame::Lidar,
        Frame::Camera,
    )
}

/// Norm of the componentwise-wrapped Euler-vector difference, radians.
pub fn rotation_error(estimated: &RigidTransform, truth: &RigidTransform) -> f64 {
    let a = extrinsic_euler(estimated);
    let b = extrinsic_euler(truth);
    Vector3::new(
        wrap_angle(a.yaw - b.yaw),
        wrap_angle(a.pitch - b.pitch),
        wrap_angle(a.roll - b.roll),
    )
    .norm()
}

/// Distance between the two camera centres, `‖-R*^T t* + R^T t‖`, metres.
pub fn translation_error(estimated: &RigidTransform, truth: &RigidTransform) -> f64 {
    (estimated.origin_in_source() - truth.origin_in_source()).norm()
}
