//! Pixel-level affine relation between the virtual and the real camera,
//! exact for a reference point and approximate for points at similar depth.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::geometry::{Intrinsics, RigidTransform};

/// `q̃_c = A·q̃_v + b` for the reference point `q`, with
/// `A = (q^V_z / q^C_z)·K·R·K⁻¹` and `b = K·t / q^C_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceAffine {
    pub a: Matrix3<f64>,
    pub b: Vector3<f64>,
}

impl ReferenceAffine {
    /// `virtual_to_camera` maps virtual-camera coordinates into the real
    /// camera; `q_v` is the reference point in virtual-camera coordinates.
    pub fn from_reference(k: &Intrinsics, virtual_to_camera: &RigidTransform, q_v: &Vector3<f64>) -> Self {
        let km = k.matrix();
        let k_inv = km.try_inverse().expect("validated intrinsics are invertible");
        let q_c = virtual_to_camera.transform_point(q_v);
        let a = km * virtual_to_camera.rotation_matrix() * k_inv * (q_v.z / q_c.z);
        let b = km * virtual_to_camera.translation() / q_c.z;
        Self { a, b }
    }

    /// Predicted RGB pixel for a LIP pixel.
    pub fn predict(&self, p_v: &Vector2<f64>) -> Vector2<f64> {
        let h = self.a * Vector3::new(p_v.x, p_v.y, 1.0) + self.b;
        Vector2::new(h.x / h.z, h.y / h.z)
    }
}
