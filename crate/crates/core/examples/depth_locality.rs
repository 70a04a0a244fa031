//! How well one reference point's pixel affine predicts neighbours at
//! similar and at different depths.

use lcec::c3m::ReferenceAffine;
use lcec::geometry::{project_point, EulerAngles, Frame, Intrinsics, RigidTransform};
use nalgebra::{Rotation3, Vector3};

fn main() {
    let k = Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let r = EulerAngles::new(0.04, -0.03, 0.02).to_rotation();
    let t = RigidTransform::from_rotation(
        Rotation3::from_matrix_unchecked(r),
        Vector3::new(0.06, -0.04, 0.05),
        Frame::Virtual,
        Frame::Camera,
    );
    let q = Vector3::new(0.3, -0.2, 5.0);
    let aff = ReferenceAffine::from_reference(&k, &t, &q);
    println!("depth offset  prediction error (px)");
    for dz in [0.0, 0.05, 0.25, 1.0, 3.0] {
        let p = q + Vector3::new(0.4, 0.3, dz);
        let pv = project_point(&p, &k).unwrap();
        let pc = project_point(&t.transform_point(&p), &k).unwrap();
        println!("{dz:>12.2}  {:.4}", (aff.predict(&pv) - pc).norm());
    }
}
