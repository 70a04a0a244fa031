//! Frames, projection, Euler angles and the calibration error metrics.

use lcec::geometry::{
    canonical_virtual_pose, extrinsic_euler, extrinsic_from_euler, project_point, rotation_error, translation_error,
    EulerAngles, Intrinsics,
};
use nalgebra::Vector3;

fn main() {
    let k = Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let truth = extrinsic_from_euler(
        &EulerAngles::new(3f64.to_radians(), -2f64.to_radians(), 1f64.to_radians()),
        Vector3::new(0.1, -0.05, 0.2),
    );
    let p = Vector3::new(6.0, 0.5, -0.3);
    let pixel = project_point(&truth.transform_point(&p), &k).unwrap();
    println!("LiDAR point {p:?} projects to ({:.2}, {:.2})", pixel.x, pixel.y);

    let e = extrinsic_euler(&truth);
    println!("euler (deg): {:?}", e.to_degrees());

    let initial = canonical_virtual_pose();
    println!(
        "canonical pose is {:.3} deg and {:.3} m from the truth",
        rotation_error(&initial, &truth).to_degrees(),
        translation_error(&initial, &truth)
    );
}
