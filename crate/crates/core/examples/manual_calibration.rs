//! Pose from hand-picked correspondences with click noise, plus per-pick
//! residuals.

use lcec::c3m::CorrespondenceSet;
use lcec::geometry::{project_point, rotation_error, translation_error, Intrinsics};
use lcec::io::synthetic::perturbed_extrinsic;
use lcec::pipeline::manual_calibrate;
use nalgebra::{Vector2, Vector3};

fn main() {
    let k = Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let truth = perturbed_extrinsic(&Vector3::new(0.0, 1.0, 0.2), 4f64.to_radians(), &Vector3::new(0.05, 0.1, 0.0));
    // table corners, a monitor, a door frame
    let points = [
        Vector3::new(2.0, 0.8, -0.5),
        Vector3::new(2.0, -0.8, -0.5),
        Vector3::new(3.0, 0.9, -0.5),
        Vector3::new(3.0, -0.9, -0.5),
        Vector3::new(2.5, 0.2, 0.1),
        Vector3::new(2.5, -0.3, 0.4),
        Vector3::new(4.0, 1.2, 0.9),
        Vector3::new(4.0, -1.1, 1.0),
    ];
    let clicks = [(1.5, -1.0), (-2.0, 0.5), (0.5, 1.8), (-1.0, -1.5), (1.9, 0.3), (-0.4, -2.0), (-1.6, 1.2), (1.1, 1.6)];
    let mut picks = CorrespondenceSet::default();
    for (p, c) in points.iter().zip(clicks) {
        let px = project_point(&truth.transform_point(p), &k).unwrap();
        picks.push(px + Vector2::new(c.0, c.1), *p);
    }
    let s = manual_calibrate(&picks, &k).unwrap();
    for (i, r) in s.residuals.iter().enumerate() {
        println!("pick {i}: {r:.2} px {}", if *r < 2.0 { "ok" } else { "check" });
    }
    println!(
        "planar {}; e_r {:.3} deg, e_t {:.3} m",
        s.planar,
        rotation_error(&s.solution.pose, &truth).to_degrees(),
        translation_error(&s.solution.pose, &truth)
    );
}
