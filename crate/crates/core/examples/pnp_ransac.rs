//! Robust pose from 2D-3D correspondences with 30% gross outliers.

use lcec::c3m::CorrespondenceSet;
use lcec::geometry::{canonical_virtual_pose, project_point, rotation_error, translation_error, Frame, Intrinsics};
use lcec::io::synthetic::perturbed_extrinsic;
use lcec::pnp::{solve_pnp_ransac, PnpConfig};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};

fn main() {
    let k = Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).unwrap();
    let truth = perturbed_extrinsic(&Vector3::new(0.3, -1.0, 0.5), 7f64.to_radians(), &Vector3::new(0.2, 0.1, -0.1));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let inv = truth.inverse();
    let mut corr = CorrespondenceSet::default();
    for i in 0..60 {
        let px = Vector2::new(rng.random_range(20.0..620.0), rng.random_range(20.0..460.0));
        let p = inv.transform_point(&k.unproject(&px, rng.random_range(4.0..12.0)));
        let seen = if i % 10 < 3 {
            Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))
        } else {
            project_point(&truth.transform_point(&p), &k).unwrap()
        };
        corr.push(seen, p);
    }
    let init = canonical_virtual_pose().relabel(Frame::Lidar, Frame::Camera);
    let sol = solve_pnp_ransac(&corr, &k, &init, &PnpConfig::default()).unwrap();
    println!(
        "{} of {} inliers, mean error {:.2e} px",
        sol.inlier_count(),
        corr.len(),
        sol.mean_reproj_error
    );
    println!(
        "e_r {:.2e} deg, e_t {:.2e} m",
        rotation_error(&sol.pose, &truth).to_degrees(),
        translation_error(&sol.pose, &truth)
    );
}
