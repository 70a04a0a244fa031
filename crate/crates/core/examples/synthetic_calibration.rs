//! Full pipeline on a synthetic scene with truth masks.
//!
//! cargo run --release --example synthetic_calibration -- [seed]

use lcec::io::{generate_synthetic, SceneSpec};
use lcec::pipeline::{calibrate, CalibConfig};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scene = generate_synthetic(&SceneSpec::random(seed), seed).unwrap();
    let truth = scene.pair.truth_extrinsics.clone().unwrap();
    let result = calibrate(
        &scene.pair.cloud,
        &scene.pair.image,
        &scene.pair.intrinsics,
        &scene.mask_provider(),
        &CalibConfig::default(),
    )
    .unwrap();
    print!("{}", result.report().with_truth(&result.final_pose, &truth).to_text());
}
