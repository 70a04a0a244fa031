//! Renders a LiDAR intensity projection of a synthetic scene and writes it
//! with its index map.
//!
//! cargo run --example render_lip -- [out_dir]

use lcec::geometry::Frame;
use lcec::io::{generate_synthetic, SceneSpec};
use lcec::lip::{fill_and_enhance, render_lip};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string());
    let scene = generate_synthetic(&SceneSpec::random(1), 1).unwrap();
    let pose = scene.pair.truth_extrinsics.unwrap().relabel(Frame::Lidar, Frame::Virtual);
    let lip = render_lip(&scene.pair.cloud, &pose, &scene.pair.intrinsics).unwrap();
    let filled = fill_and_enhance(&lip);
    println!(
        "{} points, {} pixels set, {} valid after filling",
        scene.pair.cloud.len(),
        lip.set_pixel_count(),
        (0..filled.height())
            .flat_map(|y| (0..filled.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| filled.is_valid(x, y))
            .count()
    );
    let dir = std::path::Path::new(&out);
    filled
        .write_debug(&dir.join("lip.png"), &dir.join("lip_index.bin"))
        .unwrap();
    println!("wrote {}", dir.join("lip.png").display());
}
