//! Writes a small synthetic dataset, loads it back and evaluates it per
//! subset.

use lcec::io::dataset::{Manifest, ManifestEntry, MANIFEST_FILE};
use lcec::io::synthetic::{write_synthetic_scene, SyntheticMaskProvider};
use lcec::io::{generate_synthetic, load_dataset, SceneSpec};
use lcec::masks::MaskProvider;
use lcec::pipeline::{evaluate_scenes, CalibConfig};

fn main() {
    let root = tempfile_dir();
    let mut manifest = Manifest::default();
    for i in 0..4u64 {
        let mut scene = generate_synthetic(&SceneSpec::random(i), i).unwrap();
        scene.pair.scene_id = format!("scene_{i:03}");
        write_synthetic_scene(&root, &scene).unwrap();
        manifest.scenes.push(ManifestEntry {
            id: scene.pair.scene_id.clone(),
            subset: Some(if i % 2 == 0 { "indoor" } else { "outdoor" }.into()),
        });
    }
    manifest.write(&root.join(MANIFEST_FILE)).unwrap();

    let dataset = load_dataset(&root).unwrap();
    let cfg = CalibConfig {
        max_iters: 1,
        ..CalibConfig::default()
    };
    let report = evaluate_scenes(
        &dataset.scenes,
        |s| SyntheticMaskProvider::from_dir(&root.join(&s.scene_id)).map(|p| Box::new(p) as Box<dyn MaskProvider>),
        &cfg,
    );
    print!("{}", report.to_table());
    std::fs::remove_dir_all(&root).ok();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("lcec-eval-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
