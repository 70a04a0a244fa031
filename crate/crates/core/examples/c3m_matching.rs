//! Two-stage cross-modal mask matching on a synthetic scene whose LIP was
//! rendered from a perturbed virtual camera.

use lcec::c3m::{two_stage_match, C3mConfig};
use lcec::geometry::Frame;
use lcec::io::{generate_synthetic, SceneSpec};
use lcec::lip::{fill_and_enhance, render_lip};
use lcec::masks::{MaskProvider, MaskRequest, Modality};
use lcec::pnp::perturb;
use nalgebra::Vector6;

fn main() {
    let scene = generate_synthetic(&SceneSpec::random(4), 4).unwrap();
    let truth = scene.pair.truth_extrinsics.clone().unwrap();
    let pose = perturb(&truth, &Vector6::new(0.02, -0.01, 0.015, 0.05, 0.0, -0.05)).relabel(Frame::Lidar, Frame::Virtual);
    let lip = render_lip(&scene.pair.cloud, &pose, &scene.pair.intrinsics).unwrap();
    let gray = image::DynamicImage::ImageLuma8(fill_and_enhance(&lip).to_gray_image());
    let provider = scene.mask_provider();
    let lip_masks = provider
        .provide_masks(&MaskRequest {
            source: Modality::Lip,
            image: &gray,
            lip: Some(&lip),
        })
        .unwrap();
    let out = two_stage_match(&lip_masks, &scene.rgb_masks, &C3mConfig::default()).unwrap();
    println!("{} LIP masks, {} RGB masks", lip_masks.len(), scene.rgb_masks.len());
    println!("stage 1: {} pairs", out.stage1.len());
    let a = &out.affine;
    println!(
        "similarity: scale {:.4} angle {:.3} deg t ({:.2}, {:.2})",
        a.scale(),
        a.angle().to_degrees(),
        a.translation().x,
        a.translation().y
    );
    println!("stage 2: {} pairs, {} corner correspondences", out.stage2.len(), out.correspondences.len());
    for p in &out.stage2 {
        println!(
            "  LIP {} -> RGB {} cost {:.3} corners {}",
            p.lip_mask_id,
            p.rgb_mask_id,
            p.instance_cost,
            p.corner_pairs.len()
        );
    }
}
