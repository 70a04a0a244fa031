//! Two-stage cross-modal mask matching between LIP and RGB masks.

mod affine;
mod cost;
mod locality;

pub use affine::{estimate_affine, Affine2D, ScaleRule};
pub use cost::{corner_cost, instance_cost, mutual_best_select, DEGENERATE_OFFSET};
pub use locality::ReferenceAffine;

use nalgebra::{DMatrix, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{MaskObservation, MaskSet, Modality};

pub const TAU_SPARSE: f64 = 0.12;
pub const TAU_CORNER: f64 = 0.25;
pub const TAU_DENSE: f64 = 0.35;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum C3mError {
    #[error("need at least one instance pair and two corner pairs, got {instances} and {corners}")]
    InsufficientMatches { instances: usize, corners: usize },
    #[error("no reliable instance pairs between LIP and RGB masks")]
    NoSparseMatches,
    #[error("invalid similarity: scale {scale}, angle {angle}")]
    InvalidAffine { scale: f64, angle: f64 },
    #[error("mask {id} not found in the {modality:?} set")]
    UnknownMask { id: u32, modality: Modality },
    #[error("corner index out of range in pair ({lip_mask_id}, {rgb_mask_id})")]
    CornerOutOfRange { lip_mask_id: u32, rgb_mask_id: u32 },
    #[error("empty {0:?} mask set")]
    EmptyMaskSet(Modality),
    #[error("thresholds must satisfy 0 < tau_sparse <= tau_dense, got {sparse} and {dense}")]
    InvalidThresholds { sparse: f64, dense: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C3mConfig {
    pub tau_sparse: f64,
    pub tau_corner: f64,
    pub tau_dense: f64,
    pub scale_rule: ScaleRule,
}

impl Default for C3mConfig {
    fn default() -> Self {
        Self {
            tau_sparse: TAU_SPARSE,
            tau_corner: TAU_CORNER,
            tau_dense: TAU_DENSE,
            scale_rule: ScaleRule::default(),
        }
    }
}

/// A matched instance and its one-to-one corner pairs, as
/// `(LIP corner index, RGB corner index)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub lip_mask_id: u32,
    pub rgb_mask_id: u32,
    pub corner_pairs: Vec<(usize, usize)>,
    pub instance_cost: f64,
}

/// One aggregated corner correspondence in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerMatch {
    pub lip_mask_id: u32,
    pub rgb_mask_id: u32,
    pub lip_corner: usize,
    pub rgb_corner: usize,
    pub lip_pixel: Vector2<f64>,
    pub rgb_pixel: Vector2<f64>,
}

/// 2D-3D correspondences handed to the PnP solver.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pixels: Vec<Vector2<f64>>,
    lidar_points: Vec<Vector3<f64>>,
}

impl CorrespondenceSet {
    /// `None` when the lengths differ.
    pub fn new(pixels: Vec<Vector2<f64>>, lidar_points: Vec<Vector3<f64>>) -> Option<Self> {
        (pixels.len() == lidar_points.len()).then_some(Self { pixels, lidar_points })
    }

    pub fn push(&mut self, pixel: Vector2<f64>, point: Vector3<f64>) {
        self.pixels.push(pixel);
        self.lidar_points.push(point);
    }

    pub fn pixels(&self) -> &[Vector2<f64>] {
        &self.pixels
    }

    pub fn lidar_points(&self) -> &[Vector3<f64>] {
        &self.lidar_points
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pixels: indices.iter().map(|&i| self.pixels[i]).collect(),
            lidar_points: indices.iter().map(|&i| self.lidar_points[i]).collect(),
        }
    }
}

/// Everything the matcher decided, for reports and the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C3mOutput {
    pub stage1: Vec<MatchPair>,
    pub affine: Affine2D,
    /// `false` when stage 1 had too few corner pairs and the identity was kept.
    pub affine_estimated: bool,
    pub stage2: Vec<MatchPair>,
    pub correspondences: Vec<CornerMatch>,
}

impl C3mOutput {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagnostics always serialize")
    }
}

/// Instance cost matrix, rows are LIP masks.
pub fn instance_cost_matrix(lip: &[MaskObservation], rgb: &[MaskObservation], warp: &Affine2D) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = lip
        .par_iter()
        .map(|a| rgb.iter().map(|b| instance_cost(a, b, warp)).collect())
        .collect();
    DMatrix::from_fn(lip.len(), rgb.len(), |i, j| rows[i][j])
}

pub fn corner_cost_matrix(lip: &MaskObservation, rgb: &MaskObservation, warp: &Affine2D) -> DMatrix<f64> {
    let (ov, oc) = (lip.center(), rgb.center());
    DMatrix::from_fn(lip.corners().len(), rgb.corners().len(), |r, s| {
        corner_cost(&lip.corners()[r], &ov, &rgb.corners()[s], &oc, warp)
    })
}

/// Instance matching at `tau_instance` followed by corner matching inside each
/// matched pair, all under `warp`.
pub fn match_stage(
    lip: &MaskSet,
    rgb: &MaskSet,
    warp: &Affine2D,
    tau_instance: f64,
    tau_corner: f64,
) -> Vec<MatchPair> {
    let cost = instance_cost_matrix(lip.masks(), rgb.masks(), warp);
    mutual_best_select(&cost, tau_instance)
        .into_par_iter()
        .map(|(i, j)| {
            let (a, b) = (&lip.masks()[i], &rgb.masks()[j]);
            MatchPair {
                lip_mask_id: a.id(),
                rgb_mask_id: b.id(),
                corner_pairs: mutual_best_select(&corner_cost_matrix(a, b, warp), tau_corner),
                instance_cost: cost[(i, j)],
            }
        })
        .collect()
}

/// Reliable sparse matching under the identity, similarity estimation, then
/// dense matching with the LIP masks warped by that similarity.
pub fn two_stage_match(lip: &MaskSet, rgb: &MaskSet, cfg: &C3mConfig) -> Result<C3mOutput, C3mError> {
    if lip.is_empty() {
        return Err(C3mError::EmptyMaskSet(Modality::Lip));
    }
    if rgb.is_empty() {
        return Err(C3mError::EmptyMaskSet(Modality::Rgb));
    }
    if !(cfg.tau_sparse > 0.0 && cfg.tau_sparse <= cfg.tau_dense) {
        return Err(C3mError::InvalidThresholds {
            sparse: cfg.tau_sparse,
            dense: cfg.tau_dense,
        });
    }
    let stage1 = match_stage(lip, rgb, &Affine2D::identity(), cfg.tau_sparse, cfg.tau_corner);
    if stage1.is_empty() {
        return Err(C3mError::NoSparseMatches);
    }
    let (affine, affine_estimated) = match estimate_affine(&stage1, lip, rgb, cfg.scale_rule) {
        Ok(a) => (a, true),
        Err(C3mError::InsufficientMatches { .. }) => (Affine2D::identity(), false),
        Err(e) => return Err(e),
    };
    let stage2 = dense_match(lip, rgb, &affine, cfg);
    let correspondences = aggregate(&stage1, &stage2, lip, rgb);
    Ok(C3mOutput {
        stage1,
        affine,
        affine_estimated,
        stage2,
        correspondences,
    })
}

/// Second stage alone, given a similarity.
pub fn dense_match(lip: &MaskSet, rgb: &MaskSet, affine: &Affine2D, cfg: &C3mConfig) -> Vec<MatchPair> {
    match_stage(lip, rgb, affine, cfg.tau_dense, cfg.tau_corner)
}

/// Stage-2 corner pairs, plus stage-1 pairs whose masks stage 2 left unused.
fn aggregate(stage1: &[MatchPair], stage2: &[MatchPair], lip: &MaskSet, rgb: &MaskSet) -> Vec<CornerMatch> {
    let used_lip: Vec<u32> = stage2.iter().map(|p| p.lip_mask_id).collect();
    let used_rgb: Vec<u32> = stage2.iter().map(|p| p.rgb_mask_id).collect();
    let extra = stage1
        .iter()
        .filter(|p| !used_lip.contains(&p.lip_mask_id) && !used_rgb.contains(&p.rgb_mask_id));
    stage2
        .iter()
        .chain(extra)
        .flat_map(|p| {
            let a = lip.get(p.lip_mask_id).expect("pair refers to a LIP mask");
            let b = rgb.get(p.rgb_mask_id).expect("pair refers to an RGB mask");
            p.corner_pairs.iter().map(move |&(r, s)| CornerMatch {
                lip_mask_id: p.lip_mask_id,
                rgb_mask_id: p.rgb_mask_id,
                lip_corner: r,
                rgb_corner: s,
                lip_pixel: a.corners()[r],
                rgb_pixel: b.corners()[s],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MaskSetConfig;

    fn polygon_mask(id: u32, c: Vector2<f64>, radii: &[f64], phase: f64, source: Modality) -> MaskObservation {
        let n = radii.len();
        let corners: Vec<_> = (0..n)
            .map(|k| {
                let a = phase + k as f64 * std::f64::consts::TAU / n as f64;
                c + Vector2::new(a.cos(), a.sin()) * radii[k]
            })
            .collect();
        let (lo, hi) = corners.iter().fold(
            (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY)),
            |(lo, hi), p| (lo.inf(p), hi.sup(p)),
        );
        let area = crate::masks::contour::signed_area(&corners).abs();
        MaskObservation::new(id, (lo + hi) / 2.0, ((hi - lo).x, (hi - lo).y), corners, area, source, 32).unwrap()
    }

    fn scene(source: Modality, shift: Vector2<f64>) -> MaskSet {
        let masks = vec![
            polygon_mask(0, Vector2::new(100.0, 100.0) + shift, &[40.0, 30.0, 40.0, 30.0], 0.1, source),
            polygon_mask(1, Vector2::new(300.0, 120.0) + shift, &[25.0; 6], 0.3, source),
            polygon_mask(2, Vector2::new(200.0, 300.0) + shift, &[60.0, 20.0, 60.0, 20.0], 0.0, source),
        ];
        MaskSet::new(masks, (640, 480), source, &MaskSetConfig::default()).unwrap()
    }

    #[test]
    fn identical_sets_match_themselves() {
        let lip = scene(Modality::Lip, Vector2::zeros());
        let rgb = scene(Modality::Rgb, Vector2::zeros());
        let out = two_stage_match(&lip, &rgb, &C3mConfig::default()).unwrap();
        assert!(out.affine_estimated);
        assert!((out.affine.scale() - 1.0).abs() < 1e-12);
        assert!(out.affine.angle().abs() < 1e-12);
        assert!(out.affine.translation().norm() < 1e-9);
        assert_eq!(out.stage2.len(), 3);
        for p in &out.stage2 {
            assert_eq!(p.lip_mask_id, p.rgb_mask_id);
            let n = lip.get(p.lip_mask_id).unwrap().corners().len();
            assert_eq!(p.corner_pairs, (0..n).map(|k| (k, k)).collect::<Vec<_>>());
        }
        assert_eq!(out.correspondences.len(), 14);
        let json = out.to_json();
        let back: C3mOutput = serde_json::from_str(&json).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn translation_is_propagated() {
        let lip = scene(Modality::Lip, Vector2::zeros());
        let rgb = scene(Modality::Rgb, Vector2::new(12.0, -6.0));
        let out = two_stage_match(&lip, &rgb, &C3mConfig::default()).unwrap();
        assert!((out.affine.translation() - Vector2::new(12.0, -6.0)).norm() < 1e-9);
        assert_eq!(out.stage2.len(), 3);
        assert!(out.stage2.iter().all(|p| p.lip_mask_id == p.rgb_mask_id));
    }

    #[test]
    fn tiny_versus_huge_has_no_sparse_matches() {
        let tiny: Vec<_> = (0..3)
            .map(|i| polygon_mask(i, Vector2::new(100.0 + 150.0 * i as f64, 100.0), &[8.0; 4], 0.0, Modality::Lip))
            .collect();
        let huge: Vec<_> = (0..2)
            .map(|i| polygon_mask(i, Vector2::new(160.0 + 320.0 * i as f64, 240.0), &[150.0; 4], 0.0, Modality::Rgb))
            .collect();
        let cfg = MaskSetConfig::default();
        let lip = MaskSet::new(tiny, (640, 480), Modality::Lip, &cfg).unwrap();
        let rgb = MaskSet::new(huge, (640, 480), Modality::Rgb, &cfg).unwrap();
        assert_eq!(two_stage_match(&lip, &rgb, &C3mConfig::default()), Err(C3mError::NoSparseMatches));
    }

    #[test]
    fn rejects_bad_inputs() {
        let lip = scene(Modality::Lip, Vector2::zeros());
        let empty = MaskSet::empty((640, 480), Modality::Rgb);
        assert_eq!(
            two_stage_match(&lip, &empty, &C3mConfig::default()),
            Err(C3mError::EmptyMaskSet(Modality::Rgb))
        );
        let rgb = scene(Modality::Rgb, Vector2::zeros());
        let cfg = C3mConfig { tau_sparse: 0.5, tau_dense: 0.2, ..Default::default() };
        assert!(matches!(two_stage_match(&lip, &rgb, &cfg), Err(C3mError::InvalidThresholds { .. })));
    }

    #[test]
    fn correspondence_set_lengths() {
        assert!(CorrespondenceSet::new(vec![Vector2::zeros()], vec![]).is_none());
        let mut c = CorrespondenceSet::default();
        c.push(Vector2::new(1.0, 2.0), Vector3::new(1.0, 2.0, 3.0));
        c.push(Vector2::new(3.0, 4.0), Vector3::new(4.0, 5.0, 6.0));
        assert_eq!(c.subset(&[1]).pixels(), &[Vector2::new(3.0, 4.0)]);
    }
}
