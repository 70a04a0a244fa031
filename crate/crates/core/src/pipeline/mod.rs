//! The coarse-to-fine loop: render a LIP from the current virtual camera,
//! segment, match, solve PnP, move the virtual camera to the estimate, repeat
//! until the reprojection error stops improving.

mod evaluate;
mod manual;
mod report;

pub use evaluate::{evaluate_scenes, EvaluationReport, SceneOutcome, SubsetSummary, ALL_SUBSET};
pub use manual::{manual_calibrate, manual_calibrate_with, ManualConfig, ManualSolution, PLANAR_RATIO};
pub use report::{CalibrationReport, IterationRow};

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::c3m::{two_stage_match, C3mConfig, C3mError, C3mOutput, CorrespondenceSet};
use crate::geometry::{canonical_virtual_pose, project_point, Frame, Intrinsics, LidarPoint, RigidTransform};
use crate::lip::{fill_and_enhance, render_lip, LipError, LipImage};
use crate::masks::{anchor_to_lip, MaskError, MaskProvider, MaskRequest, MaskSet, MaskSetConfig, Modality, SNAP_RADIUS};
use crate::pnp::{reprojection_error, solve_pnp_ransac, PnpConfig, PnpError, PnpSolution};

pub const DEFAULT_MAX_ITERS: usize = 6;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("LIP rendering: {0}")]
    Lip(#[from] LipError),
    #[error("mask provider: {0}")]
    Masks(#[from] MaskError),
    #[error("matching: {0}")]
    Matching(#[from] C3mError),
    #[error("pose: {0}")]
    Pnp(#[from] PnpError),
}

impl StageError {
    /// Name of the underlying error variant, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Lip(LipError::EmptyCloud) => "EmptyCloud",
            Self::Lip(LipError::EmptyFrustum { .. }) => "EmptyFrustum",
            Self::Lip(_) => "LipError",
            Self::Masks(e) => e.kind(),
            Self::Matching(C3mError::NoSparseMatches) => "NoSparseMatches",
            Self::Matching(C3mError::EmptyMaskSet(_)) => "EmptyMaskSet",
            Self::Matching(C3mError::InsufficientMatches { .. }) => "InsufficientMatches",
            Self::Matching(_) => "MatchingError",
            Self::Pnp(PnpError::NoConsensus { .. }) => "NoConsensus",
            Self::Pnp(PnpError::TooFewCorrespondences { .. }) => "TooFewCorrespondences",
            Self::Pnp(PnpError::BadSample(_)) => "BadSample",
        }
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("calibration failed in iteration {iteration}: {source}")]
    CalibrationFailed { iteration: usize, source: StageError },
}

impl CalibrationError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidInput(_) => "InvalidInput",
            Self::CalibrationFailed { source, .. } => source.kind(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub max_iters: usize,
    /// Virtual camera pose for the first iteration; the canonical pose when unset.
    pub initial_pose: Option<RigidTransform>,
    pub c3m: C3mConfig,
    pub pnp: PnpConfig,
    pub masks: MaskSetConfig,
    pub snap_radius: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            initial_pose: None,
            c3m: C3mConfig::default(),
            pnp: PnpConfig::default(),
            masks: MaskSetConfig::default(),
            snap_radius: SNAP_RADIUS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    EpsilonIncrease,
    MaxIters,
    Failure,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub lip_masks: usize,
    pub rgb_masks: usize,
    pub stage1_pairs: usize,
    pub stage2_pairs: usize,
    pub correspondences: usize,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub virtual_pose: RigidTransform,
    /// `T̂_k`, Lidar → Camera.
    pub pose: RigidTransform,
    /// Mean reprojection error over every correspondence of this iteration.
    pub epsilon: f64,
    /// Mean reprojection error over the PnP inliers.
    pub inlier_epsilon: f64,
    pub counts: MatchCounts,
    pub matches: C3mOutput,
    pub correspondences: CorrespondenceSet,
    /// Cloud index behind each correspondence.
    pub point_indices: Vec<u32>,
    pub solution: PnpSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub final_pose: RigidTransform,
    pub final_epsilon: f64,
    /// Retained iterates; ε strictly decreases along this list.
    pub per_iteration: Vec<IterationRecord>,
    /// The iterate that stopped the loop by not improving ε.
    pub rejected: Option<IterationRecord>,
    pub iterations_run: usize,
    pub terminated_by: Termination,
    pub failure: Option<String>,
}

impl CalibrationResult {
    pub fn last(&self) -> &IterationRecord {
        self.per_iteration.last().expect("a result holds at least one iterate")
    }

    pub fn report(&self) -> CalibrationReport {
        CalibrationReport::new(self)
    }
}

fn fail(iteration: usize, e: impl Into<StageError>) -> CalibrationError {
    CalibrationError::CalibrationFailed {
        iteration,
        source: e.into(),
    }
}

/// Runs the loop for at most `cfg.max_iters` iterations.
///
/// Provider errors abort in any iteration. Matching or pose failures abort in
/// the first iteration and otherwise end the loop with the best iterate.
pub fn calibrate(
    cloud: &[LidarPoint],
    rgb_image: &RgbImage,
    k: &Intrinsics,
    provider: &dyn MaskProvider,
    cfg: &CalibConfig,
) -> Result<CalibrationResult, CalibrationError> {
    k.validate().map_err(|e| CalibrationError::InvalidInput(e.to_string()))?;
    if cloud.is_empty() {
        return Err(CalibrationError::InvalidInput("point cloud is empty".into()));
    }
    if rgb_image.width() != k.width || rgb_image.height() != k.height {
        return Err(CalibrationError::InvalidInput(format!(
            "image is {}x{} but intrinsics are {}x{}",
            rgb_image.width(),
            rgb_image.height(),
            k.width,
            k.height
        )));
    }
    if cfg.max_iters == 0 {
        return Err(CalibrationError::InvalidInput("max_iters must be at least 1".into()));
    }

    let image = DynamicImage::ImageRgb8(rgb_image.clone());
    let rgb = provider
        .provide_masks(&MaskRequest {
            source: Modality::Rgb,
            image: &image,
            lip: None,
        })
        .map_err(|e| fail(1, e))?;

    let mut virtual_pose = cfg
        .initial_pose
        .clone()
        .unwrap_or_else(canonical_virtual_pose)
        .relabel(Frame::Lidar, Frame::Virtual);
    let mut retained: Vec<IterationRecord> = Vec::new();
    let mut rejected = None;
    let mut failure = None;
    let mut terminated_by = Termination::MaxIters;

    for iteration in 1..=cfg.max_iters {
        let record = match iterate(iteration, cloud, k, &virtual_pose, &rgb, provider, cfg) {
            Ok(r) => r,
            Err(e @ StageError::Masks(_)) => return Err(fail(iteration, e)),
            Err(e) if retained.is_empty() => return Err(fail(iteration, e)),
            Err(e) => {
                log::warn!("iteration {iteration} failed: {e}");
                failure = Some(e.to_string());
                terminated_by = Termination::Failure;
                break;
            }
        };
        if retained.last().is_some_and(|prev| record.epsilon >= prev.epsilon) {
            rejected = Some(record);
            terminated_by = Termination::EpsilonIncrease;
            break;
        }
        virtual_pose = record.pose.relabel(Frame::Lidar, Frame::Virtual);
        retained.push(record);
    }

    let last = retained.last().expect("first iteration either succeeds or returns");
    Ok(CalibrationResult {
        final_pose: last.pose.clone(),
        final_epsilon: last.epsilon,
        iterations_run: retained.len(),
        per_iteration: retained,
        rejected,
        terminated_by,
        failure,
    })
}

fn lip_masks(lip: &LipImage, provider: &dyn MaskProvider) -> Result<MaskSet, MaskError> {
    let shown = DynamicImage::ImageLuma8(fill_and_enhance(lip).to_gray_image());
    provider.provide_masks(&MaskRequest {
        source: Modality::Lip,
        image: &shown,
        lip: Some(lip),
    })
}

fn iterate(
    iteration: usize,
    cloud: &[LidarPoint],
    k: &Intrinsics,
    virtual_pose: &RigidTransform,
    rgb: &MaskSet,
    provider: &dyn MaskProvider,
    cfg: &CalibConfig,
) -> Result<IterationRecord, StageError> {
    let lip = render_lip(cloud, virtual_pose, k)?;
    let masks = lip_masks(&lip, provider)?;
    if masks.source() != Modality::Lip {
        return Err(MaskError::SourceMismatch {
            expected: Modality::Lip,
            found: masks.source(),
        }
        .into());
    }
    let anchored = anchor_to_lip(&masks, &lip, cfg.snap_radius);
    let matches = two_stage_match(&anchored.masks, rgb, &cfg.c3m)?;

    let mut correspondences = CorrespondenceSet::default();
    let mut point_indices = Vec::new();
    for m in &matches.correspondences {
        // every anchored corner has a point
        let idx = anchored
            .corner_point(m.lip_mask_id, m.lip_corner)
            .expect("anchored corner");
        correspondences.push(m.rgb_pixel, cloud[idx as usize].position);
        point_indices.push(idx);
    }

    let init = virtual_pose.relabel(Frame::Lidar, Frame::Camera);
    let pnp = PnpConfig {
        seed: cfg.pnp.seed.wrapping_add(iteration as u64 - 1),
        ..cfg.pnp
    };
    let solution = gate_to_image(solve_pnp_ransac(&correspondences, k, &init, &pnp)?, &correspondences, k, &pnp)?;
    let counts = MatchCounts {
        lip_masks: anchored.masks.len(),
        rgb_masks: rgb.len(),
        stage1_pairs: matches.stage1.len(),
        stage2_pairs: matches.stage2.len(),
        correspondences: correspondences.len(),
        inliers: solution.inlier_count(),
    };
    Ok(IterationRecord {
        iteration,
        virtual_pose: virtual_pose.clone(),
        pose: solution.pose.clone(),
        epsilon: reprojection_error(&solution.pose, &correspondences, k, pnp.behind_penalty),
        inlier_epsilon: solution.mean_reproj_error,
        counts,
        matches,
        correspondences,
        point_indices,
        solution,
    })
}

/// Drops inliers whose LiDAR point leaves the image under the solved pose
/// and recomputes ε on what remains.
fn gate_to_image(
    mut sol: PnpSolution,
    corr: &CorrespondenceSet,
    k: &Intrinsics,
    cfg: &PnpConfig,
) -> Result<PnpSolution, PnpError> {
    let mut changed = false;
    for (i, keep) in sol.inlier_mask.iter_mut().enumerate() {
        let inside = project_point(&sol.pose.transform_point(&corr.lidar_points()[i]), k).is_ok_and(|p| k.contains(&p));
        if *keep && !inside {
            *keep = false;
            changed = true;
        }
    }
    if changed {
        let idx = sol.inlier_indices();
        let required = cfg.min_inliers.max(4);
        if idx.len() < required {
            return Err(PnpError::NoConsensus {
                best: idx.len(),
                required,
            });
        }
        sol.mean_reproj_error = reprojection_error(&sol.pose, &corr.subset(&idx), k, cfg.behind_penalty);
    }
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_error, translation_error};
    use crate::io::synthetic::{generate_synthetic, perturbed_extrinsic, SceneSpec};
    use crate::masks::StaticMaskProvider;
    use nalgebra::Vector3;

    fn scene(seed: u64, axis: Vector3<f64>, deg: f64, center: Vector3<f64>) -> crate::io::SyntheticScene {
        let mut spec = SceneSpec::random(seed);
        spec.truth = perturbed_extrinsic(&axis, deg.to_radians(), &center);
        generate_synthetic(&spec, seed).unwrap()
    }

    fn run(s: &crate::io::SyntheticScene, cfg: &CalibConfig) -> Result<CalibrationResult, CalibrationError> {
        calibrate(&s.pair.cloud, &s.pair.image, &s.pair.intrinsics, &s.mask_provider(), cfg)
    }

    #[test]
    fn zero_perturbation_is_a_fixed_point() {
        let s = scene(3, Vector3::z(), 0.0, Vector3::zeros());
        let r = run(&s, &CalibConfig::default()).unwrap();
        let truth = s.pair.truth_extrinsics.as_ref().unwrap();
        let first = &r.per_iteration[0];
        assert!(rotation_error(&first.pose, truth).to_degrees() <= 0.5);
        assert!(translation_error(&first.pose, truth) <= 0.05);
        assert!(r.iterations_run <= 2, "{:?}", r.terminated_by);
    }

    #[test]
    fn perturbed_scene_converges() {
        let s = scene(11, Vector3::new(0.3, -1.0, 0.5), 5.0, Vector3::new(0.1, 0.2, -0.2));
        let r = run(&s, &CalibConfig::default()).unwrap();
        let truth = s.pair.truth_extrinsics.as_ref().unwrap();
        assert!(rotation_error(&r.final_pose, truth).to_degrees() <= 0.5);
        assert!(translation_error(&r.final_pose, truth) <= 0.05);
        assert!(r.per_iteration.windows(2).all(|w| w[1].epsilon < w[0].epsilon));
        assert_eq!(r.final_pose, r.per_iteration[r.iterations_run - 1].pose);
    }

    #[test]
    fn calibration_is_idempotent() {
        let s = scene(5, Vector3::x(), 4.0, Vector3::new(0.0, 0.1, 0.0));
        let cfg = CalibConfig::default();
        assert_eq!(run(&s, &cfg).unwrap(), run(&s, &cfg).unwrap());
    }

    #[test]
    fn used_points_project_inside_the_image() {
        let s = scene(8, Vector3::y(), 8.0, Vector3::new(0.2, -0.3, 0.1));
        let r = run(&s, &CalibConfig::default()).unwrap();
        let k = &s.pair.intrinsics;
        for rec in &r.per_iteration {
            for i in rec.solution.inlier_indices() {
                let p = r.final_pose.transform_point(&rec.correspondences.lidar_points()[i]);
                assert!(project_point(&p, k).is_ok_and(|px| k.contains(&px)));
            }
        }
    }

    #[test]
    fn no_masks_fail_the_first_iteration() {
        let s = scene(2, Vector3::z(), 0.0, Vector3::zeros());
        let k = s.pair.intrinsics;
        let empty = StaticMaskProvider {
            rgb: s.rgb_masks.clone(),
            lip: Some(MaskSet::empty((k.width, k.height), Modality::Lip)),
        };
        let err = calibrate(&s.pair.cloud, &s.pair.image, &k, &empty, &CalibConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::CalibrationFailed {
                iteration: 1,
                source: StageError::Matching(C3mError::EmptyMaskSet(Modality::Lip))
            }
        ));
    }

    #[test]
    fn cloud_outside_the_frustum() {
        let s = scene(2, Vector3::z(), 0.0, Vector3::zeros());
        let behind: Vec<LidarPoint> = s
            .pair
            .cloud
            .iter()
            .map(|p| LidarPoint::new(-p.position, p.intensity))
            .collect();
        let err = calibrate(&behind, &s.pair.image, &s.pair.intrinsics, &s.mask_provider(), &CalibConfig::default())
            .unwrap_err();
        assert!(matches!(
            err,
            CalibrationError::CalibrationFailed {
                iteration: 1,
                source: StageError::Lip(LipError::EmptyFrustum { .. })
            }
        ));
    }

    #[test]
    fn bad_inputs() {
        let s = scene(2, Vector3::z(), 0.0, Vector3::zeros());
        let p = s.mask_provider();
        let k = s.pair.intrinsics;
        let cfg = CalibConfig::default();
        assert!(matches!(
            calibrate(&[], &s.pair.image, &k, &p, &cfg),
            Err(CalibrationError::InvalidInput(_))
        ));
        let small = RgbImage::new(10, 10);
        assert!(matches!(
            calibrate(&s.pair.cloud, &small, &k, &p, &cfg),
            Err(CalibrationError::InvalidInput(_))
        ));
    }
}
