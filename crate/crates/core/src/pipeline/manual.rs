use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::c3m::CorrespondenceSet;
use crate::geometry::{canonical_virtual_pose, Frame, Intrinsics, RigidTransform};
use crate::pnp::{dlt_pose, refine, reprojection_error, residual, solve_pnp_ransac, PnpConfig, PnpError, PnpSolution, SAMPLE_SIZE};

/// Picks whose smallest-to-largest covariance eigenvalue ratio falls below
/// this are treated as lying on one plane.
pub const PLANAR_RATIO: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualConfig {
    pub pnp: PnpConfig,
    /// Starting pose when the picks do not support a linear solution.
    pub init: Option<RigidTransform>,
}

impl Default for ManualConfig {
    fn default() -> Self {
        Self {
            pnp: PnpConfig {
                inlier_px: 5.0,
                min_inliers: SAMPLE_SIZE,
                ..PnpConfig::default()
            },
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualSolution {
    pub solution: PnpSolution,
    /// Pixel distance per pick under the solved pose; infinite behind the camera.
    pub residuals: Vec<f64>,
    pub planar: bool,
}

pub fn manual_calibrate(picks: &CorrespondenceSet, k: &Intrinsics) -> Result<ManualSolution, PnpError> {
    manual_calibrate_with(picks, k, &ManualConfig::default())
}

pub fn manual_calibrate_with(
    picks: &CorrespondenceSet,
    k: &Intrinsics,
    cfg: &ManualConfig,
) -> Result<ManualSolution, PnpError> {
    if picks.len() < SAMPLE_SIZE {
        return Err(PnpError::TooFewCorrespondences {
            got: picks.len(),
            need: SAMPLE_SIZE,
        });
    }
    let planar = is_planar(picks.lidar_points());
    let all: Vec<usize> = (0..picks.len()).collect();
    let fallback = || {
        cfg.init
            .clone()
            .unwrap_or_else(canonical_virtual_pose)
            .relabel(Frame::Lidar, Frame::Camera)
    };
    let init = if planar {
        fallback()
    } else {
        dlt_pose(picks, &all, k).unwrap_or_else(fallback)
    };
    let solution = best_of(full_fit(picks, k, &init, &cfg.pnp), solve_pnp_ransac(picks, k, &init, &cfg.pnp))?;
    let residuals = picks
        .lidar_points()
        .iter()
        .zip(picks.pixels())
        .map(|(p, q)| residual(&solution.pose, p, q, k).map_or(f64::INFINITY, |r| r.norm()))
        .collect();
    Ok(ManualSolution {
        solution,
        residuals,
        planar,
    })
}

/// Refinement over every pick, scored like a RANSAC hypothesis.
fn full_fit(picks: &CorrespondenceSet, k: &Intrinsics, init: &RigidTransform, cfg: &PnpConfig) -> Option<PnpSolution> {
    let all: Vec<usize> = (0..picks.len()).collect();
    let (pose, _, steps) = refine(init, picks, &all, k, cfg);
    let inlier_mask: Vec<bool> = picks
        .lidar_points()
        .iter()
        .zip(picks.pixels())
        .map(|(p, q)| residual(&pose, p, q, k).is_some_and(|r| r.norm() <= cfg.inlier_px))
        .collect();
    let idx: Vec<usize> = (0..picks.len()).filter(|&i| inlier_mask[i]).collect();
    if idx.len() < cfg.min_inliers {
        return None;
    }
    Some(PnpSolution {
        mean_reproj_error: reprojection_error(&pose, &picks.subset(&idx), k, cfg.behind_penalty),
        pose,
        inlier_mask,
        iterations_used: steps,
    })
}

/// More inliers wins, then lower error.
fn best_of(full: Option<PnpSolution>, ransac: Result<PnpSolution, PnpError>) -> Result<PnpSolution, PnpError> {
    match (full, ransac) {
        (Some(f), Ok(r)) => {
            let better = (f.inlier_count(), -f.mean_reproj_error) > (r.inlier_count(), -r.mean_reproj_error);
            Ok(if better { f } else { r })
        }
        (Some(f), Err(_)) => Ok(f),
        (None, r) => r,
    }
}

/// Near-zero smallest eigenvalue of the point covariance relative to the largest.
pub fn is_planar(points: &[Vector3<f64>]) -> bool {
    if points.len() < 4 {
        return true;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / points.len() as f64;
    let ev = SymmetricEigen::new(cov).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    hi <= 0.0 || lo / hi < PLANAR_RATIO
}
