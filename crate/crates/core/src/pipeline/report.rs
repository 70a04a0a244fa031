use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CalibrationResult, IterationRecord, MatchCounts, Termination};
use crate::c3m::C3mOutput;
use crate::geometry::{extrinsic_euler, rotation_error, translation_error, RigidTransform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EulerDegrees {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub epsilon: f64,
    pub inlier_epsilon: f64,
    pub retained: bool,
    pub counts: MatchCounts,
    /// Row-major 4×4.
    pub pose: [f64; 16],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rotation_error_deg: f64,
    pub translation_error_m: f64,
}

/// The document written for a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Row-major 4×4 `T_C_L`.
    pub extrinsic: [f64; 16],
    /// Camera attitude in LiDAR axes, intrinsic Z-Y-X.
    pub euler_deg: EulerDegrees,
    pub translation: [f64; 3],
    pub final_epsilon: f64,
    pub iterations_run: usize,
    pub terminated_by: Termination,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
    pub iterations: Vec<IterationRow>,
    pub diagnostics: C3mOutput,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Metrics>,
}

fn row(r: &IterationRecord, retained: bool) -> IterationRow {
    IterationRow {
        iteration: r.iteration,
        epsilon: r.epsilon,
        inlier_epsilon: r.inlier_epsilon,
        retained,
        counts: r.counts,
        pose: r.pose.to_row_major(),
    }
}

impl CalibrationReport {
    pub fn new(result: &CalibrationResult) -> Self {
        let e = extrinsic_euler(&result.final_pose);
        let t = result.final_pose.translation();
        let mut iterations: Vec<IterationRow> = result.per_iteration.iter().map(|r| row(r, true)).collect();
        iterations.extend(result.rejected.iter().map(|r| row(r, false)));
        Self {
            extrinsic: result.final_pose.to_row_major(),
            euler_deg: EulerDegrees {
                yaw: e.yaw.to_degrees(),
                pitch: e.pitch.to_degrees(),
                roll: e.roll.to_degrees(),
            },
            translation: [t.x, t.y, t.z],
            final_epsilon: result.final_epsilon,
            iterations_run: result.iterations_run,
            terminated_by: result.terminated_by,
            failure: result.failure.clone(),
            iterations,
            diagnostics: result.last().matches.clone(),
            metrics: None,
        }
    }

    pub fn with_truth(mut self, estimated: &RigidTransform, truth: &RigidTransform) -> Self {
        self.metrics = Some(Metrics {
            rotation_error_deg: rotation_error(estimated, truth).to_degrees(),
            translation_error_m: translation_error(estimated, truth),
        });
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("extrinsic (row-major):\n");
        for r in self.extrinsic.chunks(4) {
            let _ = writeln!(s, "  {:>12.6} {:>12.6} {:>12.6} {:>12.6}", r[0], r[1], r[2], r[3]);
        }
        let e = &self.euler_deg;
        let _ = writeln!(s, "euler (deg): yaw {:.4} pitch {:.4} roll {:.4}", e.yaw, e.pitch, e.roll);
        let t = self.translation;
        let _ = writeln!(s, "translation (m): {:.4} {:.4} {:.4}", t[0], t[1], t[2]);
        let _ = writeln!(s, "iter  epsilon(px)  inlier eps  stage1  stage2  corr  inliers  kept");
        for r in &self.iterations {
            let c = &r.counts;
            let _ = writeln!(
                s,
                "{:>4}  {:>11.4}  {:>10.4}  {:>6}  {:>6}  {:>4}  {:>7}  {}",
                r.iteration,
                r.epsilon,
                r.inlier_epsilon,
                c.stage1_pairs,
                c.stage2_pairs,
                c.correspondences,
                c.inliers,
                if r.retained { "yes" } else { "no" }
            );
        }
        let _ = writeln!(s, "terminated by: {:?}", self.terminated_by);
        if let Some(f) = &self.failure {
            let _ = writeln!(s, "failure: {f}");
        }
        if let Some(m) = self.metrics {
            let _ = writeln!(s, "e_r = {:.4} deg, e_t = {:.4} m", m.rotation_error_deg, m.translation_error_m);
        }
        s
    }
}
