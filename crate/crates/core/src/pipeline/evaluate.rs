use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{calibrate, CalibConfig};
use crate::geometry::{rotation_error, translation_error};
use crate::io::ScenePair;
use crate::masks::{MaskError, MaskProvider};

pub const ALL_SUBSET: &str = "All";
const UNTAGGED: &str = "untagged";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub subset: String,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_m: Option<f64>,
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

impl SceneOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

impl Stats {
    fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub subset: String,
    pub scenes: usize,
    pub failures: usize,
    pub rotation_error_deg: Option<Stats>,
    pub translation_error_m: Option<Stats>,
}

impl SubsetSummary {
    fn of(subset: &str, outcomes: &[&SceneOutcome]) -> Self {
        let ok: Vec<&&SceneOutcome> = outcomes.iter().filter(|o| o.succeeded()).collect();
        let er: Vec<f64> = ok.iter().filter_map(|o| o.rotation_error_deg).collect();
        let et: Vec<f64> = ok.iter().filter_map(|o| o.translation_error_m).collect();
        Self {
            subset: subset.to_string(),
            scenes: outcomes.len(),
            failures: outcomes.len() - ok.len(),
            rotation_error_deg: Stats::of(&er),
            translation_error_m: Stats::of(&et),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub outcomes: Vec<SceneOutcome>,
    pub subsets: Vec<SubsetSummary>,
    pub aggregate: SubsetSummary,
}

impl EvaluationReport {
    pub fn from_outcomes(outcomes: Vec<SceneOutcome>) -> Self {
        let mut groups: BTreeMap<&str, Vec<&SceneOutcome>> = BTreeMap::new();
        for o in &outcomes {
            groups.entry(o.subset.as_str()).or_default().push(o);
        }
        let subsets = groups.iter().map(|(s, v)| SubsetSummary::of(s, v)).collect();
        let aggregate = SubsetSummary::of(ALL_SUBSET, &outcomes.iter().collect::<Vec<_>>());
        Self {
            outcomes,
            subsets,
            aggregate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }

    pub fn failures(&self) -> impl Iterator<Item = &SceneOutcome> {
        self.outcomes.iter().filter(|o| !o.succeeded())
    }

    /// Per-scene rows, then mean/max/min of e_r and e_t per subset and overall.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:<14} {:>10} {:>10} {:>10}", "scene", "subset", "e_r(deg)", "e_t(m)", "eps(px)");
        for o in &self.outcomes {
            match &o.error {
                None => {
                    let _ = writeln!(
                        s,
                        "{:<24} {:<14} {:>10.4} {:>10.4} {:>10.4}",
                        o.scene_id,
                        o.subset,
                        o.rotation_error_deg.unwrap_or(f64::NAN),
                        o.translation_error_m.unwrap_or(f64::NAN),
                        o.epsilon.unwrap_or(f64::NAN)
                    );
                }
                Some(e) => {
                    let _ = writeln!(s, "{:<24} {:<14} FAILED: {e}", o.scene_id, o.subset);
                }
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "subset", "n", "failed", "e_r mean", "e_r max", "e_r min", "e_t mean", "e_t max", "e_t min"
        );
        for sub in self.subsets.iter().chain(std::iter::once(&self.aggregate)) {
            let f = |x: Option<Stats>| x.map_or([f64::NAN; 3], |s| [s.mean, s.max, s.min]);
            let (r, t) = (f(sub.rotation_error_deg), f(sub.translation_error_m));
            let _ = writeln!(
                s,
                "{:<14} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                sub.subset, sub.scenes, sub.failures, r[0], r[1], r[2], t[0], t[1], t[2]
            );
        }
        s
    }
}

/// Calibrates every scene with the provider `provider_for` builds for it.
/// Scenes without ground truth or whose calibration fails are reported as
/// failures and left out of the statistics.
pub fn evaluate_scenes<F>(scenes: &[ScenePair], provider_for: F, cfg: &CalibConfig) -> EvaluationReport
where
    F: Fn(&ScenePair) -> Result<Box<dyn MaskProvider>, MaskError> + Sync,
{
    let outcomes = scenes
        .par_iter()
        .map(|scene| {
            let mut out = SceneOutcome {
                scene_id: scene.scene_id.clone(),
                subset: scene.subset.clone().unwrap_or_else(|| UNTAGGED.into()),
                rotation_error_deg: None,
                translation_error_m: None,
                epsilon: None,
                iterations: None,
                error: None,
            };
            let Some(truth) = &scene.truth_extrinsics else {
                out.error = Some("no ground-truth extrinsics".into());
                return out;
            };
            let result = provider_for(scene)
                .map_err(|e| e.to_string())
                .and_then(|p| {
                    calibrate(&scene.cloud, &scene.image, &scene.intrinsics, p.as_ref(), cfg).map_err(|e| e.to_string())
                });
            match result {
                Ok(r) => {
                    out.rotation_error_deg = Some(rotation_error(&r.final_pose, truth).to_degrees());
                    out.translation_error_m = Some(translation_error(&r.final_pose, truth));
                    out.epsilon = Some(r.final_epsilon);
                    out.iterations = Some(r.iterations_run);
                }
                Err(e) => out.error = Some(e),
            }
            out
        })
        .collect();
    EvaluationReport::from_outcomes(outcomes)
}
