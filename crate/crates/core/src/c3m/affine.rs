use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::{C3mError, MatchPair};
use crate::geometry::wrap_angle;
use crate::masks::{MaskObservation, MaskSet};

/// Similarity warp `p ↦ s·R(θ)·p + t` from LIP to RGB pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2D {
    scale: f64,
    angle: f64,
    translation: Vector2<f64>,
}

impl Affine2D {
    pub fn new(scale: f64, angle: f64, translation: Vector2<f64>) -> Result<Self, C3mError> {
        if !(scale > 0.0 && scale.is_finite()) || !angle.is_finite() || !translation.iter().all(|v| v.is_finite()) {
            return Err(C3mError::InvalidAffine { scale, angle });
        }
        Ok(Self {
            scale,
            angle: wrap_angle(angle),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
            translation: Vector2::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.translation
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    /// `s·R`, the linear part.
    pub fn linear(&self) -> Matrix2<f64> {
        self.rotation() * self.scale
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.linear() * p + self.translation
    }

    pub fn inverse_apply(&self, q: &Vector2<f64>) -> Vector2<f64> {
        self.rotation().transpose() * (q - self.translation) / self.scale
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// How the global scale is derived from matched instance pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// Mean of `sqrt(area^C / area^V)` over mask areas: a linear scale.
    #[default]
    MaskAreaRoot,
    /// Mean of the bounding-box area ratio `(w^C h^C) / (w^V h^V)`.
    BoxAreaRatio,
}

fn lookup(set: &MaskSet, id: u32) -> Result<&MaskObservation, C3mError> {
    set.get(id).ok_or(C3mError::UnknownMask {
        id,
        modality: set.source(),
    })
}

/// Global similarity from matched instances and their corner pairs.
///
/// `θ` averages the wrapped angle from each LIP center-to-corner vector to its
/// RGB counterpart; the scale follows `rule`; `t` averages `o^C − sR·o^V`.
pub fn estimate_affine(
    pairs: &[MatchPair],
    lip: &MaskSet,
    rgb: &MaskSet,
    rule: ScaleRule,
) -> Result<Affine2D, C3mError> {
    let corners: usize = pairs.iter().map(|p| p.corner_pairs.len()).sum();
    if pairs.is_empty() || corners < 2 {
        return Err(C3mError::InsufficientMatches {
            instances: pairs.len(),
            corners,
        });
    }

    let mut theta_sum = 0.0;
    let mut scale_sum = 0.0;
    let mut resolved = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (mv, mc) = (lookup(lip, p.lip_mask_id)?, lookup(rgb, p.rgb_mask_id)?);
        for &(r, s) in &p.corner_pairs {
            let (cv, cc) = match (mv.corners().get(r), mc.corners().get(s)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(C3mError::CornerOutOfRange { lip_mask_id: p.lip_mask_id, rgb_mask_id: p.rgb_mask_id }),
            };
            let dv = cv - mv.center();
            let dc = cc - mc.center();
            theta_sum += wrap_angle(dc.y.atan2(dc.x) - dv.y.atan2(dv.x));
        }
        scale_sum += match rule {
            ScaleRule::MaskAreaRoot => {
                if mv.area() <= 0.0 || mc.area() <= 0.0 {
                    return Err(C3mError::InvalidAffine { scale: 0.0, angle: 0.0 });
                }
                (mc.area() / mv.area()).sqrt()
            }
            ScaleRule::BoxAreaRatio => (mc.width() * mc.height()) / (mv.width() * mv.height()),
        };
        resolved.push((mv.center(), mc.center()));
    }
    let theta = theta_sum / corners as f64;
    let scale = scale_sum / pairs.len() as f64;
    let sr = Affine2D::new(scale, theta, Vector2::zeros())?;
    let t = resolved
        .iter()
        .map(|(ov, oc)| oc - sr.linear() * ov)
        .sum::<Vector2<f64>>()
        / resolved.len() as f64;
    Affine2D::new(scale, theta, t)
}
