//! JSON mask document shared by mask files and the segmentation service.
//!
//! ```json
//! {
//!   "image_size": {"width": 640, "height": 480},
//!   "masks": [
//!     {"id": 0, "bbox": {"cx": 120.5, "cy": 80.0, "w": 40, "h": 30},
//!      "polygon": [101.0, 65.0, 101.0, 94.0, 140.0, 94.0], "area": 1130}
//!   ]
//! }
//! ```
//!
//! `polygon` is a flat `x, y` list tracing the mask outline; it is simplified
//! to the corner cap on load.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::{extract_corners, MaskError, MaskObservation, MaskSet, MaskSetConfig, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub id: u32,
    pub bbox: BoundingBox,
    pub polygon: Vec<f64>,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDocument {
    pub image_size: ImageSize,
    pub masks: Vec<MaskRecord>,
}

impl MaskDocument {
    pub fn from_json(text: &str) -> Result<Self, MaskError> {
        serde_json::from_str(text).map_err(|e| MaskError::SchemaError(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, MaskError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MaskError::SchemaError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask documents always serialize")
    }

    pub fn from_mask_set(set: &MaskSet) -> Self {
        let (width, height) = set.image_size();
        Self {
            image_size: ImageSize { width, height },
            masks: set
                .masks()
                .iter()
                .map(|m| MaskRecord {
                    id: m.id(),
                    bbox: BoundingBox {
                        cx: m.center().x,
                        cy: m.center().y,
                        w: m.width(),
                        h: m.height(),
                    },
                    polygon: m.corners().iter().flat_map(|c| [c.x, c.y]).collect(),
                    area: m.area(),
                })
                .collect(),
        }
    }

    /// Converts to a validated [`MaskSet`]. Masks whose polygon is too small to
    /// simplify are skipped; structurally broken records are a schema error.
    pub fn to_mask_set(&self, source: Modality, cfg: &MaskSetConfig) -> Result<MaskSet, MaskError> {
        let mut masks = Vec::with_capacity(self.masks.len());
        for rec in &self.masks {
            if rec.polygon.len() % 2 != 0 {
                return Err(MaskError::SchemaError(format!(
                    "mask {}: polygon has an odd number of coordinates",
                    rec.id
                )));
            }
            let contour: Vec<Vector2<f64>> = rec
                .polygon
                .chunks_exact(2)
                .map(|c| Vector2::new(c[0], c[1]))
                .collect();
            let corners = match extract_corners(&contour, cfg.corner_cap) {
                Ok(c) => c,
                Err(MaskError::DegenerateContour { .. }) => continue,
                Err(e) => return Err(e),
            };
            let mask = MaskObservation::new(
                rec.id,
                Vector2::new(rec.bbox.cx, rec.bbox.cy),
                (rec.bbox.w, rec.bbox.h),
                corners,
                rec.area,
                source,
                cfg.corner_cap,
            )
            .map_err(|e| MaskError::SchemaError(e.to_string()))?;
            masks.push(mask);
        }
        MaskSet::new(
            masks,
            (self.image_size.width, self.image_size.height),
            source,
            cfg,
        )
        .map_err(|e| match e {
            MaskError::DuplicateId(_) | MaskError::InvalidMask { .. } => MaskError::SchemaError(e.to_string()),
            other => other,
        })
    }
}
