//! Segmentation masks for both modalities.
//!
//! Any segmenter output is reduced to a [`MaskObservation`]: the tight
//! bounding box (centre and size), pixel area and a short counter-clockwise
//! corner polygon. Matching only ever looks at these fields.

pub mod contour;
pub mod provider;
pub mod schema;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::lip::LipImage;

pub use contour::{extract_corners, make_ccw, signed_area, trace_boundary};
pub use provider::{FileMaskProvider, MaskProvider, MaskRequest, RemoteMaskProvider, StaticMaskProvider};
pub use schema::{BoundingBox, ImageSize, MaskDocument, MaskRecord};

pub const DEFAULT_CORNER_CAP: usize = 32;
pub const DEFAULT_MIN_AREA: f64 = 100.0;
pub const DEFAULT_DUPLICATE_IOU: f64 = 0.95;
/// Corners may sit this far outside their bounding box.
pub const BBOX_SLACK: f64 = 2.0;
/// LIP corners are snapped to a rendered pixel within this radius.
pub const SNAP_RADIUS: f64 = 3.0;

#[derive(thiserror::Error, Debug)]
pub enum MaskError {
    #[error("degenerate contour ({points} points, area {area:.2} px²)")]
    DegenerateContour { area: f64, points: usize },
    #[error("invalid mask {id}: {reason}")]
    InvalidMask { id: u32, reason: String },
    #[error("duplicate mask id {0}")]
    DuplicateId(u32),
    #[error("mask source {found:?} does not match set source {expected:?}")]
    SourceMismatch { expected: Modality, found: Modality },
    #[error("mask provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("mask schema error: {0}")]
    SchemaError(String),
    #[error("provider cannot serve this request: {0}")]
    Unsupported(String),
}

impl MaskError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::DegenerateContour { .. } => "DegenerateContour",
            Self::InvalidMask { .. } => "InvalidMask",
            Self::DuplicateId(_) => "DuplicateId",
            Self::SourceMismatch { .. } => "SourceMismatch",
            Self::ProviderUnavailable(_) => "ProviderUnavailable",
            Self::SchemaError(_) => "SchemaError",
            Self::Unsupported(_) => "Unsupported",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Lip,
    Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSetConfig {
    pub corner_cap: usize,
    pub min_area: f64,
    pub duplicate_iou: f64,
}

impl Default for MaskSetConfig {
    fn default() -> Self {
        Self {
            corner_cap: DEFAULT_CORNER_CAP,
            min_area: DEFAULT_MIN_AREA,
            duplicate_iou: DEFAULT_DUPLICATE_IOU,
        }
    }
}

/// One segmented region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskObservation {
    id: u32,
    center: Vector2<f64>,
    width: f64,
    height: f64,
    corners: Vec<Vector2<f64>>,
    area: f64,
    source: Modality,
}

impl MaskObservation {
    /// Validates the bbox and corner invariants. Corners are re-oriented to
    /// counter-clockwise if needed.
    pub fn new(
        id: u32,
        center: Vector2<f64>,
        size: (f64, f64),
        mut corners: Vec<Vector2<f64>>,
        area: f64,
        source: Modality,
        corner_cap: usize,
    ) -> Result<Self, MaskError> {
        let invalid = |reason: String| MaskError::InvalidMask { id, reason };
        let (width, height) = size;
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(invalid(format!("bbox size must be positive, got {width}x{height}")));
        }
        if !(center.x.is_finite() && center.y.is_finite() && area.is_finite() && area >= 0.0) {
            return Err(invalid("non-finite centre or area".into()));
        }
        if corners.len() < 3 || corners.len() > corner_cap {
            return Err(invalid(format!(
                "{} corners, expected 3..={corner_cap}",
                corners.len()
            )));
        }
        let (hx, hy) = (width / 2.0 + BBOX_SLACK, height / 2.0 + BBOX_SLACK);
        if let Some(c) = corners
            .iter()
            .find(|c| (c.x - center.x).abs() > hx || (c.y - center.y).abs() > hy)
        {
            return Err(invalid(format!("corner ({:.1}, {:.1}) outside bbox", c.x, c.y)));
        }
        make_ccw(&mut corners);
        Ok(Self {
            id,
            center,
            width,
            height,
            corners,
            area,
            source,
        })
    }

    /// Builds a mask from a set of pixel cells of one region (assumed
    /// 8-connected), tracing its outer boundary.
    pub fn from_region(
        id: u32,
        pixels: &[(u32, u32)],
        source: Modality,
        corner_cap: usize,
    ) -> Result<Self, MaskError> {
        if pixels.is_empty() {
            return Err(MaskError::DegenerateContour { area: 0.0, points: 0 });
        }
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for &(x, y) in pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let mut local = vec![false; w * h];
        for &(x, y) in pixels {
            local[(y - y0) as usize * w + (x - x0) as usize] = true;
        }
        let offset = Vector2::new(x0 as f64, y0 as f64);
        let contour: Vec<Vector2<f64>> = trace_boundary(&local, w, h)
            .into_iter()
            .map(|p| p + offset)
            .collect();
        let corners = extract_corners(&contour, corner_cap)?;
        let center = Vector2::new((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
        Self::new(
            id,
            center,
            (w as f64, h as f64),
            corners,
            pixels.len() as f64,
            source,
            corner_cap,
        )
    }

    pub fn id(&self) -> u32 {
        self.id
    }
    pub fn center(&self) -> Vector2<f64> {
        self.center
    }
    pub fn width(&self) -> f64 {
        self.width
    }
    pub fn height(&self) -> f64 {
        self.height
    }
    pub fn corners(&self) -> &[Vector2<f64>] {
        &self.corners
    }
    pub fn area(&self) -> f64 {
        self.area
    }
    pub fn source(&self) -> Modality {
        self.source
    }

    /// `(min, max)` corners of the bounding box.
    pub fn bbox(&self) -> (Vector2<f64>, Vector2<f64>) {
        let half = Vector2::new(self.width / 2.0, self.height / 2.0);
        (self.center - half, self.center + half)
    }

    fn with_corners(&self, corners: Vec<Vector2<f64>>) -> Self {
        Self {
            corners,
            ..self.clone()
        }
    }
}

/// All masks of one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskSet {
    masks: Vec<MaskObservation>,
    image_size: (u32, u32),
    source: Modality,
}

impl MaskSet {
    /// Drops masks below `min_area`, suppresses duplicates (IoU above
    /// `duplicate_iou`, keeping the earlier mask) and checks the shared
    /// source, image bounds and id uniqueness.
    pub fn new(
        masks: Vec<MaskObservation>,
        image_size: (u32, u32),
        source: Modality,
        cfg: &MaskSetConfig,
    ) -> Result<Self, MaskError> {
        let mut kept: Vec<MaskObservation> = Vec::with_capacity(masks.len());
        for m in masks {
            if m.source != source {
                return Err(MaskError::SourceMismatch {
                    expected: source,
                    found: m.source,
                });
            }
            if kept.iter().any(|k| k.id == m.id) {
                return Err(MaskError::DuplicateId(m.id));
            }
            let (lo, hi) = m.bbox();
            let slack = BBOX_SLACK + 0.5;
            if lo.x < -slack
                || lo.y < -slack
                || hi.x > image_size.0 as f64 + slack
                || hi.y > image_size.1 as f64 + slack
            {
                return Err(MaskError::InvalidMask {
                    id: m.id,
                    reason: format!("bbox exceeds the {}x{} image", image_size.0, image_size.1),
                });
            }
            if m.area < cfg.min_area {
                continue;
            }
            if kept.iter().any(|k| mask_iou(k, &m) > cfg.duplicate_iou) {
                continue;
            }
            kept.push(m);
        }
        Ok(Self {
            masks: kept,
            image_size,
            source,
        })
    }

    pub fn empty(image_size: (u32, u32), source: Modality) -> Self {
        Self {
            masks: Vec::new(),
            image_size,
            source,
        }
    }

    pub fn masks(&self) -> &[MaskObservation] {
        &self.masks
    }
    pub fn len(&self) -> usize {
        self.masks.len()
    }
    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
    pub fn image_size(&self) -> (u32, u32) {
        self.image_size
    }
    pub fn source(&self) -> Modality {
        self.source
    }

    pub fn get(&self, id: u32) -> Option<&MaskObservation> {
        self.masks.iter().find(|m| m.id == id)
    }
}

/// Polygon IoU by point-in-polygon sampling on the pixel grid.
pub fn mask_iou(a: &MaskObservation, b: &MaskObservation) -> f64 {
    let (al, ah) = a.bbox();
    let (bl, bh) = b.bbox();
    let lo = Vector2::new(al.x.max(bl.x), al.y.max(bl.y));
    let hi = Vector2::new(ah.x.min(bh.x), ah.y.min(bh.y));
    if lo.x >= hi.x || lo.y >= hi.y {
        return 0.0;
    }
    let ulo = Vector2::new(al.x.min(bl.x), al.y.min(bl.y));
    let uhi = Vector2::new(ah.x.max(bh.x), ah.y.max(bh.y));
    let (mut inter, mut union) = (0usize, 0usize);
    let mut y = ulo.y.floor();
    while y <= uhi.y.ceil() {
        let mut x = ulo.x.floor();
        while x <= uhi.x.ceil() {
            let p = Vector2::new(x, y);
            let ia = point_in_polygon(&p, &a.corners);
            let ib = point_in_polygon(&p, &b.corners);
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
            x += 1.0;
        }
        y += 1.0;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Even-odd rule, boundary points count as inside.
pub fn point_in_polygon(p: &Vector2<f64>, poly: &[Vector2<f64>]) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        // on-segment check
        let ab = b - a;
        let ap = p - a;
        let cross = ab.x * ap.y - ab.y * ap.x;
        if cross.abs() < 1e-9 && ap.dot(&ab) >= 0.0 && ap.dot(&ab) <= ab.norm_squared() {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let xi = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if p.x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// Background value of a label raster.
pub const NO_LABEL: u32 = u32::MAX;

/// One mask per label of a row-major label raster, built from the largest
/// 8-connected region of that label. Mask ids are the labels.
pub fn masks_from_label_raster(
    labels: &[u32],
    width: u32,
    height: u32,
    source: Modality,
    cfg: &MaskSetConfig,
) -> MaskSet {
    let (w, h) = (width as usize, height as usize);
    let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l != NO_LABEL).collect();
    ids.sort_unstable();
    ids.dedup();
    let masks = ids
        .into_iter()
        .filter_map(|id| {
            let hit: Vec<bool> = labels.iter().map(|&l| l == id).collect();
            let (comp, sizes) = contour::connected_components(&hit, w, h);
            let (best, _) = sizes.iter().enumerate().max_by_key(|&(i, s)| (*s, std::cmp::Reverse(i)))?;
            let pixels: Vec<(u32, u32)> = comp
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c == best as u32)
                .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
                .collect();
            MaskObservation::from_region(id, &pixels, source, cfg.corner_cap).ok()
        })
        .collect();
    MaskSet::new(masks, (width, height), source, cfg).expect("regions lie inside the raster")
}

/// LIP masks whose corners all sit on rendered pixels, with the source cloud
/// index of every corner.
#[derive(Debug, Clone)]
pub struct AnchoredMasks {
    pub masks: MaskSet,
    /// `point_indices[k][c]` is the cloud index behind corner `c` of mask `k`.
    pub point_indices: Vec<Vec<u32>>,
}

impl AnchoredMasks {
    pub fn corner_point(&self, mask_id: u32, corner: usize) -> Option<u32> {
        let k = self.masks.masks.iter().position(|m| m.id == mask_id)?;
        self.point_indices[k].get(corner).copied()
    }
}

/// Snaps every LIP corner to the nearest directly rendered pixel within
/// `radius`; corners without one are dropped, and masks left with fewer than
/// three corners are dropped too.
pub fn anchor_to_lip(masks: &MaskSet, lip: &LipImage, radius: f64) -> AnchoredMasks {
    let mut out = Vec::new();
    let mut indices = Vec::new();
    for m in &masks.masks {
        let mut corners = Vec::with_capacity(m.corners.len());
        let mut idx = Vec::with_capacity(m.corners.len());
        for c in &m.corners {
            if let Some((x, y)) = lip.nearest_set_pixel(c, radius) {
                let snapped = Vector2::new(x as f64, y as f64);
                if corners.last() == Some(&snapped) {
                    continue;
                }
                corners.push(snapped);
                idx.push(lip.point_index(x, y).expect("set pixel"));
            }
        }
        if corners.len() > 1 && corners.first() == corners.last() {
            corners.pop();
            idx.pop();
        }
        if corners.len() < 3 {
            continue;
        }
        // snapping moves corners by at most `radius`; the bbox is kept as segmented
        let mut anchored = m.with_corners(corners);
        if signed_area(&anchored.corners) < 0.0 {
            anchored.corners[1..].reverse();
            idx[1..].reverse();
        }
        out.push(anchored);
        indices.push(idx);
    }
    AnchoredMasks {
        masks: MaskSet {
            masks: out,
            image_size: masks.image_size,
            source: masks.source,
        },
        point_indices: indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Frame, RigidTransform};

    fn rect(id: u32, x0: f64, y0: f64, w: f64, h: f64) -> MaskObservation {
        let corners = vec![
            Vector2::new(x0, y0),
            Vector2::new(x0, y0 + h),
            Vector2::new(x0 + w, y0 + h),
            Vector2::new(x0 + w, y0),
        ];
        MaskObservation::new(
            id,
            Vector2::new(x0 + w / 2.0, y0 + h / 2.0),
            (w, h),
            corners,
            w * h,
            Modality::Rgb,
            DEFAULT_CORNER_CAP,
        )
        .unwrap()
    }

    #[test]
    fn validation_rejects_bad_masks() {
        let c = vec![Vector2::new(0.0, 0.0), Vector2::new(10.0, 0.0), Vector2::new(0.0, 10.0)];
        let mk = |size: (f64, f64), corners: Vec<Vector2<f64>>| {
            MaskObservation::new(1, Vector2::new(5.0, 5.0), size, corners, 50.0, Modality::Lip, 32)
        };
        assert!(mk((0.0, 10.0), c.clone()).is_err());
        assert!(mk((10.0, 10.0), c[..2].to_vec()).is_err());
        let mut far = c.clone();
        far.push(Vector2::new(20.0, 20.0));
        assert!(mk((10.0, 10.0), far).is_err());
        assert!(MaskObservation::new(1, Vector2::new(5.0, 5.0), (10.0, 10.0), c.clone(), 50.0, Modality::Lip, 2).is_err());
        let ok = mk((10.0, 10.0), c).unwrap();
        assert!(signed_area(ok.corners()) > 0.0);
    }

    #[test]
    fn set_filters_small_and_duplicates() {
        let a = rect(0, 10.0, 10.0, 50.0, 40.0);
        let b = rect(1, 10.5, 10.0, 50.0, 40.0);
        let c = rect(2, 100.0, 100.0, 30.0, 30.0);
        let tiny = rect(3, 200.0, 10.0, 5.0, 5.0);
        assert!(mask_iou(&a, &b) > 0.95);
        let set = MaskSet::new(vec![a, b, c, tiny], (640, 480), Modality::Rgb, &MaskSetConfig::default()).unwrap();
        let ids: Vec<u32> = set.masks().iter().map(|m| m.id()).collect();
        assert_eq!(ids, vec![0, 2]);
        assert!(set.masks().iter().all(|m| m.area() >= DEFAULT_MIN_AREA));
    }

    #[test]
    fn set_rejects_mixed_sources_and_duplicate_ids() {
        let a = rect(0, 10.0, 10.0, 50.0, 40.0);
        let cfg = MaskSetConfig::default();
        assert!(matches!(
            MaskSet::new(vec![a.clone()], (640, 480), Modality::Lip, &cfg),
            Err(MaskError::SourceMismatch { .. })
        ));
        assert!(matches!(
            MaskSet::new(vec![a.clone(), rect(0, 300.0, 10.0, 50.0, 40.0)], (640, 480), Modality::Rgb, &cfg),
            Err(MaskError::DuplicateId(0))
        ));
        assert!(MaskSet::new(vec![rect(0, 600.0, 10.0, 100.0, 40.0)], (640, 480), Modality::Rgb, &cfg).is_err());
    }

    #[test]
    fn from_region_matches_bbox() {
        let pixels: Vec<(u32, u32)> = (20..40).flat_map(|y| (10..60).map(move |x| (x, y))).collect();
        let m = MaskObservation::from_region(7, &pixels, Modality::Rgb, 32).unwrap();
        assert_eq!(m.width(), 50.0);
        assert_eq!(m.height(), 20.0);
        assert_eq!(m.center(), Vector2::new(34.5, 29.5));
        assert_eq!(m.area(), 1000.0);
        assert_eq!(m.corners().len(), 4);
        // bbox recomputed from corners agrees within 2 px
        let xs: Vec<f64> = m.corners().iter().map(|c| c.x).collect();
        let ys: Vec<f64> = m.corners().iter().map(|c| c.y).collect();
        let (minx, maxx) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
        let (miny, maxy) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
        assert!(((minx + maxx) / 2.0 - m.center().x).abs() <= 2.0);
        assert!(((miny + maxy) / 2.0 - m.center().y).abs() <= 2.0);
        assert!(((maxx - minx) - m.width()).abs() <= 2.0);
        assert!(((maxy - miny) - m.height()).abs() <= 2.0);
    }

    #[test]
    fn anchoring_snaps_or_drops() {
        use crate::lip::lip_from_parts;
        let (w, h) = (40u32, 40u32);
        let mut idx = vec![None; (w * h) as usize];
        // rendered pixels only near three of the four corners
        for (x, y) in [(11u32, 10u32), (30, 10), (30, 30)] {
            idx[(y * w + x) as usize] = Some(y * w + x);
        }
        let lip = lip_from_parts(w, h, vec![0; (w * h) as usize], idx, RigidTransform::identity(Frame::Lidar, Frame::Virtual));
        let m = MaskObservation::new(
            0,
            Vector2::new(20.0, 20.0),
            (21.0, 21.0),
            vec![Vector2::new(10.0, 10.0), Vector2::new(10.0, 30.0), Vector2::new(30.0, 30.0), Vector2::new(30.0, 10.0)],
            400.0,
            Modality::Lip,
            32,
        )
        .unwrap();
        let set = MaskSet::new(vec![m], (w, h), Modality::Lip, &MaskSetConfig::default()).unwrap();
        let anchored = anchor_to_lip(&set, &lip, SNAP_RADIUS);
        let am = &anchored.masks.masks()[0];
        assert_eq!(am.corners().len(), 3);
        assert!(am.corners().contains(&Vector2::new(11.0, 10.0)));
        for (c, &i) in am.corners().iter().zip(&anchored.point_indices[0]) {
            assert_eq!(i, c.y as u32 * w + c.x as u32);
        }
    }
}
