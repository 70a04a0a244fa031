//! Cuboid scenes with exact ground truth: a LiDAR cloud sampled on the faces
//! the LiDAR sees, a flat-shaded camera image, and per-object masks.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::path::{Path, PathBuf};

use super::dataset::{read_point_labels, write_point_labels, write_scene, SceneError, ScenePair, LABELS_FILE, RGB_MASKS_FILE};
use crate::geometry::{canonical_rotation, project_point, Frame, Intrinsics, LidarPoint, RigidTransform};
use crate::lip::{render_lip, LipImage};
use crate::masks::{
    masks_from_label_raster, MaskDocument, MaskError, MaskProvider, MaskRequest, MaskSet, MaskSetConfig, Modality,
    NO_LABEL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("a scene needs at least 3 objects, got {0}")]
    TooFewObjects(usize),
    #[error("object {0} is behind both sensors")]
    BehindSensors(usize),
    #[error("object {0} has non-positive or non-finite extents")]
    InvalidObject(usize),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
}

/// A box standing upright in the LiDAR frame, rotated by `yaw` about z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    pub yaw: f64,
    pub intensity: f64,
    pub color: [u8; 3],
}

impl Cuboid {
    fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extents.norm()
    }

    /// Nearest entry distance along `origin + t·dir` (`dir` unit) and the
    /// outward world normal of the face hit.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let r = self.rotation();
        let o = r.inverse_transform_vector(&(origin - self.center));
        let d = r.inverse_transform_vector(dir);
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut axis = (0, 1.0);
        for a in 0..3 {
            let h = self.half_extents[a];
            if d[a].abs() < 1e-15 {
                if o[a].abs() > h {
                    return None;
                }
                continue;
            }
            let (mut near, mut far) = ((-h - o[a]) / d[a], (h - o[a]) / d[a]);
            let mut sign = -1.0;
            if near > far {
                std::mem::swap(&mut near, &mut far);
                sign = 1.0;
            }
            if near > t0 {
                t0 = near;
                axis = (a, sign);
            }
            t1 = t1.min(far);
        }
        if t0 > t1 || t0 <= 0.0 {
            return None;
        }
        let mut n = Vector3::zeros();
        n[axis.0] = axis.1;
        Some((t0, r * n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Cuboid>,
    /// `T_C_L`.
    pub truth: RigidTransform,
    pub intrinsics: Intrinsics,
    /// Standard deviation of range noise along the surface normal, metres.
    pub noise_sigma: f64,
    /// Point spacing on each face, in pixels of the focal length at the face distance.
    pub spacing_px: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 5,
            max_objects: 12,
            max_rotation_deg: 10.0,
            max_translation: 0.5,
            min_depth: 5.0,
            max_depth: 10.0,
        }
    }
}

pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).expect("valid")
}

/// `T_C_L` rotated by `angle` about a LiDAR-frame `axis` away from the
/// canonical pose, with the camera centre at `center` (LiDAR frame).
pub fn perturbed_extrinsic(axis: &Vector3<f64>, angle: f64, center: &Vector3<f64>) -> RigidTransform {
    let delta = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
    let r = Rotation3::from_matrix_unchecked(canonical_rotation()) * delta;
    RigidTransform::from_rotation(r, -(r * center), Frame::Lidar, Frame::Camera)
}

impl SceneSpec {
    pub fn random(seed: u64) -> Self {
        Self::random_with(seed, &RandomSceneConfig::default())
    }

    pub fn random_with(seed: u64, cfg: &RandomSceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = Vector3::from(UnitSphere.sample(&mut rng));
        let angle = rng.random_range(0.0..=cfg.max_rotation_deg).to_radians();
        let center = Vector3::from(UnitSphere.sample(&mut rng)) * rng.random_range(0.0..=cfg.max_translation);
        let truth = perturbed_extrinsic(&axis, angle, &center);
        let k = default_intrinsics();
        let cam_to_lidar = truth.inverse();
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);

        let mut objects: Vec<Cuboid> = Vec::with_capacity(n);
        let mut footprints: Vec<(Vector2<f64>, f64)> = Vec::new();
        let mut attempts = 0;
        while objects.len() < n && attempts < 2000 {
            attempts += 1;
            let px = Vector2::new(
                rng.random_range(0.12..0.88) * k.width as f64,
                rng.random_range(0.15..0.85) * k.height as f64,
            );
            let depth = rng.random_range(cfg.min_depth..cfg.max_depth);
            let half = Vector3::new(
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..0.9),
            );
            let cuboid = Cuboid {
                center: cam_to_lidar.transform_point(&k.unproject(&px, depth)),
                half_extents: half,
                yaw: rng.random_range(-PI / 3.0..PI / 3.0),
                intensity: rng.random_range(30.0..230.0),
                color: [rng.random_range(40..=255), rng.random_range(40..=255), rng.random_range(40..=255)],
            };
            let radius = k.fx * cuboid.bounding_radius() / depth;
            let clash_3d = objects
                .iter()
                .any(|o| (o.center - cuboid.center).norm() < o.bounding_radius() + cuboid.bounding_radius());
            // limit overlap in the image early on, accept it later
            let crowded = attempts < 600
                && footprints
                    .iter()
                    .any(|(c, r)| (c - px).norm() < 0.75 * (r + radius));
            if clash_3d || crowded {
                continue;
            }
            footprints.push((px, radius));
            objects.push(cuboid);
        }
        Self {
            objects,
            truth,
            intrinsics: k,
            noise_sigma: 0.003,
            spacing_px: 0.7,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.objects.len() < 3 {
            return Err(SpecError::TooFewObjects(self.objects.len()));
        }
        self.intrinsics
            .validate()
            .map_err(|e| SpecError::Intrinsics(e.to_string()))?;
        for (i, o) in self.objects.iter().enumerate() {
            if !o.half_extents.iter().all(|h| *h > 0.0 && h.is_finite()) || !o.center.iter().all(|c| c.is_finite()) {
                return Err(SpecError::InvalidObject(i));
            }
            let in_camera = self.truth.transform_point(&o.center);
            if o.center.x <= 0.0 && in_camera.z <= 0.0 {
                return Err(SpecError::BehindSensors(i));
            }
        }
        Ok(())
    }
}

/// Nearest object and hit along a ray.
fn cast(objects: &[Cuboid], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(usize, f64, Vector3<f64>)> {
    objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.intersect(origin, dir).map(|(t, n)| (i, t, n)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Samples every face of `objects[index]` that points at the LiDAR origin on a
/// jittered grid, dropping samples another object hides from the LiDAR.
fn sample_object(spec: &SceneSpec, index: usize, seed: u64) -> Vec<(LidarPoint, u32)> {
    let o = &spec.objects[index];
    let rot = o.rotation();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let shade = Normal::new(0.0, 2.0).expect("finite");
    let mut out = Vec::new();
    for face in 0..6 {
        let (a, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        let mut n_local = Vector3::zeros();
        n_local[a] = sign;
        let normal = rot * n_local;
        let face_center = o.center + rot * (n_local * o.half_extents[a]);
        if normal.dot(&face_center) >= 0.0 {
            continue;
        }
        let dist = (face_center.norm() - o.bounding_radius()).max(0.5);
        let spacing = spec.spacing_px * dist / spec.intrinsics.fx;
        let (hb, hc) = (o.half_extents[b], o.half_extents[c]);
        let (nb, nc) = (((2.0 * hb) / spacing).ceil() as usize, ((2.0 * hc) / spacing).ceil() as usize);
        let (db, dc) = (2.0 * hb / nb as f64, 2.0 * hc / nc as f64);
        let level = (o.intensity + [0.0, 12.0, -12.0, 24.0, -24.0, 6.0][face]).clamp(0.0, 255.0);
        for i in 0..nb {
            for j in 0..nc {
                let mut local = n_local * o.half_extents[a];
                local[b] = -hb + (i as f64 + rng.random::<f64>()) * db;
                local[c] = -hc + (j as f64 + rng.random::<f64>()) * dc;
                let surface = o.center + rot * local;
                let p = surface + normal * noise.sample(&mut rng);
                let intensity = (level + shade.sample(&mut rng)).clamp(0.0, 255.0);
                let range = surface.norm();
                let dir = surface / range;
                let hidden = spec
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(k, other)| k != index && other.intersect(&Vector3::zeros(), &dir).is_some_and(|(t, _)| t < range - 1e-9));
                if !hidden {
                    out.push((LidarPoint::new(p, intensity), index as u32));
                }
            }
        }
    }
    out
}

/// Flat-shaded image and object-id raster seen by the camera under `truth`.
pub fn render_camera(objects: &[Cuboid], truth: &RigidTransform, k: &Intrinsics) -> (RgbImage, Vec<u32>) {
    let origin = truth.origin_in_source();
    let inv_r = truth.rotation().inverse();
    let light = Vector3::new(-0.4, 0.3, 0.85).normalize();
    let (w, h) = (k.width, k.height);
    let pixels: Vec<(Rgb<u8>, u32)> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (u, v) = ((idx % w) as f64, (idx / w) as f64);
            let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let dir = (inv_r * d_cam).normalize();
            match cast(objects, &origin, &dir) {
                Some((i, _, n)) => {
                    let s = 0.35 + 0.65 * n.dot(&light).abs();
                    let c = objects[i].color.map(|x| (x as f64 * s).round().clamp(0.0, 255.0) as u8);
                    (Rgb(c), i as u32)
                }
                None => (Rgb([205, 220, 235]), NO_LABEL),
            }
        })
        .collect();
    let mut img = RgbImage::new(w, h);
    let mut labels = Vec::with_capacity(pixels.len());
    for (i, (c, l)) in pixels.into_iter().enumerate() {
        img.put_pixel(i as u32 % w, i as u32 / w, c);
        labels.push(l);
    }
    (img, labels)
}

/// Object-id raster of a LIP: rendered pixels take their point's label, and
/// empty pixels with at least five same-label neighbours (two passes) are
/// filled so sampling gaps do not split masks.
pub fn lip_label_raster(lip: &LipImage, point_labels: &[u32]) -> Vec<u32> {
    let (w, h) = (lip.width() as usize, lip.height() as usize);
    let mut labels: Vec<u32> = lip
        .point_indices()
        .iter()
        .map(|i| i.and_then(|i| point_labels.get(i as usize).copied()).unwrap_or(NO_LABEL))
        .collect();
    for _ in 0..2 {
        let prev = labels.clone();
        for y in 0..h {
            for x in 0..w {
                if prev[y * w + x] != NO_LABEL {
                    continue;
                }
                let mut seen: [(u32, u8); 8] = [(NO_LABEL, 0); 8];
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let l = prev[ny as usize * w + nx as usize];
                        if l == NO_LABEL {
                            continue;
                        }
                        if let Some(slot) = seen.iter_mut().find(|s| s.0 == l || s.1 == 0) {
                            slot.0 = l;
                            slot.1 += 1;
                        }
                    }
                }
                if let Some(&(l, _)) = seen.iter().find(|s| s.1 >= 5) {
                    labels[y * w + x] = l;
                }
            }
        }
    }
    labels
}

pub fn lip_truth_masks(lip: &LipImage, point_labels: &[u32], cfg: &MaskSetConfig) -> MaskSet {
    let raster = lip_label_raster(lip, point_labels);
    masks_from_label_raster(&raster, lip.width(), lip.height(), Modality::Lip, cfg)
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub pair: ScenePair,
    /// Object id per cloud point.
    pub point_labels: Vec<u32>,
    pub rgb_labels: Vec<u32>,
    pub rgb_masks: MaskSet,
    /// LIP masks rendered from the true camera pose.
    pub lip_masks: MaskSet,
}

impl SyntheticScene {
    pub fn mask_provider(&self) -> SyntheticMaskProvider {
        SyntheticMaskProvider {
            point_labels: self.point_labels.clone(),
            rgb: self.rgb_masks.clone(),
            config: MaskSetConfig::default(),
        }
    }
}

/// Geometry comes from `spec`; `seed` only drives sampling jitter and noise.
pub fn generate_synthetic(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, SpecError> {
    spec.validate()?;
    let sampled: Vec<Vec<(LidarPoint, u32)>> = (0..spec.objects.len())
        .into_par_iter()
        .map(|i| sample_object(spec, i, seed))
        .collect();
    let (cloud, point_labels): (Vec<LidarPoint>, Vec<u32>) = sampled.into_iter().flatten().unzip();
    let k = spec.intrinsics;
    let (image, rgb_labels) = render_camera(&spec.objects, &spec.truth, &k);
    let cfg = MaskSetConfig::default();
    let rgb_masks = masks_from_label_raster(&rgb_labels, k.width, k.height, Modality::Rgb, &cfg);
    let lip_masks = match render_lip(&cloud, &spec.truth, &k) {
        Ok(lip) => lip_truth_masks(&lip, &point_labels, &cfg),
        Err(_) => MaskSet::empty((k.width, k.height), Modality::Lip),
    };
    Ok(SyntheticScene {
        spec: spec.clone(),
        pair: ScenePair {
            scene_id: format!("synthetic-{seed}"),
            cloud,
            image,
            intrinsics: k,
            truth_extrinsics: Some(spec.truth.clone()),
            subset: Some("synthetic".into()),
        },
        point_labels,
        rgb_labels,
        rgb_masks,
        lip_masks,
    })
}

/// Truth masks: the fixed RGB set, and LIP masks derived from point labels
/// of whatever LIP is being segmented.
#[derive(Debug, Clone)]
pub struct SyntheticMaskProvider {
    pub point_labels: Vec<u32>,
    pub rgb: MaskSet,
    pub config: MaskSetConfig,
}

impl MaskProvider for SyntheticMaskProvider {
    fn provide_masks(&self, request: &MaskRequest<'_>) -> Result<MaskSet, MaskError> {
        match request.source {
            Modality::Rgb => Ok(self.rgb.clone()),
            Modality::Lip => {
                let lip = request
                    .lip
                    .ok_or_else(|| MaskError::Unsupported("LIP masks need the rendered LIP".into()))?;
                Ok(lip_truth_masks(lip, &self.point_labels, &self.config))
            }
        }
    }
}

impl SyntheticMaskProvider {
    /// Reads the point labels and RGB masks [`write_synthetic_scene`] stores
    /// next to a scene.
    pub fn from_dir(dir: &Path) -> Result<Self, MaskError> {
        let labels = dir.join(LABELS_FILE);
        let point_labels = read_point_labels(&labels)
            .map_err(|e| MaskError::SchemaError(format!("{}: {e}", labels.display())))?;
        let config = MaskSetConfig::default();
        let rgb = MaskDocument::from_file(&dir.join(RGB_MASKS_FILE))?.to_mask_set(Modality::Rgb, &config)?;
        Ok(Self {
            point_labels,
            rgb,
            config,
        })
    }
}

/// Writes the scene plus the files [`SyntheticMaskProvider::from_dir`] needs.
pub fn write_synthetic_scene(root: &Path, scene: &SyntheticScene) -> Result<PathBuf, SceneError> {
    let dir = write_scene(root, &scene.pair)?;
    let io = |path: PathBuf| move |source| SceneError::Io { path, source };
    let labels = dir.join(LABELS_FILE);
    write_point_labels(&labels, &scene.point_labels).map_err(io(labels.clone()))?;
    let masks = dir.join(RGB_MASKS_FILE);
    std::fs::write(&masks, MaskDocument::from_mask_set(&scene.rgb_masks).to_json()).map_err(io(masks.clone()))?;
    Ok(dir)
}

/// Helper for tests and examples: is `p` (LiDAR frame) inside the image under `t`?
pub fn projects_inside(t: &RigidTransform, p: &Vector3<f64>, k: &Intrinsics) -> bool {
    project_point(&t.transform_point(p), k).is_ok_and(|px| k.contains(&px))
}
