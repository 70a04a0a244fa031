//! On-disk scene layout:
//!
//! ```text
//! root/
//!   manifest.json            optional: {"scenes": [{"id": "...", "subset": "..."}]}
//!   <scene_id>/
//!     cloud.pcd
//!     image.png
//!     intrinsics.txt         3x3 row-major
//!     extrinsics_gt.txt      4x4 row-major T_C_L, optional
//!     point_labels.bin       optional, u32 LE per point (u32::MAX = none)
//!     masks_rgb.json         optional mask document
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pcd::{read_pcd, write_pcd, PcdEncoding, PcdError};
use crate::geometry::{Frame, Intrinsics, LidarPoint, RigidTransform};

pub const CLOUD_FILE: &str = "cloud.pcd";
pub const IMAGE_FILE: &str = "image.png";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const EXTRINSICS_FILE: &str = "extrinsics_gt.txt";
pub const LABELS_FILE: &str = "point_labels.bin";
pub const RGB_MASKS_FILE: &str = "masks_rgb.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Rotation tolerance applied to ground truth read from text.
pub const GT_ROTATION_TOLERANCE: f64 = 1e-6;
pub const MIN_REAL_POINTS: usize = 1000;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {reason}", path.display())]
    Layout { path: PathBuf, reason: String },
}

fn layout(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Layout {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("point cloud: {0}")]
    Cloud(#[from] PcdError),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct ScenePair {
    pub scene_id: String,
    pub cloud: Vec<LidarPoint>,
    pub image: RgbImage,
    pub intrinsics: Intrinsics,
    pub truth_extrinsics: Option<RigidTransform>,
    pub subset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialLoad {
    pub scene_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub scenes: Vec<ScenePair>,
    pub warnings: Vec<PartialLoad>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| layout(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| layout(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes"))
    }
}

fn read_numbers(path: &Path, expected: usize) -> Result<Vec<f64>, SceneError> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let format = |reason: String| SceneError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let vals = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format(format!("cannot parse {s:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(format(format!("{} numbers, expected {expected}", vals.len())));
    }
    Ok(vals)
}

pub fn read_intrinsics(path: &Path, width: u32, height: u32) -> Result<Intrinsics, SceneError> {
    let v = read_numbers(path, 9)?;
    Intrinsics::from_matrix(&Matrix3::from_row_slice(&v), width, height).map_err(|e| SceneError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Ground truth is re-orthonormalized when within [`GT_ROTATION_TOLERANCE`].
pub fn read_extrinsics(path: &Path) -> Result<RigidTransform, SceneError> {
    let v = read_numbers(path, 16)?;
    RigidTransform::from_row_major(&v, Frame::Lidar, Frame::Camera, GT_ROTATION_TOLERANCE).map_err(|e| {
        SceneError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

fn format_rows(values: &[f64], cols: usize) -> String {
    values
        .chunks(cols)
        .map(|r| r.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> std::io::Result<()> {
    let m = k.matrix();
    let rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
    fs::write(path, format_rows(&rows, 3))
}

pub fn write_extrinsics(path: &Path, t: &RigidTransform) -> std::io::Result<()> {
    fs::write(path, format_rows(&t.to_row_major(), 4))
}

pub fn read_point_labels(path: &Path) -> std::io::Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "label file length is not a multiple of 4"));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_point_labels(path: &Path, labels: &[u32]) -> std::io::Result<()> {
    fs::write(path, labels.iter().flat_map(|l| l.to_le_bytes()).collect::<Vec<u8>>())
}

/// Loads one scene directory. Ground truth that is not a rotation is reported
/// as [`SceneError::Format`] on `extrinsics_gt.txt`.
pub fn load_scene(dir: &Path, scene_id: &str) -> Result<ScenePair, SceneError> {
    let image = image::open(dir.join(IMAGE_FILE))?.to_rgb8();
    let intrinsics = read_intrinsics(&dir.join(INTRINSICS_FILE), image.width(), image.height())?;
    let cloud = read_pcd(&dir.join(CLOUD_FILE))?;
    let gt = dir.join(EXTRINSICS_FILE);
    let truth_extrinsics = if gt.exists() { Some(read_extrinsics(&gt)?) } else { None };
    Ok(ScenePair {
        scene_id: scene_id.to_string(),
        cloud,
        image,
        intrinsics,
        truth_extrinsics,
        subset: None,
    })
}

/// Loads every scene under `root`. Scenes that cannot be read become
/// [`PartialLoad`] warnings, except corrupt ground truth, which stops the load.
pub fn load_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    load_dataset_with(root, MIN_REAL_POINTS)
}

pub fn load_dataset_with(root: &Path, min_points: usize) -> Result<Dataset, DatasetError> {
    if !root.is_dir() {
        return Err(layout(root, "dataset root is not a directory"));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let entries = if manifest_path.exists() {
        Manifest::read(&manifest_path)?.scenes
    } else {
        let mut ids: Vec<String> = fs::read_dir(root)
            .map_err(|e| layout(root, e.to_string()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids.into_iter().map(|id| ManifestEntry { id, subset: None }).collect()
    };
    if entries.is_empty() {
        return Err(layout(root, "no scenes found"));
    }
    let loaded: Vec<(ManifestEntry, Result<ScenePair, SceneError>)> = entries
        .into_par_iter()
        .map(|e| {
            let r = load_scene(&root.join(&e.id), &e.id);
            (e, r)
        })
        .collect();
    let mut scenes = Vec::new();
    let mut warnings = Vec::new();
    for (entry, result) in loaded {
        match result {
            Ok(mut s) if s.cloud.len() >= min_points => {
                s.subset = entry.subset;
                scenes.push(s);
            }
            Ok(s) => warnings.push(PartialLoad {
                scene_id: entry.id,
                reason: format!("{} points, at least {min_points} required", s.cloud.len()),
            }),
            Err(SceneError::Format { path, reason }) if path.ends_with(EXTRINSICS_FILE) => {
                return Err(DatasetError::Layout { path, reason });
            }
            Err(e) => warnings.push(PartialLoad {
                scene_id: entry.id,
                reason: e.to_string(),
            }),
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        scenes,
        warnings,
    })
}

/// Writes a scene in the layout read by [`load_scene`].
pub fn write_scene(root: &Path, scene: &ScenePair) -> Result<PathBuf, SceneError> {
    let dir = root.join(&scene.scene_id);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SceneError::Io { path, source }
    };
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    write_pcd(&dir.join(CLOUD_FILE), &scene.cloud, PcdEncoding::Binary)?;
    scene.image.save(dir.join(IMAGE_FILE))?;
    let k = dir.join(INTRINSICS_FILE);
    write_intrinsics(&k, &scene.intrinsics).map_err(io(&k))?;
    if let Some(t) = &scene.truth_extrinsics {
        let p = dir.join(EXTRINSICS_FILE);
        write_extrinsics(&p, t).map_err(io(&p))?;
    }
    Ok(dir)
}
