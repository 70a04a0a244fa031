//! Point clouds, scene datasets and synthetic scenes.

pub mod dataset;
pub mod pcd;
pub mod synthetic;

pub use dataset::{load_dataset, load_scene, write_scene, Dataset, DatasetError, PartialLoad, SceneError, ScenePair};
pub use pcd::{read_pcd, write_pcd, PcdEncoding, PcdError};
pub use synthetic::{generate_synthetic, SceneSpec, SpecError, SyntheticMaskProvider, SyntheticScene};
