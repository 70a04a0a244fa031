use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use lcec::io::SyntheticMaskProvider;
use lcec::masks::{FileMaskProvider, MaskError, MaskProvider, RemoteMaskProvider};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Truth masks stored next to a synthetic scene.
    Synthetic,
    /// `masks_rgb.json` / `masks_lip.json` mask documents.
    File,
    /// A segmentation service answering `POST /segment`.
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderSettings {
    #[arg(long, value_enum, default_value_t = ProviderKind::Synthetic)]
    pub provider: ProviderKind,
    /// Directory holding the mask files; defaults to the scene directory.
    #[arg(long)]
    pub masks_dir: Option<PathBuf>,
    #[arg(long, default_value = "http://127.0.0.1:8000")]
    pub remote_url: String,
    #[arg(long, default_value_t = 30_000)]
    pub remote_timeout_ms: u64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Synthetic,
            masks_dir: None,
            remote_url: "http://127.0.0.1:8000".into(),
            remote_timeout_ms: 30_000,
        }
    }
}

impl ProviderSettings {
    pub fn remote(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            provider: ProviderKind::Remote,
            remote_url: url.into(),
            remote_timeout_ms: timeout.as_millis() as u64,
            ..Self::default()
        }
    }

    pub fn build(&self, scene_dir: &Path) -> Result<Box<dyn MaskProvider>, MaskError> {
        let dir = self.masks_dir.as_deref().unwrap_or(scene_dir);
        Ok(match self.provider {
            ProviderKind::Synthetic => Box::new(SyntheticMaskProvider::from_dir(dir)?),
            ProviderKind::File => Box::new(FileMaskProvider::from_dir(dir)),
            ProviderKind::Remote => Box::new(RemoteMaskProvider::new(
                self.remote_url.clone(),
                Duration::from_millis(self.remote_timeout_ms),
            )),
        })
    }
}
