//! Pluggable sources of masks.

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use image::{DynamicImage, ImageFormat};

use super::{MaskDocument, MaskError, MaskSet, MaskSetConfig, Modality};
use crate::lip::LipImage;

/// What a provider is asked to segment. `lip` is set for LIP requests so
/// providers that know the scene can use the per-pixel back-references.
pub struct MaskRequest<'a> {
    pub source: Modality,
    pub image: &'a DynamicImage,
    pub lip: Option<&'a LipImage>,
}

pub trait MaskProvider: Send + Sync {
    fn provide_masks(&self, request: &MaskRequest<'_>) -> Result<MaskSet, MaskError>;
}

/// Fixed mask sets, e.g. parsed once from files or uploaded with a session.
#[derive(Debug, Clone)]
pub struct StaticMaskProvider {
    pub rgb: MaskSet,
    pub lip: Option<MaskSet>,
}

impl MaskProvider for StaticMaskProvider {
    fn provide_masks(&self, request: &MaskRequest<'_>) -> Result<MaskSet, MaskError> {
        match request.source {
            Modality::Rgb => Ok(self.rgb.clone()),
            Modality::Lip => self
                .lip
                .clone()
                .ok_or_else(|| MaskError::Unsupported("no LIP masks were supplied".into())),
        }
    }
}

/// Reads mask documents from disk on every request.
#[derive(Debug, Clone)]
pub struct FileMaskProvider {
    pub rgb: PathBuf,
    pub lip: Option<PathBuf>,
    pub config: MaskSetConfig,
}

impl FileMaskProvider {
    /// `masks_rgb.json` and (if present) `masks_lip.json` inside `dir`.
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        let lip = dir.join("masks_lip.json");
        Self {
            rgb: dir.join("masks_rgb.json"),
            lip: lip.exists().then_some(lip),
            config: MaskSetConfig::default(),
        }
    }
}

impl MaskProvider for FileMaskProvider {
    fn provide_masks(&self, request: &MaskRequest<'_>) -> Result<MaskSet, MaskError> {
        let path = match request.source {
            Modality::Rgb => &self.rgb,
            Modality::Lip => self
                .lip
                .as_ref()
                .ok_or_else(|| MaskError::Unsupported("no LIP mask file configured".into()))?,
        };
        MaskDocument::from_file(path)?.to_mask_set(request.source, &self.config)
    }
}

/// Client for the segmentation service: `POST {base}/segment` with a PNG
/// body, answered by a [`MaskDocument`].
pub struct RemoteMaskProvider {
    base_url: String,
    agent: ureq::Agent,
    config: MaskSetConfig,
    // one upstream at a time
    gate: Mutex<()>,
}

impl RemoteMaskProvider {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            config: MaskSetConfig::default(),
            gate: Mutex::new(()),
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/segment", self.base_url)
    }
}

impl MaskProvider for RemoteMaskProvider {
    fn provide_masks(&self, request: &MaskRequest<'_>) -> Result<MaskSet, MaskError> {
        let mut png = Vec::new();
        request
            .image
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| MaskError::Unsupported(format!("cannot encode image: {e}")))?;
        let _guard = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        let source = match request.source {
            Modality::Lip => "lip",
            Modality::Rgb => "rgb",
        };
        let unavailable = |e: ureq::Error| MaskError::ProviderUnavailable(format!("{}: {e}", self.endpoint()));
        let response = self
            .agent
            .post(&self.endpoint())
            .header("Content-Type", "image/png")
            .header("X-Mask-Source", source)
            .send(&png[..])
            .map_err(unavailable)?;
        let body = response.into_body().read_to_string().map_err(unavailable)?;
        let doc = MaskDocument::from_json(&body)?;
        let set = doc.to_mask_set(request.source, &self.config)?;
        let expected = (request.image.width(), request.image.height());
        if set.image_size() != expected {
            return Err(MaskError::SchemaError(format!(
                "service answered for a {:?} image, sent {:?}",
                set.image_size(),
                expected
            )));
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BoundingBox, ImageSize, MaskRecord};
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn doc() -> MaskDocument {
        MaskDocument {
            image_size: ImageSize { width: 64, height: 48 },
            masks: vec![MaskRecord {
                id: 3,
                bbox: BoundingBox { cx: 20.0, cy: 20.0, w: 21.0, h: 21.0 },
                polygon: vec![10.0, 10.0, 10.0, 30.0, 30.0, 30.0, 30.0, 10.0],
                area: 441.0,
            }],
        }
    }

    fn request_image() -> DynamicImage {
        DynamicImage::new_rgb8(64, 48)
    }

    /// Serves exactly one canned HTTP response.
    fn one_shot_server(status: &'static str, body: String) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((mut stream, _)) = listener.accept() {
                let mut buf = [0u8; 65536];
                let mut seen = Vec::new();
                // read headers plus the declared body
                loop {
                    let n = stream.read(&mut buf).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    seen.extend_from_slice(&buf[..n]);
                    if let Some(end) = seen.windows(4).position(|w| w == b"\r\n\r\n") {
                        let head = String::from_utf8_lossy(&seen[..end]).to_lowercase();
                        let len = head
                            .lines()
                            .find_map(|l| l.strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if seen.len() >= end + 4 + len {
                            break;
                        }
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    #[test]
    fn remote_round_trip() {
        let url = one_shot_server("200 OK", doc().to_json());
        let provider = RemoteMaskProvider::new(url, Duration::from_secs(5));
        let img = request_image();
        let set = provider
            .provide_masks(&MaskRequest { source: Modality::Rgb, image: &img, lip: None })
            .unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.masks()[0].id(), 3);
    }

    #[test]
    fn remote_down_is_unavailable() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let provider = RemoteMaskProvider::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2));
        let img = request_image();
        let err = provider
            .provide_masks(&MaskRequest { source: Modality::Rgb, image: &img, lip: None })
            .unwrap_err();
        assert!(matches!(err, MaskError::ProviderUnavailable(_)), "{err}");
    }

    #[test]
    fn remote_timeout_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = std::thread::spawn(move || {
            let conn = listener.accept();
            std::thread::sleep(Duration::from_millis(1500));
            drop(conn);
        });
        let provider = RemoteMaskProvider::new(format!("http://{addr}"), Duration::from_millis(300));
        let img = request_image();
        let err = provider
            .provide_masks(&MaskRequest { source: Modality::Rgb, image: &img, lip: None })
            .unwrap_err();
        assert!(matches!(err, MaskError::ProviderUnavailable(_)), "{err}");
        hold.join().unwrap();
    }

    #[test]
    fn remote_server_error_and_bad_body() {
        let url = one_shot_server("503 Service Unavailable", "{}".into());
        let provider = RemoteMaskProvider::new(url, Duration::from_secs(5));
        let img = request_image();
        let req = MaskRequest { source: Modality::Rgb, image: &img, lip: None };
        assert!(matches!(provider.provide_masks(&req), Err(MaskError::ProviderUnavailable(_))));

        let url = one_shot_server("200 OK", "{\"nope\": 1}".into());
        let provider = RemoteMaskProvider::new(url, Duration::from_secs(5));
        assert!(matches!(provider.provide_masks(&req), Err(MaskError::SchemaError(_))));
    }

    #[test]
    fn file_provider_reads_documents() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("masks_rgb.json"), doc().to_json()).unwrap();
        let provider = FileMaskProvider::from_dir(dir.path());
        let img = request_image();
        let set = provider
            .provide_masks(&MaskRequest { source: Modality::Rgb, image: &img, lip: None })
            .unwrap();
        assert_eq!(set.source(), Modality::Rgb);
        assert!(matches!(
            provider.provide_masks(&MaskRequest { source: Modality::Lip, image: &img, lip: None }),
            Err(MaskError::Unsupported(_))
        ));
        std::fs::write(dir.path().join("masks_rgb.json"), "{broken").unwrap();
        assert!(matches!(
            provider.provide_masks(&MaskRequest { source: Modality::Rgb, image: &img, lip: None }),
            Err(MaskError::SchemaError(_))
        ));
    }
}
