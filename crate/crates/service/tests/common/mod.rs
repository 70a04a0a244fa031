#![allow(dead_code)]

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use http_body_util::BodyExt;
use image::ImageFormat;
use lcec::io::synthetic::RandomSceneConfig;
use lcec::io::{generate_synthetic, SceneSpec, SyntheticScene};
use lcec::masks::MaskDocument;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const SCENE_SEED: u64 = 3;

pub fn scene() -> SyntheticScene {
    generate_synthetic(&SceneSpec::random(SCENE_SEED), SCENE_SEED).unwrap()
}

/// Objects at 2 to 4 m, the range manual picking is done at.
pub fn desk_scene() -> SyntheticScene {
    let cfg = RandomSceneConfig {
        min_depth: 2.0,
        max_depth: 4.0,
        ..RandomSceneConfig::default()
    };
    generate_synthetic(&SceneSpec::random_with(SCENE_SEED, &cfg), SCENE_SEED).unwrap()
}

pub fn png_base64(scene: &SyntheticScene) -> String {
    let mut bytes = Vec::new();
    scene
        .pair
        .image
        .write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .unwrap();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn pose_query(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

pub fn session_body(scene: &SyntheticScene) -> Value {
    let k = &scene.pair.intrinsics;
    json!({
        "cloud": scene.pair.cloud.iter()
            .map(|p| [p.position.x, p.position.y, p.position.z, p.intensity])
            .collect::<Vec<_>>(),
        "image_png": png_base64(scene),
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "truth": scene.pair.truth_extrinsics.as_ref().unwrap().to_row_major(),
        "masks": {"synthetic": {
            "point_labels": scene.point_labels,
            "rgb": MaskDocument::from_mask_set(&scene.rgb_masks),
        }},
    })
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let content_type = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        body,
    }
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Compares `actual` with a checked-in fixture; `LCEC_BLESS=1` rewrites it.
pub fn golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("LCEC_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(expected.trim_end(), actual.trim_end(), "golden {name} differs");
}

/// Structure of a JSON value: keys and value types, arrays by their first element.
pub fn shape(v: &Value) -> Value {
    match v {
        Value::Null => json!("null"),
        Value::Bool(_) => json!("bool"),
        Value::Number(_) => json!("number"),
        Value::String(_) => json!("string"),
        Value::Array(a) => match a.first() {
            Some(x) => json!([shape(x)]),
            None => json!([]),
        },
        Value::Object(m) => Value::Object(m.iter().map(|(k, x)| (k.clone(), shape(x))).collect()),
    }
}

pub fn golden_shape(name: &str, v: &Value) {
    golden(name, &serde_json::to_string_pretty(&shape(v)).unwrap());
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}
