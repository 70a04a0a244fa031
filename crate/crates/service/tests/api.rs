mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use common::*;
use lcec::geometry::{project_point, rotation_error, translation_error, Frame, RigidTransform};
use lcec::masks::{MaskError, MaskProvider, MaskRequest, MaskSet};
use lcec_service::server::{app, Session, ServerConfig};
use lcec::lip::render_lip;
use lcec::pnp::perturb;
use nalgebra::{Vector2, Vector6};
use serde_json::{json, Value};

async fn with_session() -> (axum::Router, String, lcec::io::SyntheticScene) {
    let scene = scene();
    let (router, _) = app(ServerConfig::default());
    let r = send(&router, "POST", "/session", Some(session_body(&scene))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let id = r.json()["session_id"].as_str().unwrap().to_string();
    (router, id, scene)
}

fn truth_values(scene: &lcec::io::SyntheticScene) -> [f64; 16] {
    scene.pair.truth_extrinsics.as_ref().unwrap().to_row_major()
}

fn pose_of(v: &Value) -> RigidTransform {
    let values: Vec<f64> = v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    RigidTransform::from_row_major(&values, Frame::Lidar, Frame::Camera, 1e-6).unwrap()
}

#[tokio::test]
async fn create_session_reports_the_pair() {
    let (router, _, scene) = with_session().await;
    let r = send(&router, "POST", "/session", Some(session_body(&scene))).await;
    let v = r.json();
    assert_eq!(v["width"], 640);
    assert_eq!(v["height"], 480);
    assert_eq!(v["points"], scene.pair.cloud.len());
    assert_eq!(v["has_truth"], true);
    golden_shape("session.shape.json", &v);
}

#[tokio::test]
async fn session_needs_a_pair() {
    let (router, _) = app(ServerConfig::default());
    let r = send(&router, "POST", "/session", Some(json!({}))).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["kind"], "BadRequest");
}

#[tokio::test]
async fn calibrate_then_matches() {
    let (router, id, scene) = with_session().await;
    let before = send(&router, "GET", &format!("/session/{id}/matches"), None).await;
    assert_eq!(before.status, StatusCode::NOT_FOUND);

    let r = send(
        &router,
        "POST",
        &format!("/session/{id}/calibrate"),
        Some(json!({"iterations": 2, "seed": 0})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    let pose = pose_of(&v["final_pose"]["matrix"]);
    let truth = scene.pair.truth_extrinsics.as_ref().unwrap();
    assert!(rotation_error(&pose, truth).to_degrees() <= 0.5);
    assert!(translation_error(&pose, truth) <= 0.05);
    assert!(v["iterations_run"].as_u64().unwrap() >= 1);
    golden_shape("calibrate.shape.json", &v);

    let m = send(&router, "GET", &format!("/session/{id}/matches"), None).await;
    assert_eq!(m.status, StatusCode::OK);
    let mv = m.json();
    assert!(!mv["stage1"].as_array().unwrap().is_empty());
    golden_shape("matches.shape.json", &mv);
}

#[tokio::test]
async fn lip_image_is_a_png_of_the_image_size() {
    let (router, id, scene) = with_session().await;
    let r = send(&router, "GET", &format!("/session/{id}/lip?pose={}", pose_query(&truth_values(&scene))), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "image/png");
    let img = image::load_from_memory(&r.body).unwrap();
    assert_eq!((img.width(), img.height()), (640, 480));
    golden_shape(
        "lip.shape.json",
        &json!({"content_type": r.content_type, "width": img.width(), "height": img.height()}),
    );
}

#[tokio::test]
async fn overlay_at_truth_matches_the_fixture() {
    let (router, id, scene) = with_session().await;
    let q = pose_query(&truth_values(&scene));
    let r = send(&router, "GET", &format!("/session/{id}/overlay?pose={q}&alpha=0.5"), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.content_type, "image/png");
    let img = image::load_from_memory(&r.body).unwrap().to_rgb8();
    golden("overlay_truth.fnv1a", &format!("{:016x}\n", fnv1a(img.as_raw())));
    golden_shape(
        "overlay.shape.json",
        &json!({"content_type": r.content_type, "width": img.width(), "height": img.height()}),
    );

    let plain = send(&router, "GET", &format!("/session/{id}/overlay?pose={q}&alpha=0"), None).await;
    let plain = image::load_from_memory(&plain.body).unwrap().to_rgb8();
    assert_eq!(plain, scene.pair.image);

    // blended pixels sit on the same object in both modalities at the truth
    let truth = scene.pair.truth_extrinsics.as_ref().unwrap();
    let agree = |pose: &RigidTransform| {
        let lip = render_lip(&scene.pair.cloud, &pose.relabel(Frame::Lidar, Frame::Virtual), &scene.pair.intrinsics).unwrap();
        let (mut same, mut all) = (0usize, 0usize);
        for y in 0..lip.height() {
            for x in 0..lip.width() {
                if let Some(i) = lip.point_index(x, y) {
                    all += 1;
                    same += usize::from(scene.point_labels[i as usize] == scene.rgb_labels[(y * lip.width() + x) as usize]);
                }
            }
        }
        same as f64 / all as f64
    };
    let off = perturb(truth, &Vector6::new(0.0, 0.03, 0.0, 0.1, 0.0, 0.0));
    let (at_truth, at_off) = (agree(truth), agree(&off));
    assert!(at_truth > 0.97 && at_off < at_truth - 0.05, "{at_truth} {at_off}");
}

#[tokio::test]
async fn malformed_pose_is_unprocessable() {
    let (router, id, scene) = with_session().await;
    let short = pose_query(&truth_values(&scene)[..15]);
    for uri in [
        format!("/session/{id}/overlay?pose={short}&alpha=0.5"),
        format!("/session/{id}/lip?pose={short}"),
        format!("/session/{id}/lip?pose=1,2,x"),
        format!("/session/{id}/lip?pose={}", pose_query(&[2.0; 16])),
    ] {
        let r = send(&router, "GET", &uri, None).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{uri}");
        assert_eq!(r.json()["kind"], "MalformedPose");
    }
    let r = send(
        &router,
        "GET",
        &format!("/session/{id}/overlay?pose={}&alpha=1.5", pose_query(&truth_values(&scene))),
        None,
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    golden_shape("error.shape.json", &r.json());
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let (router, _) = app(ServerConfig::default());
    for (method, uri) in [
        ("POST", "/session/nope/calibrate"),
        ("GET", "/session/nope/lip?pose=1"),
        ("GET", "/session/nope/overlay?pose=1"),
        ("GET", "/session/nope/matches"),
    ] {
        let r = send(&router, method, uri, None).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(r.json()["kind"], "UnknownSession");
    }
    let r = send(&router, "POST", "/session/nope/manual-picks", Some(json!({"picks": []}))).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn idle_sessions_expire() {
    let scene = scene();
    let (router, state) = app(ServerConfig {
        ttl: Duration::from_millis(50),
        ..ServerConfig::default()
    });
    let id = state.insert_session(Session::new(scene.pair.clone(), None));
    tokio::time::sleep(Duration::from_millis(120)).await;
    let r = send(&router, "GET", &format!("/session/{id}/matches"), None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}

struct Slow(lcec::io::SyntheticMaskProvider);

impl MaskProvider for Slow {
    fn provide_masks(&self, request: &MaskRequest<'_>) -> Result<MaskSet, MaskError> {
        std::thread::sleep(Duration::from_millis(400));
        self.0.provide_masks(request)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn calibrate_is_single_flight() {
    let scene = scene();
    let (router, state) = app(ServerConfig::default());
    let id = state.insert_session(Session::new(scene.pair.clone(), Some(Arc::new(Slow(scene.mask_provider())))));
    let other = state.insert_session(Session::new(scene.pair.clone(), Some(Arc::new(scene.mask_provider()))));
    let uri = format!("/session/{id}/calibrate");
    let first = {
        let (router, uri) = (router.clone(), uri.clone());
        tokio::spawn(async move { send(&router, "POST", &uri, Some(json!({"iterations": 1}))).await })
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    let second = send(&router, "POST", &uri, Some(json!({"iterations": 1}))).await;
    assert_eq!(second.status, StatusCode::CONFLICT);
    assert_eq!(second.json()["kind"], "CalibrationRunning");

    // other sessions and read-only endpoints are not blocked
    let q = pose_query(&truth_values(&scene));
    let lip = send(&router, "GET", &format!("/session/{id}/lip?pose={q}"), None).await;
    assert_eq!(lip.status, StatusCode::OK);
    let parallel = send(&router, "POST", &format!("/session/{other}/calibrate"), Some(json!({"iterations": 1}))).await;
    assert_eq!(parallel.status, StatusCode::OK);

    assert_eq!(first.await.unwrap().status, StatusCode::OK);
    let again = send(&router, "POST", &uri, Some(json!({"iterations": 1}))).await;
    assert_eq!(again.status, StatusCode::OK);
}

#[tokio::test]
async fn unreachable_segmenter_is_a_bad_gateway() {
    let scene = scene();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut body = session_body(&scene);
    body["masks"] = json!({"remote": {"url": format!("http://127.0.0.1:{port}"), "timeout_ms": 2000}});
    let (router, _) = app(ServerConfig::default());
    let id = send(&router, "POST", "/session", Some(body)).await.json()["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let r = send(&router, "POST", &format!("/session/{id}/calibrate"), None).await;
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);
    assert_eq!(r.json()["kind"], "ProviderUnavailable");
}

/// Eight cloud points spread over the image by farthest-point sampling.
fn grid_picks(scene: &lcec::io::SyntheticScene) -> Vec<(Vector2<f64>, usize)> {
    let truth = scene.pair.truth_extrinsics.as_ref().unwrap();
    let k = &scene.pair.intrinsics;
    let projected: Vec<(Vector2<f64>, usize)> = scene
        .pair
        .cloud
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_point(&truth.transform_point(&p.position), k).ok().map(|q| (q, i)))
        .filter(|(q, _)| k.contains(q))
        .collect();
    let mut picks = vec![projected[0]];
    while picks.len() < 8 {
        let next = projected
            .iter()
            .max_by(|a, b| {
                let d = |p: &Vector2<f64>| picks.iter().map(|(q, _)| (p - q).norm()).fold(f64::INFINITY, f64::min);
                d(&a.0).total_cmp(&d(&b.0))
            })
            .unwrap();
        picks.push(*next);
    }
    picks
}

#[tokio::test]
async fn manual_picks_recover_the_pose() {
    let scene = desk_scene();
    let (router, _) = app(ServerConfig::default());
    let r = send(&router, "POST", "/session", Some(session_body(&scene))).await;
    let id = r.json()["session_id"].as_str().unwrap().to_string();
    let picks = grid_picks(&scene);
    assert_eq!(picks.len(), 8);
    let noise = [(1.4, 1.4), (-2.0, 0.0), (0.0, 2.0), (-1.4, -1.4), (2.0, 0.0), (1.4, -1.4), (0.0, -2.0), (-1.4, 1.4)];
    let body = json!({
        "picks": picks.iter().zip(noise).map(|((q, i), n)| {
            let p = scene.pair.cloud[*i].position;
            json!({"pixel": [q.x + n.0, q.y + n.1], "lidar": [p.x, p.y, p.z]})
        }).collect::<Vec<_>>()
    });
    let r = send(&router, "POST", &format!("/session/{id}/manual-picks"), Some(body)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    assert_eq!(v["pose"].as_array().unwrap().len(), 16);
    assert_eq!(v["residuals"].as_array().unwrap().len(), 8);
    assert!(v["rotation_error_deg"].as_f64().unwrap() <= 1.0, "{}", v["rotation_error_deg"]);
    assert!(v["translation_error_m"].as_f64().unwrap() <= 0.1, "{}", v["translation_error_m"]);
    assert!(v["solution"]["mean_reproj_error"].as_f64().unwrap() <= 5.0);
    golden_shape("manual_picks.shape.json", &v);
}

#[tokio::test]
async fn manual_picks_on_the_lip() {
    let (router, id, scene) = with_session().await;
    let truth = truth_values(&scene);
    let picks = grid_picks(&scene);
    // exact picks clicked on a LIP rendered at the truth resolve to the same points
    let body = json!({
        "lip_pose": truth,
        "picks": picks.iter().map(|(q, _)| json!({"pixel": [q.x, q.y], "lip_pixel": [q.x, q.y]})).collect::<Vec<_>>(),
    });
    let r = send(&router, "POST", &format!("/session/{id}/manual-picks"), Some(body)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    let v = r.json();
    let satisfied = v["satisfied"].as_array().unwrap();
    assert!(satisfied.iter().filter(|s| s.as_bool().unwrap()).count() >= 6);

    let few = json!({"picks": [{"pixel": [1.0, 1.0], "lidar": [5.0, 0.0, 0.0]}]});
    let r = send(&router, "POST", &format!("/session/{id}/manual-picks"), Some(few)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let unresolved = json!({"picks": [{"pixel": [1.0, 1.0]}]});
    let r = send(&router, "POST", &format!("/session/{id}/manual-picks"), Some(unresolved)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["kind"], "MalformedPick");
}
