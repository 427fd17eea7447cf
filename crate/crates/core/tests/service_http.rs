use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use clickseg::io::{write_scene, LabeledScene, SceneFile};
use clickseg::model::{ModelConfig, ModelParams};
use clickseg::service::{router, AppState, ClickMutation, ModelRegistry, ServiceConfig};
use clickseg::synthdata::{generate_scene, SceneSpec};

fn scene() -> LabeledScene {
    generate_scene(&SceneSpec {
        instances: (3, 3),
        points_per_instance: (40, 40),
        floor_points: 60,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn app(cfg: ServiceConfig) -> Router {
    let mut registry = ModelRegistry::new();
    let model = ModelParams::new(ModelConfig {
        num_classes: 8,
        num_prototypes: 8,
        ..ModelConfig::tiny(2)
    })
    .unwrap();
    registry.insert("tiny", model);
    router(Arc::new(AppState::new(registry, cfg)))
}

async fn send(
    app: &Router,
    method: &str,
    uri: &str,
    body: impl Into<String>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.into()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

async fn create(app: &Router, s: &LabeledScene) -> String {
    let body = json!({ "scene": SceneFile::from_scene(s) }).to_string();
    let (status, v) = send(app, "POST", "/sessions", body).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["num_points"], s.len());
    assert_eq!(v["revision"], 0);
    v["session_id"].as_str().unwrap().to_owned()
}

fn click(s: &LabeledScene, j: usize, group: i64) -> Value {
    let p = s.cloud.positions()[j];
    json!({ "x": p[0], "y": p[1], "z": p[2], "group": group })
}

#[tokio::test]
async fn session_lifecycle() {
    let s = scene();
    let app = app(ServiceConfig::default());
    let id = create(&app, &s).await;

    let (status, v) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["result"].is_null());

    let (status, v) = send(&app, "GET", &format!("/sessions/{id}/scene"), "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["points"].as_array().unwrap().len(), s.len());
    assert!(v.get("instance_ids").is_none() && v.get("class_ids").is_none());

    let add = json!({ "add": [click(&s, 0, 0), click(&s, 45, 1)] }).to_string();
    let (status, v) = send(&app, "POST", &format!("/sessions/{id}/clicks"), add).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["revision"], 1);
    let labels = v["result"]["point_instance"].as_array().unwrap();
    assert_eq!(labels.len(), s.len());
    assert!(labels
        .iter()
        .all(|l| [-1, 0, 1].contains(&l.as_i64().unwrap())));
    assert_eq!(v["result"]["groups"], json!([0, 1]));

    let (_, v) = send(
        &app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        json!({ "remove": [0] }).to_string(),
    )
    .await;
    assert_eq!(v["revision"], 2);
    assert_eq!(v["result"]["groups"], json!([1]));

    let (_, v) = send(
        &app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        json!({ "remove": [0] }).to_string(),
    )
    .await;
    assert_eq!(v["revision"], 3);
    assert!(v["result"].is_null());

    let (status, v) = send(&app, "GET", "/models", "").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v[0]["id"], "tiny");
}

#[tokio::test]
async fn errors_are_structured() {
    let s = scene();
    let app = app(ServiceConfig::default());
    let id = create(&app, &s).await;

    let (status, v) = send(&app, "GET", "/sessions/nope/result", "").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");

    let (status, v) = send(&app, "POST", &format!("/sessions/{id}/clicks"), "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "malformed");

    let (status, v) = send(
        &app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        json!({ "remove": [3] }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"]["message"]
        .as_str()
        .unwrap()
        .contains("out of range"));

    let (status, _) = send(&app, "POST", "/sessions", json!({}).to_string()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = send(
        &app,
        "POST",
        "/sessions",
        json!({ "scene_id": "x", "model": "missing" }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // a failed mutation leaves the session untouched
    let (_, v) = send(&app, "GET", &format!("/sessions/{id}/result"), "").await;
    assert_eq!(v["revision"], 0);
}

#[tokio::test]
async fn scene_dir_and_click_log() {
    let s = scene();
    let scenes = tempfile::tempdir().unwrap();
    let logs = tempfile::tempdir().unwrap();
    write_scene(&scenes.path().join("room.json"), &s).unwrap();
    let app = app(ServiceConfig {
        scene_dir: Some(scenes.path().to_path_buf()),
        log_dir: Some(logs.path().to_path_buf()),
    });
    let (status, v) = send(
        &app,
        "POST",
        "/sessions",
        json!({ "scene_id": "room" }).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let id = v["session_id"].as_str().unwrap().to_owned();

    let (status, _) = send(
        &app,
        "POST",
        "/sessions",
        json!({ "scene_id": "../room" }).to_string(),
    )
    .await;
    assert!(status.is_client_error());

    let m = json!({ "add": [click(&s, 3, 7)] }).to_string();
    send(&app, "POST", &format!("/sessions/{id}/clicks"), m).await;
    let log = std::fs::read_to_string(logs.path().join(format!("{id}.clicks.json"))).unwrap();
    let entries: Vec<ClickMutation> = serde_json::from_str(&log).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].add[0].group, 7);
}

#[tokio::test]
async fn events_follow_mutations() {
    let s = scene();
    let app = app(ServiceConfig::default());
    let id = create(&app, &s).await;

    let req = Request::builder()
        .uri(format!("/sessions/{id}/events"))
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));
    let mut body = resp.into_body();

    send(
        &app,
        "POST",
        &format!("/sessions/{id}/clicks"),
        json!({ "add": [click(&s, 0, 0)] }).to_string(),
    )
    .await;

    let mut text = String::new();
    while !text.contains("\n\n") {
        let frame = tokio::time::timeout(Duration::from_secs(10), body.frame())
            .await
            .expect("event within 10 s")
            .unwrap()
            .unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(&String::from_utf8_lossy(&data));
        }
    }
    let payload = text.lines().find_map(|l| l.strip_prefix("data:")).unwrap();
    let event: Value = serde_json::from_str(payload.trim()).unwrap();
    assert_eq!(event["revision"], 1);
    assert_eq!(event["result"]["groups"], json!([0]));
}
