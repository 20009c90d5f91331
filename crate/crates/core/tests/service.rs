mod common;

use std::io::Read;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use trackgen::service::{encode_frames, router, AppState, Registry};
use trackgen::video::{decode_png, encode_png};

use common::*;

fn app() -> Router {
    router(AppState::new(Registry::from_pipelines(vec![
        ("alpha".into(), pipeline(1)),
        ("beta".into(), pipeline(7)),
    ])))
}

async fn send(app: Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn post(uri: &str, body: &Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn controlled_body(seed: u64) -> (Value, Vec<u8>) {
    let ep = &episodes(1, 3)[0];
    let png = encode_png(ep.video.frame(0)).unwrap();
    let body = json!({
        "mode": "controlled",
        "seed": seed,
        "model_id": "alpha",
        "content_image": B64.encode(&png),
        "tracks": ep.tracks,
    });
    (body, png)
}

#[tokio::test]
async fn health_and_models() {
    let (s, b) = send(app(), Request::get("/api/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v, json!({"status": "ok", "model_loaded": true}));

    let (s, b) = send(app(), Request::get("/api/v1/models").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|m| m["model_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["alpha", "beta"]);
    assert_eq!(v[0]["n"], N);
    assert_eq!(v[0]["stage"], "decoder");
}

#[tokio::test]
async fn controlled_generation_matches_library() {
    let (body, png) = controlled_body(11);
    let (s, b) = send(app(), post("/api/v1/generate", &body)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let v: Value = serde_json::from_slice(&b).unwrap();
    let frames: Vec<Vec<u8>> = v["frames"].as_array().unwrap().iter().map(|f| B64.decode(f.as_str().unwrap()).unwrap()).collect();
    assert_eq!(frames.len(), N);
    assert_eq!(v["meta"]["model_id"], "alpha");
    assert_eq!(v["meta"]["seed"], 11);

    let content = decode_png(&png, Some(3)).unwrap();
    let ep = &episodes(1, 3)[0];
    let direct = pipeline(1).generate_controlled(content.view(), &ep.tracks, 11).unwrap();
    assert_eq!(frames, encode_frames(&direct).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_identical_requests_agree() {
    let app = app();
    let (body, _) = controlled_body(5);
    let handles: Vec<_> = (0..4)
        .map(|_| tokio::spawn(send(app.clone(), post("/api/v1/generate", &body))))
        .collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    assert!(out.iter().all(|(s, _)| *s == StatusCode::OK));
    let first: Value = serde_json::from_slice(&out[0].1).unwrap();
    for (_, b) in &out[1..] {
        let v: Value = serde_json::from_slice(b).unwrap();
        assert_eq!(v["frames"], first["frames"]);
    }
}

#[tokio::test]
async fn unconditional_zip_holds_frames_and_meta() {
    let body = json!({"mode": "unconditional", "seed": 2, "model_id": "beta"});
    let (s, b) = send(app(), post("/api/v1/generate?format=zip", &body)).await;
    assert_eq!(s, StatusCode::OK);
    let mut zip = zip::ZipArchive::new(std::io::Cursor::new(b)).unwrap();
    let mut names: Vec<String> = (0..zip.len()).map(|i| zip.by_index(i).unwrap().name().to_string()).collect();
    names.sort();
    assert_eq!(names, ["0000.png", "0001.png", "0002.png", "0003.png", "meta.json"]);
    let mut meta = String::new();
    zip.by_name("meta.json").unwrap().read_to_string(&mut meta).unwrap();
    let meta: Value = serde_json::from_str(&meta).unwrap();
    assert_eq!(meta["model_id"], "beta");
}

#[tokio::test]
async fn validation_errors_name_fields() {
    let (s, b) = send(app(), post("/api/v1/generate", &json!({"mode": "sideways"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["error"], "validation");
    assert!(v["fields"]["mode"].is_string());
    assert!(v["fields"]["seed"].is_string());

    let (mut body, _) = controlled_body(1);
    body["tracks"]["num_frames"] = json!(N + 3);
    let (s, b) = send(app(), post("/api/v1/generate", &body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert!(v["fields"]["tracks.num_frames"].as_str().unwrap().contains("does not match model n"));

    let (mut body, _) = controlled_body(1);
    body.as_object_mut().unwrap().remove("content_image");
    let (s, b) = send(app(), post("/api/v1/generate", &body)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert!(v["fields"]["content_image"].is_string());

    let (s, _) = send(app(), Request::post("/api/v1/generate").body(Body::from("{not json")).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_model_is_404_and_empty_registry_is_503() {
    let body = json!({"mode": "unconditional", "seed": 0, "model_id": "gamma"});
    let (s, _) = send(app(), post("/api/v1/generate", &body)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let empty = router(AppState::new(Registry::default()));
    let (s, _) = send(empty.clone(), post("/api/v1/generate", &json!({"mode": "unconditional", "seed": 0}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (_, b) = send(empty, Request::get("/api/v1/health").body(Body::empty()).unwrap()).await;
    let v: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(v["model_loaded"], false);
}

#[test]
fn registry_scan_skips_broken_models() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(1).save(&dir.path().join("good")).unwrap();
    pipeline(2).save(&dir.path().join("bad")).unwrap();
    std::fs::write(dir.path().join("bad").join("content_vae.json"), "{broken").unwrap();
    let reg = Registry::scan(dir.path()).unwrap();
    let ids: Vec<String> = reg.models().into_iter().map(|m| m.model_id).collect();
    assert_eq!(ids, ["good"]);
}
