mod common;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use morphavatar_cli::service::router;
use morphavatar_cli::Avatar;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(dir: &std::path::Path, limit: usize) -> axum::Router {
    let (ck, tpl) = common::fixture(dir);
    router(Avatar::load(&ck, &tpl).unwrap(), limit)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

#[tokio::test]
async fn info_and_health() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2);
    let (s, _) = call(&app, "GET", "/healthz", "").await;
    assert_eq!(s, StatusCode::OK);
    let (s, body) = call(&app, "GET", "/info", "").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["n_e"], 50);
    assert_eq!(v["n_j"], 5);
    assert_eq!(v["joint_names"][2], "jaw");
    assert_eq!(v["canonical_pose"].as_array().unwrap().len(), 15);
    assert_eq!(v["checkpoint_hash"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn bad_requests_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 2);
    let (s, body) = call(&app, "POST", "/render", r#"{"psi": [1.0, 2.0]}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["field"], "psi");
    assert!(v["error"].as_str().unwrap().contains("psi"));

    let (s, body) = call(&app, "POST", "/render", r#"{"width": 513}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["field"], "width");

    let (s, body) = call(&app, "POST", "/render", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8(body).unwrap().contains("malformed JSON"));
}

#[tokio::test]
async fn renders_png_under_a_concurrency_limit() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), 1);
    let body = json!({"width": 12, "height": 10, "output": "mask"}).to_string();
    let jobs: Vec<_> = (0..3)
        .map(|_| {
            let app = app.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&app, "POST", "/render", &body).await })
        })
        .collect();
    let mut outputs = Vec::new();
    for j in jobs {
        let (s, png) = j.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        outputs.push(png);
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let (w, h, c, _) = morphavatar_core::render::decode_png(&outputs[0]).unwrap();
    assert_eq!((w, h, c), (12, 10, 1));
}
