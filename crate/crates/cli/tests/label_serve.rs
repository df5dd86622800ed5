use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use platerim::serve::{bind_address, router, LabelStore};
use platerim::ServeArgs;
use platerim_core::pipeline::{decode_png, load_manifest, render_dataset, save_manifest, SyntheticConfig};
use platerim_core::victims::{Alphabet, RenderConfig};
use tower::ServiceExt;

fn dataset(dir: &Path, count: usize) -> std::path::PathBuf {
    let cfg = SyntheticConfig { count, labeled: false, ..SyntheticConfig::default() };
    let render = RenderConfig { height: 64, width: 64, ..RenderConfig::default() };
    render_dataset(dir, &cfg, &render, &Alphabet::default(), 3).unwrap()
}

fn app(manifest: &Path) -> Router {
    router(Arc::new(LabelStore::open(manifest).unwrap()), None)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(id: &str, body: &str) -> Request<Body> {
    Request::post(format!("/api/images/{id}/label"))
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn listing(app: &Router) -> Vec<(String, bool)> {
    let (status, body) = send(app, get("/api/images")).await;
    assert_eq!(status, StatusCode::OK);
    let v: Vec<serde_json::Value> = serde_json::from_slice(&body).unwrap();
    v.iter().map(|e| (e["id"].as_str().unwrap().to_string(), e["labeled"].as_bool().unwrap())).collect()
}

#[tokio::test]
async fn listing_and_labeling() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 3);
    let app = app(&manifest);
    let before = listing(&app).await;
    assert_eq!(before.len(), 3);
    assert!(before.iter().all(|(_, l)| !l));

    let body = r#"{"corners": [[10.25, 20], [50, 21.5], [49, 40], [11, 39.75]]}"#;
    let (status, _) = send(&app, post("syn00001", body)).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let after = listing(&app).await;
    assert_eq!(after[1], ("syn00001".to_string(), true));
    assert!(!after[0].1 && !after[2].1);

    let entries = load_manifest(&manifest).unwrap();
    let corners: [[f64; 2]; 4] = entries[1].corners.unwrap().into();
    assert_eq!(corners, [[10.25, 20.0], [50.0, 21.5], [49.0, 40.0], [11.0, 39.75]]);
    assert!(entries[0].corners.is_none());
}

#[tokio::test]
async fn bad_label_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 1);
    let app = app(&manifest);
    let original = std::fs::read(&manifest).unwrap();
    for body in [
        r#"{"corners": [[1, 1], [9, 1], [9, 9]]}"#,
        r#"{"corners": [[1, 1], [9, 1], [9, 9], [1, 9], [5, 5]]}"#,
        r#"{"corners": [[1, 1], [9, 9], [9, 1], [1, 9]]}"#,
        r#"{"corners": [[1, 1], [90, 1], [90, 9], [1, 9]]}"#,
        r#"{"corners": [[-1, 1], [9, 1], [9, 9], [1, 9]]}"#,
        r#"{"corners": [[1, 1], [9, 1], [9, 9], [1, "x"]]}"#,
        r#"{"corners": [[1, 1], [9, 1], [9, 9], [1, 9]], "extra": 1}"#,
        r#"[[1, 1], [9, 1], [9, 9], [1, 9]]"#,
        "not json",
        "",
    ] {
        let (status, _) = send(&app, post("syn00000", body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    }
    let (status, _) = send(&app, post("nope", r#"{"corners": [[1, 1], [9, 1], [9, 9], [1, 9]]}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(std::fs::read(&manifest).unwrap(), original);
}

#[tokio::test]
async fn last_write_wins() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2);
    let app = app(&manifest);
    let first = r#"{"corners": [[1, 1], [9, 1], [9, 9], [1, 9]]}"#;
    let second = r#"{"corners": [[2, 2], [30, 2], [30, 12], [2, 12]]}"#;
    assert_eq!(send(&app, post("syn00000", first)).await.0, StatusCode::NO_CONTENT);
    assert_eq!(send(&app, post("syn00000", second)).await.0, StatusCode::NO_CONTENT);
    let c: [[f64; 2]; 4] = load_manifest(&manifest).unwrap()[0].corners.unwrap().into();
    assert_eq!(c, [[2.0, 2.0], [30.0, 2.0], [30.0, 12.0], [2.0, 12.0]]);

    // Concurrent writers to different entries are serialized; neither is lost.
    let (a, b) = tokio::join!(send(&app, post("syn00000", first)), send(&app, post("syn00001", second)));
    assert_eq!((a.0, b.0), (StatusCode::NO_CONTENT, StatusCode::NO_CONTENT));
    assert!(load_manifest(&manifest).unwrap().iter().all(|e| e.corners.is_some()));
}

#[tokio::test]
async fn image_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 2);
    let app = app(&manifest);
    let res = app.clone().oneshot(get("/api/images/syn00000/file")).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()["content-type"], "image/png");
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(decode_png(&bytes).unwrap().shape(), [3, 64, 64]);

    for uri in [
        "/api/images/nope/file",
        "/api/images/..%2Fmanifest.json/file",
        "/api/images/..%2F..%2F..%2F..%2Fetc%2Fpasswd/file",
        "/api/images/%2Fetc%2Fpasswd/file",
    ] {
        assert_eq!(send(&app, get(uri)).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn entries_pointing_outside_the_root_are_not_served() {
    let outer = tempfile::tempdir().unwrap();
    let root = outer.path().join("data");
    let manifest = dataset(&root, 1);
    std::fs::copy(root.join("images/syn00000.png"), outer.path().join("secret.png")).unwrap();
    let mut entries = load_manifest(&manifest).unwrap();
    let mut escape = entries[0].clone();
    escape.id = "escape".into();
    escape.image = "../secret.png".into();
    let mut absolute = entries[0].clone();
    absolute.id = "absolute".into();
    absolute.image = outer.path().join("secret.png");
    entries.extend([escape, absolute]);
    save_manifest(&manifest, &entries).unwrap();
    let app = app(&manifest);
    for id in ["escape", "absolute"] {
        assert_eq!(send(&app, get(&format!("/api/images/{id}/file"))).await.0, StatusCode::NOT_FOUND);
        let body = r#"{"corners": [[1, 1], [9, 1], [9, 9], [1, 9]]}"#;
        assert_eq!(send(&app, post(id, body)).await.0, StatusCode::NOT_FOUND);
    }
    assert_eq!(send(&app, get("/api/images/syn00000/file")).await.0, StatusCode::OK);
}

#[tokio::test]
async fn empty_manifest_and_read_failures() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, "[]").unwrap();
    let app = app(&manifest);
    assert_eq!(listing(&app).await, vec![]);
    std::fs::write(&manifest, "{ broken").unwrap();
    assert_eq!(send(&app, get("/api/images")).await.0, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(LabelStore::open(&dir.path().join("missing.json")).is_err());
}

#[tokio::test]
async fn static_assets() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path(), 1);
    let (status, body) = send(&app(&manifest), get("/")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/api/images"));

    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<p>client</p>").unwrap();
    std::fs::write(assets.path().join("app.js"), "console.log(1)").unwrap();
    let app = router(Arc::new(LabelStore::open(&manifest).unwrap()), Some(assets.path()));
    assert_eq!(send(&app, get("/")).await.1, b"<p>client</p>");
    assert_eq!(send(&app, get("/app.js")).await.1, b"console.log(1)");
    assert_eq!(send(&app, get("/api/images")).await.0, StatusCode::OK);
}

#[test]
fn loopback_unless_allowed() {
    let args = |host: &str, allow_remote| ServeArgs {
        manifest: "m.json".into(),
        port: 8077,
        host: host.parse().unwrap(),
        allow_remote,
        static_dir: None,
    };
    assert_eq!(bind_address(&args("127.0.0.1", false)).unwrap().to_string(), "127.0.0.1:8077");
    assert!(bind_address(&args("::1", false)).is_ok());
    assert!(bind_address(&args("0.0.0.0", false)).is_err());
    assert!(bind_address(&args("0.0.0.0", true)).is_ok());
}
