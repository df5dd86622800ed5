//! `label-serve`: HTTP corner labeling over a dataset manifest.
//!
//! The manifest file is the only state. Reads go straight to disk; label
//! writes run one at a time behind a lock and replace the file atomically.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use platerim_core::geometry::{Point, Quad};
use platerim_core::pipeline::{
    decode_png, image_dimensions, load_manifest, manifest_root, png_bytes, resolve_image, save_manifest, ManifestEntry,
};

use crate::args::ServeArgs;
use crate::error::{CliError, CliResult};

const INDEX_HTML: &str = include_str!("../assets/index.html");
const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub struct LabelStore {
    manifest: PathBuf,
    root: PathBuf,
    writer: Mutex<()>,
}

impl LabelStore {
    /// Fails if the manifest cannot be loaded now.
    pub fn open(manifest: &Path) -> CliResult<Self> {
        load_manifest(manifest)?;
        let root = manifest_root(manifest);
        let root = root.canonicalize().map_err(|e| platerim_core::Error::Path { path: root.clone(), source: e })?;
        Ok(Self { manifest: manifest.to_path_buf(), root, writer: Mutex::new(()) })
    }

    fn entries(&self) -> Result<Vec<ManifestEntry>, Response> {
        load_manifest(&self.manifest).map_err(|e| failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    }

    /// The entry's image path, if it exists inside the dataset root.
    fn image_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        let p = resolve_image(&self.root, entry).canonicalize().ok()?;
        (p.starts_with(&self.root) && p.is_file()).then_some(p)
    }
}

#[derive(Serialize)]
struct Listing<'a> {
    id: &'a str,
    labeled: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBody {
    corners: Vec<Point>,
}

fn failure(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn not_found(id: &str) -> Response {
    failure(StatusCode::NOT_FOUND, format!("no image {id:?}"))
}

async fn list(State(store): State<Arc<LabelStore>>) -> Response {
    match store.entries() {
        Ok(entries) => {
            let items: Vec<Listing> = entries.iter().map(|e| Listing { id: &e.id, labeled: e.corners.is_some() }).collect();
            Json(items).into_response()
        }
        Err(r) => r,
    }
}

async fn image_file(State(store): State<Arc<LabelStore>>, UrlPath(id): UrlPath<String>) -> Response {
    let entries = match store.entries() {
        Ok(e) => e,
        Err(r) => return r,
    };
    let Some(path) = entries.iter().find(|e| e.id == id).and_then(|e| store.image_path(e)) else {
        return not_found(&id);
    };
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(_) => return not_found(&id),
    };
    let png = if bytes.starts_with(PNG_SIGNATURE) {
        bytes
    } else {
        match decode_png(&bytes).and_then(|t| png_bytes(&t)) {
            Ok(b) => b,
            Err(e) => return failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    };
    ([(header::CONTENT_TYPE, "image/png")], png).into_response()
}

async fn label(State(store): State<Arc<LabelStore>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let _guard = store.writer.lock().await;
    let mut entries = match store.entries() {
        Ok(e) => e,
        Err(r) => return r,
    };
    let Some(idx) = entries.iter().position(|e| e.id == id) else {
        return not_found(&id);
    };
    let Some(path) = store.image_path(&entries[idx]) else {
        return not_found(&id);
    };
    let body: LabelBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return failure(StatusCode::BAD_REQUEST, format!("body must be {{\"corners\": [[x, y] x4]}}: {e}")),
    };
    if body.corners.len() != 4 {
        return failure(StatusCode::BAD_REQUEST, format!("expected 4 corners, got {}", body.corners.len()));
    }
    let (w, h) = match image_dimensions(&path) {
        Ok((w, h)) => (f64::from(w), f64::from(h)),
        Err(e) => return failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    if let Some(p) = body.corners.iter().find(|[x, y]| !(0.0..=w).contains(x) || !(0.0..=h).contains(y)) {
        return failure(StatusCode::BAD_REQUEST, format!("corner {p:?} outside the {w}x{h} image"));
    }
    let quad = match Quad::from_slice(&body.corners) {
        Ok(q) => q,
        Err(e) => return failure(StatusCode::BAD_REQUEST, e.to_string()),
    };
    entries[idx].corners = Some(quad);
    match save_manifest(&store.manifest, &entries) {
        Ok(()) => StatusCode::NO_CONTENT.into_response(),
        Err(e) => failure(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Routes over `store`; `/` serves `static_dir` or the built-in page.
pub fn router(store: Arc<LabelStore>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/images", get(list))
        .route("/api/images/{id}/file", get(image_file))
        .route("/api/images/{id}/label", post(label))
        .with_state(store);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    }
}

/// Non-loopback addresses need the explicit opt-in.
pub fn bind_address(args: &ServeArgs) -> CliResult<SocketAddr> {
    if !args.host.is_loopback() && !args.allow_remote {
        return Err(CliError::Usage(format!(
            "refusing to bind non-loopback address {} without --allow-remote",
            args.host
        )));
    }
    Ok(SocketAddr::new(args.host, args.port))
}

pub fn run(args: ServeArgs) -> CliResult<()> {
    let addr = bind_address(&args)?;
    if let Some(d) = &args.static_dir {
        if !d.is_dir() {
            return Err(CliError::Usage(format!("static directory {} does not exist", d.display())));
        }
    }
    let store = Arc::new(LabelStore::open(&args.manifest)?);
    let app = router(store, args.static_dir.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Server(format!("bind {addr}: {e}")))?;
        eprintln!("labeling {} at http://{addr}/", args.manifest.display());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Server(e.to_string()))
    })
}
