//! Read-only HTTP inference service driven by the λ-tuning console.
//!
//! Routes: `GET /health`, `GET /slices`, `GET /model/info` and
//! `POST /reconstruct`. Model weights are immutable once loaded; the only
//! shared mutable state is a response cache keyed by the full request.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::header::{HeaderName, HeaderValue, CONTENT_TYPE};
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::OnceCell;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use condrecon::data::{Dataset, DatasetRecord, Split};
use condrecon::training::LogRecord;

use crate::error::{CliError, CliResult, EXIT_FAILURE};
use crate::images::{encode_png, thumbnail, THUMBNAIL_SIDE};
use crate::loading::LoadedModel;
use crate::recon::{reconstruct_slice, MapKind, Quality};

const CACHE_CAPACITY: usize = 512;
const CACHE_HEADER: &str = "x-cache";

/// A validated `POST /reconstruct` body.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconRequest {
    pub slice_id: String,
    pub lambda: f64,
    pub sigma: f64,
    pub seed: u64,
    /// Sorted, without duplicates.
    pub return_maps: Vec<MapKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    slice_id: String,
    lambda: u64,
    sigma: u64,
    seed: u64,
    maps: Vec<MapKind>,
}

impl ReconRequest {
    fn key(&self) -> CacheKey {
        CacheKey {
            slice_id: self.slice_id.clone(),
            lambda: self.lambda.to_bits(),
            sigma: self.sigma.to_bits(),
            seed: self.seed,
            maps: self.return_maps.clone(),
        }
    }

    /// Parses a JSON body, collecting one message per offending field.
    pub fn parse(body: &[u8]) -> Result<Self, BTreeMap<String, String>> {
        let mut errors = BTreeMap::new();
        let value: Value = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => {
                errors.insert("body".into(), format!("malformed JSON: {e}"));
                return Err(errors);
            }
        };
        let Some(obj) = value.as_object() else {
            errors.insert("body".into(), "expected a JSON object".into());
            return Err(errors);
        };
        for k in obj.keys() {
            if !["slice_id", "lambda", "sigma", "seed", "return_maps"].contains(&k.as_str()) {
                errors.insert(k.clone(), "unknown field".into());
            }
        }
        let slice_id = match obj.get("slice_id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(_) => {
                errors.insert("slice_id".into(), "must be a nonempty string".into());
                String::new()
            }
            None => {
                errors.insert("slice_id".into(), "required".into());
                String::new()
            }
        };
        let lambda = match obj.get("lambda").map(Value::as_f64) {
            Some(Some(l)) if (0.0..=1.0).contains(&l) => l,
            Some(Some(l)) => {
                errors.insert("lambda".into(), format!("must be in [0, 1], got {l}"));
                0.0
            }
            Some(None) => {
                errors.insert("lambda".into(), "must be a number".into());
                0.0
            }
            None => {
                errors.insert("lambda".into(), "required".into());
                0.0
            }
        };
        let sigma = match obj.get("sigma").map(Value::as_f64) {
            None => 0.0,
            Some(Some(s)) if s >= 0.0 && s.is_finite() => s,
            Some(Some(s)) => {
                errors.insert("sigma".into(), format!("must be a finite nonnegative number, got {s}"));
                0.0
            }
            Some(None) => {
                errors.insert("sigma".into(), "must be a number".into());
                0.0
            }
        };
        let seed = match obj.get("seed") {
            None => 0,
            Some(v) => v.as_u64().unwrap_or_else(|| {
                errors.insert("seed".into(), "must be a nonnegative integer".into());
                0
            }),
        };
        let mut return_maps = match obj.get("return_maps") {
            None => MapKind::ALL.to_vec(),
            Some(Value::Array(items)) => {
                let mut maps = Vec::new();
                for item in items {
                    match item.as_str().map(str::parse::<MapKind>) {
                        Some(Ok(k)) => maps.push(k),
                        Some(Err(msg)) => {
                            errors.insert("return_maps".into(), msg);
                        }
                        None => {
                            errors.insert("return_maps".into(), "entries must be strings".into());
                        }
                    }
                }
                maps
            }
            Some(_) => {
                errors.insert("return_maps".into(), "must be an array".into());
                Vec::new()
            }
        };
        return_maps.sort();
        return_maps.dedup();
        if errors.is_empty() {
            Ok(Self {
                slice_id,
                lambda,
                sigma,
                seed,
                return_maps,
            })
        } else {
            Err(errors)
        }
    }
}

#[derive(Serialize)]
struct SliceEntry {
    id: String,
    split: Split,
    height: usize,
    width: usize,
    thumbnail: String,
}

/// Everything the routes read, built once at startup.
pub struct Served {
    loaded: LoadedModel,
    dataset: Dataset,
    split: Split,
    catalog: Bytes,
    info: Bytes,
}

impl Served {
    pub fn new(loaded: LoadedModel, dataset: Dataset, split: Split) -> CliResult<Self> {
        let records = dataset.split(split);
        if records.is_empty() {
            return Err(CliError::new(crate::error::EXIT_DATA, format!("dataset has no {split:?} slices to serve")));
        }
        let slices: Vec<SliceEntry> = records
            .iter()
            .map(|r| {
                let mag = r.image_gt.magnitude();
                let range = mag.iter().cloned().fold(0.0, f64::max);
                let (height, width) = mag.dim();
                SliceEntry {
                    id: r.id.clone(),
                    split: r.split,
                    height,
                    width,
                    thumbnail: BASE64.encode(encode_png(&thumbnail(&mag, THUMBNAIL_SIDE), range)),
                }
            })
            .collect();
        let catalog = serde_json::to_vec(&json!({ "split": split, "slices": slices })).expect("catalog serializes");
        let info = serde_json::to_vec(&model_info(&loaded, split, &records)).expect("info serializes");
        Ok(Self {
            loaded,
            dataset,
            split,
            catalog: catalog.into(),
            info: info.into(),
        })
    }

    fn record(&self, id: &str) -> Option<&DatasetRecord> {
        self.dataset.get(id).filter(|r| r.split == self.split)
    }
}

fn model_info(loaded: &LoadedModel, split: Split, records: &[&DatasetRecord]) -> Value {
    let cfg = loaded.model.config();
    let epochs: Vec<Value> = loaded
        .training_log()
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Epoch {
                epoch,
                mean_loss,
                val_psnr,
                val_ssim,
                ..
            } => Some(json!({ "epoch": epoch, "mean_loss": mean_loss, "val_psnr": val_psnr, "val_ssim": val_ssim })),
            LogRecord::Step { .. } => None,
        })
        .collect();
    let best = epochs
        .iter()
        .filter_map(|e| e["val_psnr"].as_f64())
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let (height, width) = records[0].image_gt.shape();
    json!({
        "source": loaded.source(),
        "config": cfg,
        "config_hash": cfg.hash(),
        "checkpoint": loaded.meta,
        "conditioning": {
            "conditioned": cfg.is_conditioned(),
            "uses_lambda": cfg.uses_lambda(),
            "lambda_range": [0.0, 1.0],
            "training_lambda_strategy": loaded.meta.as_ref().and_then(|m| m.lambda_strategy.clone()),
        },
        "training": {
            "epochs_logged": epochs.len(),
            "best_val_psnr": best,
            "last_epoch": epochs.last(),
        },
        "dataset": { "split": split, "n_slices": records.len(), "height": height, "width": width },
    })
}

#[derive(Serialize)]
struct ReconResponse<'a> {
    slice_id: &'a str,
    lambda: f64,
    sigma: f64,
    seed: u64,
    psnr: f64,
    ssim: f64,
    zero_filled: Quality,
    data_range: f64,
    /// Model forward time for the computation that produced this body.
    latency_ms: f64,
    images: BTreeMap<&'static str, String>,
}

fn render(served: &Served, req: &ReconRequest) -> Result<Bytes, String> {
    let record = served.record(&req.slice_id).ok_or("slice vanished")?;
    let r = reconstruct_slice(&served.loaded.model, record, req.lambda, req.sigma, req.seed).map_err(|e| e.to_string())?;
    let body = ReconResponse {
        slice_id: &req.slice_id,
        lambda: req.lambda,
        sigma: req.sigma,
        seed: req.seed,
        psnr: r.quality.psnr,
        ssim: r.quality.ssim,
        zero_filled: r.zero_filled_quality,
        data_range: r.data_range,
        latency_ms: r.latency_ms,
        images: req.return_maps.iter().map(|&k| (k.name(), BASE64.encode(r.png(k)))).collect(),
    };
    serde_json::to_vec(&body).map(Bytes::from).map_err(|e| e.to_string())
}

#[derive(Default)]
pub struct AppState {
    served: OnceLock<Arc<Served>>,
    cache: Mutex<HashMap<CacheKey, Arc<OnceCell<Bytes>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes the model; later calls are ignored.
    pub fn set_ready(&self, served: Served) {
        let _ = self.served.set(Arc::new(served));
    }

    pub fn is_ready(&self) -> bool {
        self.served.get().is_some()
    }

    /// One cell per distinct request, so concurrent duplicates share a single
    /// computation and every caller sees the same bytes.
    fn cache_cell(&self, key: CacheKey) -> Arc<OnceCell<Bytes>> {
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if cache.len() >= CACHE_CAPACITY && !cache.contains_key(&key) {
            cache.clear();
        }
        cache.entry(key).or_default().clone()
    }
}

fn json_response(status: StatusCode, body: Bytes) -> Response {
    (status, [(CONTENT_TYPE, "application/json")], body).into_response()
}

fn error_response(status: StatusCode, message: &str) -> Response {
    json_response(status, serde_json::to_vec(&json!({ "error": message })).unwrap().into())
}

fn not_ready() -> Response {
    error_response(StatusCode::SERVICE_UNAVAILABLE, "model not loaded yet")
}

async fn health(State(st): State<Arc<AppState>>) -> Response {
    if st.is_ready() {
        json_response(StatusCode::OK, Bytes::from_static(br#"{"status":"ready"}"#))
    } else {
        json_response(StatusCode::SERVICE_UNAVAILABLE, Bytes::from_static(br#"{"status":"loading"}"#))
    }
}

async fn slices(State(st): State<Arc<AppState>>) -> Response {
    match st.served.get() {
        Some(s) => json_response(StatusCode::OK, s.catalog.clone()),
        None => not_ready(),
    }
}

async fn info(State(st): State<Arc<AppState>>) -> Response {
    match st.served.get() {
        Some(s) => json_response(StatusCode::OK, s.info.clone()),
        None => not_ready(),
    }
}

async fn reconstruct(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let req = match ReconRequest::parse(&body) {
        Ok(r) => r,
        Err(fields) => {
            let body = json!({ "error": "invalid request", "fields": fields });
            return json_response(StatusCode::BAD_REQUEST, serde_json::to_vec(&body).unwrap().into());
        }
    };
    let Some(served) = st.served.get().cloned() else {
        return not_ready();
    };
    if served.record(&req.slice_id).is_none() {
        return error_response(StatusCode::NOT_FOUND, &format!("unknown slice {:?}", req.slice_id));
    }
    let cell = st.cache_cell(req.key());
    let mut hit = true;
    let result = cell
        .get_or_try_init(|| {
            hit = false;
            async move {
                tokio::task::spawn_blocking(move || render(&served, &req))
                    .await
                    .map_err(|e| e.to_string())?
            }
        })
        .await;
    match result {
        Ok(bytes) => {
            let mut resp = json_response(StatusCode::OK, bytes.clone());
            resp.headers_mut()
                .insert(CACHE_HEADER, HeaderValue::from_static(if hit { "hit" } else { "miss" }));
            resp
        }
        Err(e) => {
            log::error!("reconstruction failed: {e}");
            error_response(StatusCode::INTERNAL_SERVER_ERROR, &e)
        }
    }
}

fn cors(origins: &[String]) -> CliResult<CorsLayer> {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([CONTENT_TYPE])
        .expose_headers([HeaderName::from_static(CACHE_HEADER)]);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let list = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| CliError::usage(format!("invalid CORS origin {o:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(list)))
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> CliResult<Router> {
    Ok(Router::new()
        .route("/health", get(health))
        .route("/slices", get(slices))
        .route("/model/info", get(info))
        .route("/reconstruct", post(reconstruct))
        .layer(cors(cors_origins)?)
        .with_state(state))
}

/// Port precedence: command line, then `CONDRECON_PORT`, then the config.
pub fn resolve_port(flag: Option<u16>, env: Option<&str>, configured: u16) -> CliResult<u16> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("CONDRECON_PORT={v:?} is not a port number"))),
        None => Ok(configured),
    }
}

pub const PORT_ENV: &str = "CONDRECON_PORT";

/// Binds, prints the bound address, loads the model in the background and
/// serves until `shutdown` resolves. Answers 503 until loading finishes.
pub async fn run(
    addr: (String, u16),
    cors_origins: &[String],
    load: impl FnOnce() -> CliResult<Served> + Send + 'static,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> CliResult<()> {
    let listener = tokio::net::TcpListener::bind((addr.0.as_str(), addr.1))
        .await
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("cannot bind {}:{}: {e}", addr.0, addr.1)))?;
    let local = listener
        .local_addr()
        .map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
    println!("listening on http://{local}");

    let state = Arc::new(AppState::new());
    let app = router(state.clone(), cors_origins)?;
    let (fail_tx, fail_rx) = tokio::sync::oneshot::channel::<CliError>();
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match load() {
        Ok(served) => {
            loader.set_ready(served);
            log::info!("model ready");
        }
        Err(e) => {
            let _ = fail_tx.send(e);
        }
    });
    let failure = Arc::new(Mutex::new(None));
    let slot = failure.clone();
    let stop = async move {
        tokio::select! {
            _ = shutdown => log::info!("shutting down"),
            Ok(e) = fail_rx => {
                *slot.lock().unwrap() = Some(e);
            }
        }
    };
    axum::serve(listener, app)
        .with_graceful_shutdown(stop)
        .await
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("server error: {e}")))?;
    let failed = failure.lock().unwrap().take();
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Resolves on ctrl-c or, on unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults() {
        let r = ReconRequest::parse(br#"{"slice_id":"s0","lambda":0.1}"#).unwrap();
        assert_eq!(r.sigma, 0.0);
        assert_eq!(r.seed, 0);
        assert_eq!(r.return_maps, MapKind::ALL.to_vec());
    }

    #[test]
    fn field_errors_are_named() {
        let e = ReconRequest::parse(br#"{"slice_id":"s0","lambda":1.5,"sigma":-1,"extra":1}"#).unwrap_err();
        assert!(e["lambda"].contains("[0, 1]"));
        assert!(e.contains_key("sigma"));
        assert!(e.contains_key("extra"));
        let e = ReconRequest::parse(br#"{"lambda":"x","return_maps":["phase"]}"#).unwrap_err();
        assert_eq!(e.keys().collect::<Vec<_>>(), ["lambda", "return_maps", "slice_id"]);
        assert!(ReconRequest::parse(b"{").unwrap_err().contains_key("body"));
        assert!(ReconRequest::parse(b"[1]").unwrap_err().contains_key("body"));
    }

    #[test]
    fn maps_are_canonical_in_the_cache_key() {
        let a = ReconRequest::parse(br#"{"slice_id":"s","lambda":0.5,"return_maps":["gt","recon","gt"]}"#).unwrap();
        let b = ReconRequest::parse(br#"{"slice_id":"s","lambda":0.5,"return_maps":["recon","gt"]}"#).unwrap();
        assert_eq!(a.key(), b.key());
        let c = ReconRequest::parse(br#"{"slice_id":"s","lambda":0.5,"seed":1,"return_maps":["recon","gt"]}"#).unwrap();
        assert_ne!(a.key(), c.key());
    }

    #[test]
    fn port_precedence() {
        assert_eq!(resolve_port(Some(1), Some("2"), 3).unwrap(), 1);
        assert_eq!(resolve_port(None, Some("2"), 3).unwrap(), 2);
        assert_eq!(resolve_port(None, None, 3).unwrap(), 3);
        assert_eq!(resolve_port(None, Some("x"), 3).unwrap_err().code, crate::error::EXIT_USAGE);
    }
}
