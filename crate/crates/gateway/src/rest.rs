//! HTTP API: card status, files on the FAT volume, raw blocks, switch and faults.
//!
//! Every request that touches the card takes the grant for the duration of
//! the request and hands it back to the DUT when the response is ready.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use log::debug;
use netsd_core::faults::FaultError;
use netsd_core::sd::BLOCK_LEN;
use netsd_core::{ArbiterError, DirEntry, FatError, FatVolume, FaultRequest, FaultSpec, HostError, HostStats, PortId};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::state::{GatewayState, RagSession};

/// Largest request body, and the largest file accepted.
pub const MAX_BODY: usize = 64 << 20;
/// Most blocks returned by one block read.
pub const MAX_BLOCKS: u64 = 2048;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ArbiterError> for ApiError {
    fn from(e: ArbiterError) -> Self {
        let status = match &e {
            ArbiterError::GrantTimeout | ArbiterError::Fault(FaultError::Disabled) => StatusCode::CONFLICT,
            ArbiterError::Fault(FaultError::UnknownId(_)) => StatusCode::NOT_FOUND,
            ArbiterError::Fault(FaultError::InvalidSpec(_)) | ArbiterError::Switch(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ArbiterError::Card(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<HostError> for ApiError {
    fn from(e: HostError) -> Self {
        match e {
            HostError::Arbiter(a) => a.into(),
            HostError::AddressError { .. } => ApiError::new(StatusCode::RANGE_NOT_SATISFIABLE, e.to_string()),
            HostError::InvalidChunk(_) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl From<FatError> for ApiError {
    fn from(e: FatError) -> Self {
        let status = match &e {
            FatError::NotFound => StatusCode::NOT_FOUND,
            FatError::NoSpace => StatusCode::PAYLOAD_TOO_LARGE,
            FatError::IoError(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` on a blocking thread with the card held by the gateway.
async fn with_card<T, F>(state: &Arc<GatewayState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut RagSession) -> ApiResult<T> + Send + 'static,
{
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || {
        let mut session = state.rag_session("http")?;
        let out = f(&mut session);
        session.lease.touch();
        out
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Runs `f` on a blocking thread without taking the card.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/api/v1/status", get(status))
        .route("/api/v1/files", get(list_root))
        .route("/api/v1/files/", get(list_root))
        .route("/api/v1/files/{*path}", get(get_file).put(put_file).delete(delete_file))
        .route("/api/v1/blocks/{lba}", get(get_blocks).put(put_blocks))
        .route("/api/v1/switch", post(switch))
        .route("/api/v1/power/cycle", post(power_cycle))
        .route("/api/v1/faults", get(list_faults).post(add_fault))
        .route("/api/v1/faults/{id}", axum::routing::delete(cancel_fault))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

#[derive(Serialize)]
pub struct Status {
    pub holder: Option<PortId>,
    pub lease_owner: Option<String>,
    pub queue: u64,
    pub power_cycles: u64,
    pub card_powered: bool,
    pub sim_time_us: f64,
    pub transactions: u64,
    pub capacity_bytes: u64,
    pub modes: serde_json::Value,
    pub nbd_session: Option<u64>,
    pub faults: Vec<FaultSpec>,
    pub gateway_stats: HostStats,
}

async fn status(State(state): State<Arc<GatewayState>>) -> ApiResult<Json<Status>> {
    let s = Arc::clone(&state);
    blocking(move || {
        let lease_owner = s.arbiter.lease_owner();
        let queue = s.arbiter.queue_len();
        let gateway_stats = *s.stats();
        let bed = s.arbiter.lock();
        Ok(Json(Status {
            holder: bed.current_grant().holder,
            lease_owner,
            queue,
            power_cycles: bed.switch().power_cycles(),
            card_powered: bed.switch().card_powered(),
            sim_time_us: bed.now_us(),
            transactions: bed.tx_count(),
            capacity_bytes: bed.card().capacity_bytes(),
            modes: json!({
                "dut": bed.mode(PortId::DUT),
                "rag": bed.mode(PortId::RAG),
            }),
            nbd_session: s.nbd_connection(),
            faults: bed.list_faults(),
            gateway_stats,
        }))
    })
    .await
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dir: bool,
    pub size: u32,
}

impl From<&DirEntry> for Entry {
    fn from(e: &DirEntry) -> Self {
        Entry {
            name: e.name.clone(),
            dir: e.is_dir(),
            size: e.size_bytes,
        }
    }
}

fn listing(entries: &[DirEntry]) -> Vec<Entry> {
    entries
        .iter()
        .filter(|e| e.name != "." && e.name != "..")
        .map(Entry::from)
        .collect()
}

#[derive(Deserialize)]
struct PathQuery {
    #[serde(default)]
    path: String,
}

async fn list_root(State(state): State<Arc<GatewayState>>, Query(q): Query<PathQuery>) -> ApiResult<Response> {
    with_card(&state, move |s| {
        let mut vol = FatVolume::mount(&mut s.host)?;
        Ok(Json(listing(&vol.list_dir(&q.path)?)).into_response())
    })
    .await
}

async fn get_file(State(state): State<Arc<GatewayState>>, Path(path): Path<String>) -> ApiResult<Response> {
    with_card(&state, move |s| {
        let mut vol = FatVolume::mount(&mut s.host)?;
        if vol.stat(&path)?.is_dir() {
            return Ok(Json(listing(&vol.list_dir(&path)?)).into_response());
        }
        let data = vol.read_file(&path)?;
        Ok(([(header::CONTENT_TYPE, "application/octet-stream")], data).into_response())
    })
    .await
}

async fn put_file(
    State(state): State<Arc<GatewayState>>,
    Path(path): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    with_card(&state, move |s| {
        let mut vol = FatVolume::mount(&mut s.host)?;
        let existed = match vol.stat(&path) {
            Ok(e) if e.is_dir() => return Err(FatError::IsADirectory.into()),
            Ok(_) => true,
            Err(FatError::NotFound) => false,
            Err(e) => return Err(e.into()),
        };
        let entry = vol.write_file(&path, &body)?;
        vol.flush()?;
        debug!("http: wrote {path} ({} bytes)", body.len());
        let code = if existed { StatusCode::OK } else { StatusCode::CREATED };
        Ok((code, Json(Entry::from(&entry))).into_response())
    })
    .await
}

async fn delete_file(State(state): State<Arc<GatewayState>>, Path(path): Path<String>) -> ApiResult<StatusCode> {
    with_card(&state, move |s| {
        let mut vol = FatVolume::mount(&mut s.host)?;
        vol.delete_file(&path)?;
        vol.flush()?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

#[derive(Deserialize)]
struct CountQuery {
    count: Option<u64>,
}

async fn get_blocks(
    State(state): State<Arc<GatewayState>>,
    Path(lba): Path<u64>,
    Query(q): Query<CountQuery>,
) -> ApiResult<Response> {
    let count = q.count.unwrap_or(1);
    if count == 0 || count > MAX_BLOCKS {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("count must be between 1 and {MAX_BLOCKS}"),
        ));
    }
    with_card(&state, move |s| {
        let chunk = s.host.config().max_command_bytes;
        let data = s.host.read(lba, count, chunk)?;
        Ok(([(header::CONTENT_TYPE, "application/octet-stream")], data).into_response())
    })
    .await
}

async fn put_blocks(
    State(state): State<Arc<GatewayState>>,
    Path(lba): Path<u64>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    if body.is_empty() || body.len() % BLOCK_LEN != 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("body length {} is not a positive multiple of {BLOCK_LEN}", body.len()),
        ));
    }
    with_card(&state, move |s| {
        let chunk = s.host.config().max_command_bytes;
        s.host.write(lba, &body, chunk)?;
        s.host.arbiter().lock().flush()?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

#[derive(Deserialize)]
struct SwitchBody {
    port: PortId,
}

async fn switch(State(state): State<Arc<GatewayState>>, Json(body): Json<SwitchBody>) -> ApiResult<Response> {
    let s = Arc::clone(&state);
    blocking(move || {
        if let Some(owner) = s.arbiter.lease_owner() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("card is leased by {owner}"),
            ));
        }
        let grant = s.arbiter.lock().grant(body.port)?;
        Ok(Json(grant).into_response())
    })
    .await
}

async fn power_cycle(State(state): State<Arc<GatewayState>>) -> ApiResult<Response> {
    let s = Arc::clone(&state);
    blocking(move || {
        let mut bed = s.arbiter.lock();
        bed.power_cycle();
        Ok(Json(json!({ "power_cycles": bed.switch().power_cycles() })).into_response())
    })
    .await
}

async fn list_faults(State(state): State<Arc<GatewayState>>) -> ApiResult<Json<Vec<FaultSpec>>> {
    let s = Arc::clone(&state);
    blocking(move || Ok(Json(s.arbiter.lock().list_faults()))).await
}

async fn add_fault(
    State(state): State<Arc<GatewayState>>,
    Json(req): Json<FaultRequest>,
) -> ApiResult<(StatusCode, Json<FaultSpec>)> {
    let s = Arc::clone(&state);
    blocking(move || {
        let mut bed = s.arbiter.lock();
        let id = bed.schedule_fault(req)?;
        let spec = bed
            .list_faults()
            .into_iter()
            .find(|f| f.id == id)
            .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "scheduled fault vanished"))?;
        Ok((StatusCode::CREATED, Json(spec)))
    })
    .await
}

async fn cancel_fault(State(state): State<Arc<GatewayState>>, Path(id): Path<u64>) -> ApiResult<Response> {
    let s = Arc::clone(&state);
    blocking(move || {
        let status = s.arbiter.lock().cancel_fault(id)?;
        Ok(Json(json!({ "id": id, "status": status })).into_response())
    })
    .await
}
