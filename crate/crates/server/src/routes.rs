use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use qdachain::codebook::{self, RenderFormat};
use qdachain::engine::session_summary;
use qdachain::hierarchy::Mutation;
use qdachain::ids::{DocumentId, PromptId, SessionId, VersionId};
use qdachain::theme_map::emit_dot;
use qdachain::{Engine, ResearchQuestion, SourceDocument, Stage, StageParameters};

use crate::api_error::ApiError;
use crate::ops::{OpRegistry, OpStatus};

pub struct AppState {
    pub engine: Arc<Engine>,
    pub ops: OpRegistry,
}

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route(
            "/healthz",
            get(|| async { Json(json!({ "status": "ok" })) }),
        )
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stages/{action}", post(start_stage_op))
        .route("/ops/{op_id}", get(get_op))
        .route("/sessions/{id}/units/{unit_id}", patch(edit_unit))
        .route("/sessions/{id}/memos", post(add_memo))
        .route("/sessions/{id}/prompts", post(issue_prompt))
        .route(
            "/sessions/{id}/coverage",
            get(get_coverage).post(record_coverage),
        )
        .route("/sessions/{id}/theme-map.dot", get(get_theme_map))
        .route("/sessions/{id}/versions", post(save_version))
        .route("/sessions/{id}/export", get(get_export))
        .route("/sessions/{id}/exports", post(record_export))
        .route("/sessions/{id}/trail", get(get_trail))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

fn parse_body<T: DeserializeOwned + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn parse_stage(s: &str) -> ApiResult<Stage> {
    s.parse()
        .map_err(|_| ApiError::bad_request(format!("unknown stage `{s}`")))
}

fn session_document(session: &qdachain::AnalysisSession) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        session.to_document(),
    )
        .into_response()
}

async fn list_sessions(State(app): Shared) -> ApiResult<Json<Value>> {
    let mut out = Vec::new();
    for id in app.engine.list_sessions()? {
        out.push(session_summary(&app.engine.session(&id)?));
    }
    Ok(Json(json!({ "sessions": out })))
}

#[derive(Debug, Default, Deserialize)]
struct DocumentInput {
    id: String,
    #[serde(default)]
    title: Option<String>,
    body: String,
}

#[derive(Debug, Default, Deserialize)]
struct CreateSession {
    documents: Vec<DocumentInput>,
    #[serde(default)]
    research_questions: Vec<ResearchQuestion>,
}

async fn create_session(State(app): Shared, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    let documents = req
        .documents
        .into_iter()
        .map(|d| {
            let title = d.title.unwrap_or_else(|| d.id.clone());
            SourceDocument::new(DocumentId(d.id), title, d.body)
        })
        .collect();
    let session = app
        .engine
        .create_session(documents, req.research_questions)?;
    let mut resp = session_document(&session);
    *resp.status_mut() = StatusCode::CREATED;
    Ok(resp)
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(session_document(&app.engine.session(&SessionId(id))?))
}

#[derive(Debug, Default, Deserialize)]
struct StageOpRequest {
    #[serde(default)]
    number_of_codes: Option<u32>,
    #[serde(default)]
    user_prompt: Option<String>,
    /// Regenerate with a previously issued prompt.
    #[serde(default)]
    prompt_id: Option<PromptId>,
}

/// `POST /sessions/{id}/stages/{stage}:run` and `{stage}:nudge`.
async fn start_stage_op(
    State(app): Shared,
    Path((id, action)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Response> {
    let (stage, verb) = action
        .split_once(':')
        .ok_or_else(|| ApiError::not_found(format!("expected `<stage>:run`, got `{action}`")))?;
    let stage = parse_stage(stage)?;
    if !matches!(verb, "run" | "nudge") {
        return Err(ApiError::not_found(format!(
            "unknown stage action `{verb}`"
        )));
    }
    let req: StageOpRequest = parse_body(&body)?;
    let session_id = SessionId(id);
    // Claim the session before answering so a concurrent start sees `busy`.
    let reservation = app.engine.reserve(&session_id)?;
    let record = app.ops.open(session_id.as_str(), stage.as_str(), verb);
    let op_id = record.op_id.clone();
    let worker = app.clone();
    let verb = verb.to_owned();
    app.ops.spawn_blocking(move || {
        let engine = &worker.engine;
        let outcome = catch_unwind(AssertUnwindSafe(|| match (verb.as_str(), req.prompt_id) {
            ("nudge", _) => engine.generate_nudge_reserved(&reservation, stage).map(|nudge| {
                json!({ "session": format!("/sessions/{}", session_id), "stage": stage, "nudge": nudge })
            }),
            (_, Some(prompt_id)) => engine.regenerate_reserved(&reservation, &prompt_id).map(|run| run_ref(&run)),
            (_, None) => {
                let params = StageParameters {
                    number_of_codes: req.number_of_codes,
                    user_prompt: req.user_prompt,
                };
                engine.run_stage_reserved(&reservation, stage, params).map(|run| run_ref(&run))
            }
        }));
        drop(reservation);
        let status = match outcome {
            Ok(Ok(result_ref)) => OpStatus::Done { result_ref },
            Ok(Err(e)) => OpStatus::Failed { error: e.into() },
            Err(_) => OpStatus::Failed {
                error: ApiError::new("internal", "chain operation panicked"),
            },
        };
        worker.ops.finish(&op_id, status);
    });
    let body = json!({ "op_id": record.op_id, "status": "pending", "status_url": format!("/ops/{}", record.op_id) });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

fn run_ref(run: &qdachain::StageRun) -> Value {
    json!({
        "session": format!("/sessions/{}", run.session.id),
        "stage": run.stage,
        "seq": run.seq,
        "prompt_id": run.prompt_id,
        "warnings": run.warnings,
    })
}

async fn get_op(State(app): Shared, Path(op_id): Path<String>) -> ApiResult<Json<Value>> {
    let record = app
        .ops
        .get(&op_id)
        .ok_or_else(|| ApiError::new("unknown_op", format!("unknown operation `{op_id}`")))?;
    Ok(Json(
        serde_json::to_value(record).expect("op record serializes"),
    ))
}

#[derive(Debug, Deserialize)]
struct EditRequest {
    #[serde(default)]
    stage: Option<Stage>,
    mutation: Mutation,
}

impl Default for EditRequest {
    fn default() -> Self {
        Self {
            stage: None,
            mutation: Mutation::DeleteUnit { cascade: false },
        }
    }
}

/// The stage owning a unit id, from its prefix.
fn stage_of(unit_id: &str) -> Option<Stage> {
    let prefix = unit_id.rsplit_once('-')?.0;
    match prefix {
        "code" => Some(Stage::Codes),
        "subtheme" => Some(Stage::Subthemes),
        "theme" => Some(Stage::Themes),
        _ => None,
    }
}

async fn edit_unit(
    State(app): Shared,
    Path((id, unit_id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::bad_request("missing edit body"));
    }
    let req: EditRequest = parse_body(&body)?;
    let stage = req
        .stage
        .or_else(|| stage_of(&unit_id))
        .ok_or_else(|| ApiError::bad_request("cannot infer the stage; pass `stage`"))?;
    let result = app
        .engine
        .edit_unit(&SessionId(id), stage, &unit_id, req.mutation)?;
    Ok(Json(
        json!({ "seq": result.seq, "outcome": result.outcome }),
    ))
}

#[derive(Debug, Deserialize)]
struct MemoRequest {
    stage: Stage,
    text: String,
}

impl Default for MemoRequest {
    fn default() -> Self {
        Self {
            stage: Stage::Codes,
            text: String::new(),
        }
    }
}

async fn add_memo(State(app): Shared, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: MemoRequest = parse_body(&body)?;
    let memo = app.engine.add_memo(&SessionId(id), req.stage, &req.text)?;
    Ok((StatusCode::CREATED, Json(memo)).into_response())
}

#[derive(Debug, Deserialize)]
struct PromptRequest {
    stage: Stage,
    text: String,
    #[serde(default)]
    number_of_codes: Option<u32>,
}

impl Default for PromptRequest {
    fn default() -> Self {
        Self {
            stage: Stage::Codes,
            text: String::new(),
            number_of_codes: None,
        }
    }
}

async fn issue_prompt(
    State(app): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: PromptRequest = parse_body(&body)?;
    let prompt =
        app.engine
            .issue_prompt(&SessionId(id), req.stage, &req.text, req.number_of_codes)?;
    Ok((StatusCode::CREATED, Json(prompt)).into_response())
}

async fn get_coverage(State(app): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let report = app.engine.coverage(&SessionId(id))?;
    Ok(Json(
        serde_json::to_value(report).expect("report serializes"),
    ))
}

async fn record_coverage(State(app): Shared, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let report = app.engine.compute_coverage(&SessionId(id))?;
    Ok(Json(
        serde_json::to_value(report).expect("report serializes"),
    ))
}

async fn get_theme_map(State(app): Shared, Path(id): Path<String>) -> ApiResult<Response> {
    let graph = app.engine.theme_map(&SessionId(id))?;
    Ok((
        [(header::CONTENT_TYPE, "text/vnd.graphviz; charset=utf-8")],
        emit_dot(&graph),
    )
        .into_response())
}

#[derive(Debug, Default, Deserialize)]
struct VersionRequest {
    #[serde(default)]
    label: Option<String>,
}

async fn save_version(
    State(app): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: VersionRequest = parse_body(&body)?;
    let version = app.engine.save_version(&SessionId(id), req.label)?;
    Ok((StatusCode::CREATED, Json(version)).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    format: Option<String>,
}

fn export_params(q: ExportQuery) -> ApiResult<(VersionId, RenderFormat)> {
    let version = q
        .version
        .ok_or_else(|| ApiError::bad_request("missing `version`"))?;
    let format = match q.format.as_deref() {
        None => RenderFormat::Printable,
        Some(f) => RenderFormat::parse(f).ok_or_else(|| {
            ApiError::new("unsupported_format", format!("unknown export format `{f}`"))
        })?,
    };
    Ok((VersionId(version), format))
}

async fn get_export(
    State(app): Shared,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    let (version, format) = export_params(q)?;
    let codebook = app.engine.export(&SessionId(id), &version)?;
    let rendered = codebook::render(&codebook, format);
    Ok(([(header::CONTENT_TYPE, format.content_type())], rendered).into_response())
}

async fn record_export(
    State(app): Shared,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let q: ExportQuery = parse_body(&body)?;
    let (version, format) = export_params(q)?;
    let (_, rendered) = app.engine.record_export(&SessionId(id), &version, format)?;
    Ok((
        StatusCode::CREATED,
        [(header::CONTENT_TYPE, format.content_type())],
        rendered,
    )
        .into_response())
}

#[derive(Debug, Default, Deserialize)]
struct TrailQuery {
    #[serde(default)]
    from_seq: Option<u64>,
}

async fn get_trail(
    State(app): Shared,
    Path(id): Path<String>,
    Query(q): Query<TrailQuery>,
) -> ApiResult<Json<Value>> {
    let events = app.engine.trail(&SessionId(id), q.from_seq.unwrap_or(1))?;
    Ok(Json(json!({ "events": events })))
}
