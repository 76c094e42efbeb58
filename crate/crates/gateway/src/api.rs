//! REST handlers and the event stream endpoint.

use std::collections::{BTreeMap, BTreeSet};

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use cssasim_core::controller::{OperatorCommand, Topic, ViewSnapshot};
use cssasim_core::cssa::{check_policies, PolicyError};
use cssasim_core::net::{HostId, SimTime, SwitchId};
use cssasim_core::secfn::RateLimitSpec;
use cssasim_core::sim::Command;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::hub::Frame;
use crate::Gateway;

/// Close code sent to a subscriber that fell too far behind.
pub const CLOSE_SLOW_CONSUMER: u16 = 1008;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    path: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError { status, error: error.into(), path: None }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn bad_request(what: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, what)
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        let path = match &e {
            PolicyError::SchemaViolation { path, .. } => Some(path.clone()),
            _ => None,
        };
        ApiError { status: StatusCode::UNPROCESSABLE_ENTITY, error: e.to_string(), path }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error });
        if let Some(p) = self.path {
            body["path"] = json!(p);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(gw: Gateway) -> Router {
    Router::new()
        .route("/api/topology", get(topology))
        .route("/api/flows", get(flows))
        .route("/api/alerts", get(alerts))
        .route("/api/alerts/{id}/ack", post(acknowledge))
        .route("/api/audit", get(audit))
        .route("/api/policies", get(policies).post(load_policies))
        .route("/api/policies/{id}", delete(delete_policy))
        .route("/api/hosts/{id}/isolate", post(isolate))
        .route("/api/hosts/{id}/restrict", post(restrict))
        .route("/api/scenario/{name}/start", post(start_scenario))
        .route("/api/events/fire/{name}", post(fire_event))
        .route("/api/events/clear/{name}", post(clear_event))
        .route("/api/stream", get(stream))
        .with_state(gw)
}

fn accepted(gw: &Gateway, cmd: Command) -> Response {
    let summary = match &cmd {
        Command::Operator { command } => command.summary(),
        Command::StartScenario { name } => format!("start scenario {name}"),
        Command::Inject { host, .. } => format!("inject at {host}"),
    };
    gw.commands().push(cmd);
    (StatusCode::ACCEPTED, Json(json!({ "accepted": summary }))).into_response()
}

fn operator(gw: &Gateway, command: OperatorCommand) -> Response {
    accepted(gw, Command::Operator { command })
}

#[derive(Serialize)]
struct TopologyBody {
    time: SimTime,
    controller: String,
    #[serde(flatten)]
    view: Option<ViewSnapshot>,
    isolated: Vec<HostId>,
}

async fn topology(State(gw): State<Gateway>) -> Json<TopologyBody> {
    let s = gw.snapshot().load();
    Json(TopologyBody {
        time: s.time,
        controller: s.controller.clone(),
        view: s.state.view.clone(),
        isolated: s.state.isolated.clone(),
    })
}

#[derive(Deserialize)]
struct FlowsQuery {
    switch: Option<SwitchId>,
}

async fn flows(State(gw): State<Gateway>, Query(q): Query<FlowsQuery>) -> ApiResult<Json<Value>> {
    let s = gw.snapshot().load();
    match q.switch {
        None => Ok(Json(json!(s.flows))),
        Some(id) => {
            let rules = s.flows.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown switch {id}")))?;
            Ok(Json(json!({ id.as_str(): rules })))
        }
    }
}

#[derive(Deserialize)]
struct AlertsQuery {
    state: Option<String>,
}

const ALERT_STATES: [&str; 3] = ["open", "acknowledged", "action_taken"];

async fn alerts(State(gw): State<Gateway>, Query(q): Query<AlertsQuery>) -> ApiResult<Json<Value>> {
    if let Some(st) = &q.state {
        if !ALERT_STATES.contains(&st.as_str()) {
            return Err(ApiError::bad_request(format!("unknown alert state {st:?}")));
        }
    }
    let s = gw.snapshot().load();
    let out: Vec<_> = s
        .state
        .alerts
        .iter()
        .filter(|a| q.state.as_deref().is_none_or(|st| a.state.name() == st))
        .collect();
    Ok(Json(json!(out)))
}

async fn acknowledge(State(gw): State<Gateway>, Path(id): Path<u64>) -> ApiResult<Response> {
    let s = gw.snapshot().load();
    if !s.state.alerts.iter().any(|a| a.alert_id == id) {
        return Err(ApiError::not_found(format!("unknown alert {id}")));
    }
    Ok(operator(&gw, OperatorCommand::Acknowledge { alert_id: id }))
}

#[derive(Deserialize)]
struct AuditQuery {
    from_seq: Option<u64>,
}

async fn audit(State(gw): State<Gateway>, Query(q): Query<AuditQuery>) -> Json<Value> {
    let s = gw.snapshot().load();
    let from = q.from_seq.unwrap_or(1);
    let out: Vec<_> = s.state.audit.iter().filter(|r| r.seq >= from).collect();
    Json(json!(out))
}

async fn policies(State(gw): State<Gateway>) -> Json<Value> {
    Json(json!(gw.snapshot().load().state.policies))
}

async fn load_policies(State(gw): State<Gateway>, headers: HeaderMap, body: String) -> ApiResult<Response> {
    let ctype = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("");
    let mime = ctype.split(';').next().unwrap_or("").trim();
    if mime != "application/xml" && mime != "text/xml" {
        return Err(ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "policies must be sent as application/xml"));
    }
    check_policies(&body)?;
    Ok(operator(&gw, OperatorCommand::LoadPolicies { xml: body }))
}

async fn delete_policy(State(gw): State<Gateway>, Path(id): Path<u32>) -> ApiResult<Response> {
    let s = gw.snapshot().load();
    if !s.state.policies.iter().any(|p| p.policy_id == id) {
        return Err(ApiError::not_found(format!("unknown policy {id}")));
    }
    Ok(operator(&gw, OperatorCommand::DeletePolicy { policy_id: id }))
}

fn known_host(gw: &Gateway, id: &HostId) -> ApiResult<()> {
    let s = gw.snapshot().load();
    match &s.state.view {
        Some(v) if !v.hosts.iter().any(|h| &h.id == id) => Err(ApiError::not_found(format!("unknown host {id}"))),
        _ => Ok(()),
    }
}

async fn isolate(State(gw): State<Gateway>, Path(id): Path<HostId>) -> ApiResult<Response> {
    known_host(&gw, &id)?;
    Ok(operator(&gw, OperatorCommand::Isolate { host: id }))
}

async fn restrict(
    State(gw): State<Gateway>,
    Path(id): Path<HostId>,
    Json(spec): Json<RateLimitSpec>,
) -> ApiResult<Response> {
    known_host(&gw, &id)?;
    spec.validate()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(operator(&gw, OperatorCommand::Restrict { host: id, spec }))
}

async fn start_scenario(State(gw): State<Gateway>, Path(name): Path<String>) -> ApiResult<Response> {
    if !gw.scenarios().is_empty() && !gw.scenarios().contains(&name) {
        return Err(ApiError::not_found(format!("unknown scenario {name}")));
    }
    Ok(accepted(&gw, Command::StartScenario { name }))
}

async fn fire_event(State(gw): State<Gateway>, Path(name): Path<String>) -> Response {
    operator(&gw, OperatorCommand::FireEvent { name })
}

async fn clear_event(State(gw): State<Gateway>, Path(name): Path<String>) -> Response {
    operator(&gw, OperatorCommand::ClearEvent { name })
}

/// Per-connection stream state.
#[derive(Debug, Clone)]
pub struct GatewaySession {
    pub session_id: u64,
    pub subscribed_topics: BTreeSet<Topic>,
    pub last_event_seq: BTreeMap<Topic, u64>,
}

#[derive(Deserialize)]
struct StreamQuery {
    topics: Option<String>,
}

fn parse_topics(raw: Option<&str>) -> ApiResult<BTreeSet<Topic>> {
    match raw {
        None => Ok(Topic::ALL.into_iter().collect()),
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<Topic>().map_err(ApiError::bad_request))
            .collect(),
    }
}

async fn stream(
    State(gw): State<Gateway>,
    Query(q): Query<StreamQuery>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let topics = parse_topics(q.topics.as_deref())?;
    if topics.is_empty() {
        return Err(ApiError::bad_request("no topics requested"));
    }
    // subscribe before the upgrade so nothing published after the request is missed
    let rx = gw.hub().subscribe();
    let session = GatewaySession {
        session_id: gw.next_session_id(),
        subscribed_topics: topics,
        last_event_seq: BTreeMap::new(),
    };
    Ok(ws.on_upgrade(move |socket| run_session(socket, session, rx)))
}

async fn run_session(mut socket: WebSocket, mut session: GatewaySession, mut rx: broadcast::Receiver<Frame>) {
    tracing::debug!(session = session.session_id, "stream opened");
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(frame) => {
                    if !session.subscribed_topics.contains(&frame.topic) {
                        continue;
                    }
                    let text = serde_json::to_string(&frame).expect("frame serializes");
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                    session.last_event_seq.insert(frame.topic, frame.seq);
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(session = session.session_id, missed = n, "disconnecting slow consumer");
                    let close = CloseFrame { code: CLOSE_SLOW_CONSUMER, reason: "slow consumer".into() };
                    let _ = socket.send(Message::Close(Some(close))).await;
                    break;
                }
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    break;
                }
            },
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    tracing::debug!(session = session.session_id, "stream closed");
}
