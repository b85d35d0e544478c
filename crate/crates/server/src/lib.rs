//! HTTP and WebSocket service around the session orchestrator.
//!
//! Every session owns an append-only JSONL log under the configured log
//! directory. Each event produced by the state machine is written (and
//! flushed) before it is returned to the caller or pushed to stream
//! subscribers, so a log on disk is always a prefix of what clients saw.

pub mod config;
mod routes;

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use assist_core::clientsim::{bot_respond, read_storyboard_dir, BotState, Storyboard};
use assist_core::domain::Domain;
use assist_core::orchestrator::{compute_time_metrics, create_session, OrchestratorError, SessionConfig, TimeMetrics};
use assist_core::sessionlog::{Actor, LogEvent, LogWriter, Mode};
use assist_core::simulate::derive_seed;
use assist_core::vectorcore::Schema;
use assist_core::{AdvisorBundle, Models, Session, Tagger};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};

pub use config::ServerConfig;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Failures of session operations, shared by the HTTP and stream front ends.
#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("unknown storyboard {0:?}")]
    UnknownStoryboard(String),
    #[error("the service is shutting down")]
    ShuttingDown,
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

impl ApiError {
    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        use OrchestratorError as O;
        match self {
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::UnknownStoryboard(_) => "unknown_storyboard",
            ApiError::ShuttingDown => "shutting_down",
            ApiError::Log(_) => "log_write_failed",
            ApiError::Orchestrator(e) => match e {
                O::TooManyClients { .. } => "too_many_clients",
                O::NoClients => "no_clients",
                O::DuplicateClient(_) => "duplicate_client",
                O::MissingModelBundle { .. } => "missing_model_bundle",
                O::SchemaMismatch { .. } => "schema_mismatch",
                O::SessionClosed(_) => "session_closed",
                O::UnknownClient(_) => "unknown_client",
                O::MessageIndexOutOfRange { .. } => "message_index_out_of_range",
                O::UnknownAdvice(_) => "unknown_advice",
                O::ItemNotInAdvice { .. } => "item_not_in_advice",
                O::InvalidActor(_) => "invalid_actor",
                O::IncompleteLog(_) => "incomplete_log",
                _ => "internal",
            },
        }
    }
}

/// One logged event with its position in the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub seq: usize,
    pub event: LogEvent,
}

/// Client entry in a create-session request: a bare id, or an id backed by a
/// storyboard bot that answers the operator automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientSpec {
    Plain(String),
    Described { id: String, storyboard: Option<String> },
}

impl ClientSpec {
    fn id(&self) -> &str {
        match self {
            ClientSpec::Plain(id) | ClientSpec::Described { id, .. } => id,
        }
    }

    fn storyboard(&self) -> Option<&str> {
        match self {
            ClientSpec::Plain(_) => None,
            ClientSpec::Described { storyboard, .. } => storyboard.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub operator_id: Option<String>,
    /// Defaults to the configured mode.
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostMessage {
    pub client_id: String,
    pub text: String,
    #[serde(default = "operator_actor")]
    pub actor: Actor,
    #[serde(default)]
    pub refs: Vec<String>,
}

fn operator_actor() -> Actor {
    Actor::Operator
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostTag {
    pub client_id: String,
    pub category: String,
    pub value: String,
    pub message_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptAdvice {
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UseResource {
    pub client_id: String,
    pub resource_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndClient {
    /// All open clients when absent.
    #[serde(default)]
    pub client_id: Option<String>,
    #[serde(default)]
    pub reason: Option<String>,
}

/// Commands accepted on the session stream; same semantics as the HTTP calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    Message(PostMessage),
    Tag(PostTag),
    Accept { advice_id: String, item_id: String },
    Resource(UseResource),
    End(EndClient),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// False when some client is still open; the figures then treat open
    /// clients as ending now.
    pub complete: bool,
    #[serde(flatten)]
    pub metrics: TimeMetrics,
}

struct Live {
    session: Session,
    writer: LogWriter,
    tx: broadcast::Sender<Frame>,
    bots: HashMap<String, (String, BotState)>,
}

impl Live {
    /// Writes freshly produced events and announces them to subscribers.
    fn commit(&mut self, events: Vec<LogEvent>) -> Result<Vec<Frame>, ApiError> {
        let base = self.session.events().len() - events.len();
        let frames: Vec<Frame> = events
            .into_iter()
            .enumerate()
            .map(|(i, event)| Frame { seq: base + i, event })
            .collect();
        for f in &frames {
            self.writer.append(&f.event)?;
        }
        for f in &frames {
            // No subscribers is fine.
            let _ = self.tx.send(f.clone());
        }
        Ok(frames)
    }

    fn frames_from(&self, from: usize) -> Vec<Frame> {
        self.session
            .events()
            .iter()
            .enumerate()
            .skip(from)
            .map(|(seq, e)| Frame { seq, event: e.clone() })
            .collect()
    }

    /// Lets a bot client answer the operator's last message.
    fn bot_turn(&mut self, client_id: &str, operator_text: &str, domain: &Domain, now: u64) -> Result<Vec<Frame>, ApiError> {
        let Some((_, bot)) = self.bots.get(client_id) else {
            return Ok(Vec::new());
        };
        if !self.session.is_client_open(client_id) {
            return Ok(Vec::new());
        }
        let (reply, bot) = bot_respond(bot, operator_text, domain);
        self.bots.get_mut(client_id).expect("bot present").1 = bot;
        let events = self.session.post_message(client_id, Actor::Client, &reply.text, Vec::new(), now)?;
        let mut frames = self.commit(events)?;
        if reply.ends_session {
            let events = self.session.end_client(client_id, Actor::Client, "completed", now)?;
            frames.extend(self.commit(events)?);
        }
        Ok(frames)
    }
}

const STREAM_BUFFER: usize = 1024;

/// Shared service state: immutable models plus the live sessions.
pub struct AppState {
    config: ServerConfig,
    domain: Domain,
    models: Models,
    storyboards: BTreeMap<String, Storyboard>,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<Live>>>>,
    next_id: AtomicU64,
    origin: Instant,
    stopping: AtomicBool,
    stop: watch::Sender<bool>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn load_models(config: &ServerConfig) -> Result<Models, ServerError> {
    let bad = |what: &str, p: &Path, e: &dyn std::fmt::Display| {
        ServerError::BadConfig(format!("{what} {}: {e}", p.display()))
    };
    let mut models = Models::default();
    if let Some(p) = &config.advisor_bundle {
        let mut bundle = AdvisorBundle::load(p).map_err(|e| bad("advisor bundle", p, &e))?;
        if let Some(t) = config.thresholds {
            for ensemble in bundle.ensembles.values_mut() {
                ensemble.thresholds = t;
            }
        }
        models.advisor = Some(Arc::new(bundle));
    }
    if let Some(p) = &config.tagger_bundle {
        models.tagger = Some(Arc::new(Tagger::load(p).map_err(|e| bad("tagger bundle", p, &e))?));
    }
    if let Some(p) = &config.schema {
        models.schema = Some(Arc::new(Schema::load(p).map_err(|e| bad("schema", p, &e))?));
    }
    models
        .check_for(config.mode)
        .map_err(|e| ServerError::BadConfig(e.to_string()))?;
    Ok(models)
}

impl AppState {
    pub fn new(config: ServerConfig) -> Result<Self, ServerError> {
        config.validate()?;
        let domain = match &config.domain {
            Some(p) => Domain::load(p).map_err(|e| ServerError::BadConfig(format!("domain: {e}")))?,
            None => Domain::student_loans(),
        };
        let storyboards = match &config.storyboards {
            Some(dir) => read_storyboard_dir(dir, &domain)
                .map_err(|e| ServerError::BadConfig(format!("storyboards: {e}")))?
                .into_iter()
                .map(|s| (s.name.clone(), s))
                .collect(),
            None => BTreeMap::new(),
        };
        let models = load_models(&config)?;
        std::fs::create_dir_all(&config.log_dir)
            .map_err(|e| ServerError::BadConfig(format!("log_dir {}: {e}", config.log_dir.display())))?;
        Ok(Self {
            config,
            domain,
            models,
            storyboards,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            origin: Instant::now(),
            stopping: AtomicBool::new(false),
            stop: watch::channel(false).0,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn live(&self, id: &str) -> Result<Arc<Mutex<Live>>, ApiError> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn check_running(&self) -> Result<(), ApiError> {
        if self.stopping.load(Ordering::SeqCst) {
            return Err(ApiError::ShuttingDown);
        }
        Ok(())
    }

    /// Runs a mutating operation on one session.
    fn mutate<R>(&self, id: &str, f: impl FnOnce(&mut Live, u64) -> Result<R, ApiError>) -> Result<R, ApiError> {
        self.check_running()?;
        let live = self.live(id)?;
        let mut guard = lock(&live);
        let now = self.now_ms();
        f(&mut guard, now)
    }

    pub fn session_ids(&self) -> Vec<String> {
        lock(&self.sessions).keys().cloned().collect()
    }

    /// Opens a session; bot clients post their opening message right away.
    pub fn create(&self, req: CreateSession) -> Result<(String, Vec<Frame>), ApiError> {
        self.check_running()?;
        let mut bots = HashMap::new();
        let mut sessions = lock(&self.sessions);
        let (id, path, session_no) = loop {
            let n = self.next_id.fetch_add(1, Ordering::SeqCst);
            let id = format!("s{n:04}");
            let path = self.config.log_dir.join(format!("{id}.jsonl"));
            if !sessions.contains_key(&id) && !path.exists() {
                break (id, path, n);
            }
        };
        let clients: Vec<String> = req.clients.iter().map(|c| c.id().to_string()).collect();
        let mut cfg = SessionConfig::new(&id, clients, req.mode.unwrap_or(self.config.mode));
        cfg.max_clients = self.config.max_clients;
        if let Some(op) = req.operator_id {
            cfg.operator_id = op;
        }
        let session = create_session(cfg, self.models.clone())?;
        for (k, spec) in req.clients.iter().enumerate() {
            if let Some(name) = spec.storyboard() {
                let sb = self
                    .storyboards
                    .get(name)
                    .ok_or_else(|| ApiError::UnknownStoryboard(name.to_string()))?;
                let seed = derive_seed(self.config.seed, session_no * 64 + k as u64);
                bots.insert(spec.id().to_string(), (name.to_string(), BotState::new(sb.clone(), seed)));
            }
        }
        let mut live = Live {
            session,
            writer: LogWriter::open(&path)?,
            tx: broadcast::channel(STREAM_BUFFER).0,
            bots,
        };
        let now = self.now_ms();
        let mut frames = Vec::new();
        for spec in &req.clients {
            frames.extend(live.bot_turn(spec.id(), "", &self.domain, now)?);
        }
        tracing::info!(session = %id, clients = req.clients.len(), "session created");
        sessions.insert(id.clone(), Arc::new(Mutex::new(live)));
        Ok((id, frames))
    }

    pub fn post_message(&self, id: &str, req: PostMessage) -> Result<Vec<Frame>, ApiError> {
        self.mutate(id, |live, now| {
            let events = live.session.post_message(&req.client_id, req.actor, &req.text, req.refs, now)?;
            let mut frames = live.commit(events)?;
            if req.actor == Actor::Operator {
                frames.extend(live.bot_turn(&req.client_id, &req.text, &self.domain, now)?);
            }
            Ok(frames)
        })
    }

    pub fn record_tag(&self, id: &str, req: PostTag) -> Result<Vec<Frame>, ApiError> {
        self.mutate(id, |live, now| {
            let events = live
                .session
                .record_tag(&req.client_id, &req.category, &req.value, req.message_index, now)?;
            live.commit(events)
        })
    }

    pub fn accept_advice(&self, id: &str, advice_id: &str, item_id: &str) -> Result<Vec<Frame>, ApiError> {
        self.mutate(id, |live, now| {
            let events = live.session.accept_advice(advice_id, item_id, now)?;
            live.commit(events)
        })
    }

    pub fn resource_use(&self, id: &str, req: UseResource) -> Result<Vec<Frame>, ApiError> {
        self.mutate(id, |live, now| {
            let events = live.session.resource_use(&req.client_id, &req.resource_id, now)?;
            live.commit(events)
        })
    }

    pub fn end(&self, id: &str, req: EndClient) -> Result<Vec<Frame>, ApiError> {
        self.mutate(id, |live, now| {
            let reason = req.reason.as_deref().unwrap_or("operator_closed");
            let targets: Vec<String> = match req.client_id {
                Some(c) => vec![c],
                None => live
                    .session
                    .client_ids()
                    .filter(|c| live.session.is_client_open(c))
                    .map(str::to_string)
                    .collect(),
            };
            let mut frames = Vec::new();
            for c in targets {
                let events = live.session.end_client(&c, Actor::Operator, reason, now)?;
                frames.extend(live.commit(events)?);
            }
            live.writer.sync()?;
            Ok(frames)
        })
    }

    pub fn apply(&self, id: &str, command: Command) -> Result<Vec<Frame>, ApiError> {
        match command {
            Command::Message(m) => self.post_message(id, m),
            Command::Tag(t) => self.record_tag(id, t),
            Command::Accept { advice_id, item_id } => self.accept_advice(id, &advice_id, &item_id),
            Command::Resource(r) => self.resource_use(id, r),
            Command::End(e) => self.end(id, e),
        }
    }

    pub fn events(&self, id: &str, from: usize) -> Result<Vec<Frame>, ApiError> {
        let live = self.live(id)?;
        let frames = lock(&live).frames_from(from);
        Ok(frames)
    }

    pub fn metrics(&self, id: &str) -> Result<MetricsReport, ApiError> {
        let live = self.live(id)?;
        let guard = lock(&live);
        let complete = guard.session.is_closed();
        let metrics = if complete {
            compute_time_metrics(&guard.session.log())?
        } else {
            let mut provisional = guard.session.clone();
            provisional.shutdown(self.now_ms());
            compute_time_metrics(&provisional.log())?
        };
        Ok(MetricsReport { complete, metrics })
    }

    pub fn summary(&self, id: &str) -> Result<serde_json::Value, ApiError> {
        let live = self.live(id)?;
        let g = lock(&live);
        let s = &g.session;
        let clients: Vec<serde_json::Value> = s
            .client_ids()
            .map(|c| {
                serde_json::json!({
                    "id": c,
                    "open": s.is_client_open(c),
                    "messages": s.message_count(c),
                    "storyboard": g.bots.get(c).map(|(name, _)| name),
                    "vector": s.vector(c),
                })
            })
            .collect();
        Ok(serde_json::json!({
            "session_id": s.id(),
            "operator_id": s.operator_id(),
            "mode": s.mode(),
            "closed": s.is_closed(),
            "events": s.events().len(),
            "clients": clients,
        }))
    }

    /// Latest advice per client.
    pub fn advice(&self, id: &str) -> Result<serde_json::Value, ApiError> {
        let live = self.live(id)?;
        let g = lock(&live);
        let s = &g.session;
        let map: serde_json::Map<String, serde_json::Value> = s
            .client_ids()
            .map(|c| {
                let v = match s.latest_advice(c) {
                    Some((advice_id, recs)) => serde_json::json!({"advice_id": advice_id, "recommendations": recs}),
                    None => serde_json::Value::Null,
                };
                (c.to_string(), v)
            })
            .collect();
        Ok(serde_json::Value::Object(map))
    }

    /// Backlog from `from` plus a subscription, taken atomically so that no
    /// event is missed or delivered twice.
    fn subscribe(&self, id: &str, from: usize) -> Result<(Vec<Frame>, broadcast::Receiver<Frame>), ApiError> {
        let live = self.live(id)?;
        let g = lock(&live);
        Ok((g.frames_from(from), g.tx.subscribe()))
    }

    fn stop_signal(&self) -> watch::Receiver<bool> {
        self.stop.subscribe()
    }

    /// Ends every open client with a shutdown marker and syncs all logs.
    /// Idempotent.
    pub fn finish(&self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let sessions: Vec<_> = lock(&self.sessions).values().cloned().collect();
        for live in sessions {
            let mut g = lock(&live);
            let now = self.now_ms();
            let events = g.session.shutdown(now);
            if let Err(e) = g.commit(events).and_then(|_| g.writer.sync().map_err(ApiError::from)) {
                tracing::error!(session = g.session.id(), error = %e, "failed to flush log at shutdown");
            }
        }
        let _ = self.stop.send(true);
        tracing::info!("all session logs flushed");
    }
}

/// A bound, not yet running service.
pub struct Server {
    listener: TcpListener,
    state: Arc<AppState>,
}

impl Server {
    pub async fn bind(config: ServerConfig) -> Result<Self, ServerError> {
        let addr = format!("{}:{}", config.bind, config.port);
        let port = config.port;
        let state = Arc::new(AppState::new(config)?);
        let listener = TcpListener::bind(&addr).await.map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => ServerError::PortInUse(port),
            std::io::ErrorKind::AddrNotAvailable => ServerError::BadConfig(format!("cannot bind {addr}")),
            _ => ServerError::Io(e),
        })?;
        Ok(Self { listener, state })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn state(&self) -> Arc<AppState> {
        self.state.clone()
    }

    /// Serves until `shutdown` resolves, then writes shutdown markers to every
    /// open session and closes the streams.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServerError> {
        let state = self.state.clone();
        tracing::info!(addr = %self.local_addr(), "serving");
        axum::serve(self.listener, routes::router(self.state))
            .with_graceful_shutdown(async move {
                shutdown.await;
                state.finish();
            })
            .await?;
        Ok(())
    }
}

pub async fn serve(config: ServerConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServerError> {
    Server::bind(config).await?.run(shutdown).await
}

/// Resolves on Ctrl-C or SIGTERM.
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
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
