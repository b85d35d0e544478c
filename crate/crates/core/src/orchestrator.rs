//! Live session state machine: routes messages, applies manual and automatic
//! tags, pushes deduplicated advice, and records the append-only log. Also
//! time metrics, training-data export and log replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{extract_demonstrations, AdviceCatalog, AdviceType, AdvisorBundle, AdvisorError, Demonstration, Recommendation};
use crate::autotagger::{GoldTag, TagContext, TaggedMessage, Tagger, TaggerError};
use crate::sessionlog::{
    Actor, AdviceAcceptedPayload, AdvicePayload, EventBody, LogError, LogEvent, MessagePayload, Mode,
    ResourceUsePayload, SessionEndPayload, SessionLog, TagPayload,
};
use crate::vectorcore::{InformationVector, Schema, TagEvent, TagSource, VectorError};
use crate::Scalar;

pub const DEFAULT_MAX_CLIENTS: usize = 3;
/// `session_end` reason written for clients still open when the service stops.
pub const SHUTDOWN_REASON: &str = "shutdown";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{requested} clients requested, at most {max} allowed")]
    TooManyClients { requested: usize, max: usize },
    #[error("a session needs at least one client")]
    NoClients,
    #[error("duplicate client id {0:?}")]
    DuplicateClient(String),
    #[error("mode {mode} needs the {missing} bundle")]
    MissingModelBundle { mode: Mode, missing: &'static str },
    #[error("tagger schema {tagger} does not match advisor schema {advisor}")]
    SchemaMismatch { tagger: String, advisor: String },
    #[error("client {0:?} has left the session")]
    SessionClosed(String),
    #[error("unknown client {0:?}")]
    UnknownClient(String),
    #[error("message index {index} out of range ({count} messages)")]
    MessageIndexOutOfRange { index: usize, count: usize },
    #[error("unknown advice {0:?}")]
    UnknownAdvice(String),
    #[error("item {item:?} is not part of advice {advice:?}")]
    ItemNotInAdvice { advice: String, item: String },
    #[error("actor {0:?} cannot post messages")]
    InvalidActor(Actor),
    #[error("log incomplete: {0}")]
    IncompleteLog(String),
    #[error(transparent)]
    Advisor(#[from] AdvisorError),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

/// Trained models shared read-only by all sessions.
#[derive(Debug, Clone)]
pub struct Models<T> {
    pub advisor: Option<Arc<AdvisorBundle<T>>>,
    pub tagger: Option<Arc<Tagger<T>>>,
    /// Schema for vectors when no advisor is loaded (collect mode).
    pub schema: Option<Arc<Schema>>,
}

impl<T> Default for Models<T> {
    fn default() -> Self {
        Self {
            advisor: None,
            tagger: None,
            schema: None,
        }
    }
}

impl<T: Scalar> Models<T> {
    pub fn new(advisor: AdvisorBundle<T>, tagger: Tagger<T>) -> Self {
        Self {
            advisor: Some(Arc::new(advisor)),
            tagger: Some(Arc::new(tagger)),
            schema: None,
        }
    }

    pub fn active_schema(&self) -> Option<&Schema> {
        self.advisor.as_ref().map(|a| &a.schema).or(self.schema.as_deref())
    }

    /// Both bundles present and trained against the same schema.
    pub fn check_for(&self, mode: Mode) -> Result<()> {
        if !mode.advises() {
            return Ok(());
        }
        let advisor = self.advisor.as_ref().ok_or(OrchestratorError::MissingModelBundle {
            mode,
            missing: "advisor",
        })?;
        let tagger = self.tagger.as_ref().ok_or(OrchestratorError::MissingModelBundle {
            mode,
            missing: "tagger",
        })?;
        if tagger.schema_hash != advisor.schema_hash() {
            return Err(OrchestratorError::SchemaMismatch {
                tagger: tagger.schema_hash.clone(),
                advisor: advisor.schema_hash(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub operator_id: String,
    pub clients: Vec<String>,
    pub mode: Mode,
    pub max_clients: usize,
}

impl SessionConfig {
    pub fn new(session_id: impl Into<String>, clients: Vec<String>, mode: Mode) -> Self {
        Self {
            session_id: session_id.into(),
            operator_id: "operator".into(),
            clients,
            mode,
            max_clients: DEFAULT_MAX_CLIENTS,
        }
    }
}

type AdviceMap = BTreeMap<AdviceType, Recommendation>;

fn silent_advice() -> AdviceMap {
    AdviceType::ALL.iter().map(|&t| (t, Recommendation::silent())).collect()
}

#[derive(Debug, Clone)]
struct ClientState {
    id: String,
    vector: Option<InformationVector>,
    messages: usize,
    ended: bool,
    last_advice: Option<(String, AdviceMap)>,
}

/// One operator with its concurrent clients.
#[derive(Debug, Clone)]
pub struct Session<T> {
    id: String,
    operator_id: String,
    mode: Mode,
    models: Models<T>,
    clients: Vec<ClientState>,
    events: Vec<LogEvent>,
    origin: Option<u64>,
    advice_seq: usize,
}

pub fn create_session<T: Scalar>(config: SessionConfig, models: Models<T>) -> Result<Session<T>> {
    if config.clients.is_empty() {
        return Err(OrchestratorError::NoClients);
    }
    if config.clients.len() > config.max_clients {
        return Err(OrchestratorError::TooManyClients {
            requested: config.clients.len(),
            max: config.max_clients,
        });
    }
    for (i, c) in config.clients.iter().enumerate() {
        if config.clients[..i].contains(c) {
            return Err(OrchestratorError::DuplicateClient(c.clone()));
        }
    }
    models.check_for(config.mode)?;
    let empty = models.active_schema().map(Schema::empty_vector);
    let clients = config
        .clients
        .iter()
        .map(|id| ClientState {
            id: id.clone(),
            vector: empty.clone(),
            messages: 0,
            ended: false,
            last_advice: None,
        })
        .collect();
    Ok(Session {
        id: config.session_id,
        operator_id: config.operator_id,
        mode: config.mode,
        models,
        clients,
        events: Vec::new(),
        origin: None,
        advice_seq: 0,
    })
}

impl<T: Scalar> Session<T> {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn operator_id(&self) -> &str {
        &self.operator_id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    pub fn log(&self) -> SessionLog {
        SessionLog::new(self.events.clone())
    }

    pub fn client_ids(&self) -> impl Iterator<Item = &str> {
        self.clients.iter().map(|c| c.id.as_str())
    }

    pub fn schema(&self) -> Option<&Schema> {
        self.models.active_schema()
    }

    pub fn vector(&self, client_id: &str) -> Option<&InformationVector> {
        self.clients.iter().find(|c| c.id == client_id)?.vector.as_ref()
    }

    pub fn message_count(&self, client_id: &str) -> Option<usize> {
        self.clients.iter().find(|c| c.id == client_id).map(|c| c.messages)
    }

    /// Latest advice event for a client: id and recommendations.
    pub fn latest_advice(&self, client_id: &str) -> Option<(&str, &BTreeMap<AdviceType, Recommendation>)> {
        let c = self.clients.iter().find(|c| c.id == client_id)?;
        c.last_advice.as_ref().map(|(id, m)| (id.as_str(), m))
    }

    pub fn is_client_open(&self, client_id: &str) -> bool {
        self.clients.iter().any(|c| c.id == client_id && !c.ended)
    }

    /// True once every client has a `session_end`.
    pub fn is_closed(&self) -> bool {
        self.clients.iter().all(|c| c.ended)
    }

    fn client_index(&self, client_id: &str) -> Result<usize> {
        let i = self
            .clients
            .iter()
            .position(|c| c.id == client_id)
            .ok_or_else(|| OrchestratorError::UnknownClient(client_id.to_string()))?;
        if self.clients[i].ended {
            return Err(OrchestratorError::SessionClosed(client_id.to_string()));
        }
        Ok(i)
    }

    /// Session-relative timestamp, strictly after every earlier event.
    fn stamp(&mut self, now_ms: u64) -> u64 {
        let origin = *self.origin.get_or_insert(now_ms);
        let ts = now_ms.saturating_sub(origin);
        match self.events.last() {
            Some(last) if ts <= last.ts_ms => last.ts_ms + 1,
            _ => ts,
        }
    }

    fn push(&mut self, now_ms: u64, client: usize, actor: Actor, body: EventBody) -> LogEvent {
        let event = LogEvent {
            ts_ms: self.stamp(now_ms),
            session_id: self.id.clone(),
            client_id: self.clients[client].id.clone(),
            actor,
            body,
        };
        self.events.push(event.clone());
        event
    }

    /// Appends a chat message. In advise modes client messages are auto-tagged
    /// and advice is recomputed.
    pub fn post_message(
        &mut self,
        client_id: &str,
        actor: Actor,
        text: &str,
        refs: Vec<String>,
        now_ms: u64,
    ) -> Result<Vec<LogEvent>> {
        if actor == Actor::Agent {
            return Err(OrchestratorError::InvalidActor(actor));
        }
        let c = self.client_index(client_id)?;
        let start = self.events.len();
        let message_index = self.clients[c].messages;
        self.clients[c].messages += 1;
        let msg = self.push(
            now_ms,
            c,
            actor,
            EventBody::Message(MessagePayload {
                message_index,
                text: text.to_string(),
                refs,
            }),
        );
        if self.mode.advises() {
            if actor == Actor::Client {
                let tagger = self.models.tagger.clone().expect("checked at creation");
                let schema = self.models.active_schema().expect("checked at creation").clone();
                let ctx = TagContext {
                    session_id: self.id.clone(),
                    message_index,
                    timestamp: msg.ts_ms,
                };
                for tag in tagger.auto_tag(&schema, text, &ctx)? {
                    self.apply(c, &tag, now_ms)?;
                }
            }
            self.refresh_advice(c, now_ms)?;
        }
        Ok(self.events[start..].to_vec())
    }

    fn apply(&mut self, c: usize, tag: &TagEvent, now_ms: u64) -> Result<()> {
        let schema = self.models.active_schema().cloned();
        let in_schema = schema.as_ref().is_none_or(|s| s.labels.contains(&tag.category));
        self.push(
            now_ms,
            c,
            match tag.source {
                TagSource::Manual => Actor::Operator,
                TagSource::Auto => Actor::Agent,
            },
            EventBody::Tag(TagPayload {
                category: tag.category.clone(),
                value: tag.value.clone(),
                message_index: tag.message_index,
                source: tag.source,
                in_schema,
            }),
        );
        if let (Some(schema), Some(v)) = (schema, self.clients[c].vector.as_ref()) {
            if in_schema {
                self.clients[c].vector = Some(schema.apply_tag(v, tag)?);
            }
        }
        Ok(())
    }

    /// A manual tag on one of the client's messages.
    pub fn record_tag(
        &mut self,
        client_id: &str,
        category: &str,
        value: &str,
        message_index: usize,
        now_ms: u64,
    ) -> Result<Vec<LogEvent>> {
        let c = self.client_index(client_id)?;
        let count = self.clients[c].messages;
        if message_index >= count {
            return Err(OrchestratorError::MessageIndexOutOfRange {
                index: message_index,
                count,
            });
        }
        let tag = TagEvent::new(&self.id, category, value, message_index, 0, TagSource::Manual)?;
        let start = self.events.len();
        self.apply(c, &tag, now_ms)?;
        if self.mode.advises() {
            self.refresh_advice(c, now_ms)?;
        }
        Ok(self.events[start..].to_vec())
    }

    /// Appends an advice event when the recommendation changed since the last one.
    fn refresh_advice(&mut self, c: usize, now_ms: u64) -> Result<()> {
        let advisor = self.models.advisor.clone().expect("checked at creation");
        let vector = self.clients[c].vector.as_ref().expect("advise modes keep vectors");
        let recs = advisor.advise(vector)?;
        let unchanged = match &self.clients[c].last_advice {
            Some((_, last)) => *last == recs,
            None => recs == silent_advice(),
        };
        if unchanged {
            return Ok(());
        }
        self.advice_seq += 1;
        let advice_id = format!("{}-a{}", self.id, self.advice_seq);
        self.push(
            now_ms,
            c,
            Actor::Agent,
            EventBody::Advice(AdvicePayload {
                advice_id: advice_id.clone(),
                recommendations: recs.clone(),
            }),
        );
        self.clients[c].last_advice = Some((advice_id, recs));
        Ok(())
    }

    /// The operator takes one item of an advice event.
    pub fn accept_advice(&mut self, advice_id: &str, item_id: &str, now_ms: u64) -> Result<Vec<LogEvent>> {
        let (client_id, recs) = self
            .events
            .iter()
            .find_map(|e| match &e.body {
                EventBody::Advice(a) if a.advice_id == advice_id => Some((e.client_id.clone(), &a.recommendations)),
                _ => None,
            })
            .ok_or_else(|| OrchestratorError::UnknownAdvice(advice_id.to_string()))?;
        if !recs.values().any(|r| r.item_ids().any(|i| i == item_id)) {
            return Err(OrchestratorError::ItemNotInAdvice {
                advice: advice_id.to_string(),
                item: item_id.to_string(),
            });
        }
        let c = self.client_index(&client_id)?;
        let e = self.push(
            now_ms,
            c,
            Actor::Operator,
            EventBody::AdviceAccepted(AdviceAcceptedPayload {
                advice_id: advice_id.to_string(),
                item_id: item_id.to_string(),
            }),
        );
        Ok(vec![e])
    }

    /// The operator opened a resource or calculator while serving a client.
    pub fn resource_use(&mut self, client_id: &str, resource_id: &str, now_ms: u64) -> Result<Vec<LogEvent>> {
        let c = self.client_index(client_id)?;
        let e = self.push(
            now_ms,
            c,
            Actor::Operator,
            EventBody::ResourceUse(ResourceUsePayload {
                resource_id: resource_id.to_string(),
            }),
        );
        Ok(vec![e])
    }

    /// Closes one client's conversation.
    pub fn end_client(&mut self, client_id: &str, actor: Actor, reason: &str, now_ms: u64) -> Result<Vec<LogEvent>> {
        let c = self.client_index(client_id)?;
        let e = self.push(
            now_ms,
            c,
            actor,
            EventBody::SessionEnd(SessionEndPayload {
                reason: reason.to_string(),
                mode: self.mode,
            }),
        );
        self.clients[c].ended = true;
        Ok(vec![e])
    }

    /// Ends every open client with the shutdown marker.
    pub fn shutdown(&mut self, now_ms: u64) -> Vec<LogEvent> {
        let open: Vec<String> = self.clients.iter().filter(|c| !c.ended).map(|c| c.id.clone()).collect();
        open.iter()
            .flat_map(|id| {
                self.end_client(id, Actor::Operator, SHUTDOWN_REASON, now_ms)
                    .expect("open client")
            })
            .collect()
    }
}

/// Re-runs a recorded log through a fresh session. Agent-produced events
/// (automatic tags, advice) are regenerated rather than copied.
pub fn replay<T: Scalar>(log: &SessionLog, mode: Mode, models: Models<T>) -> Result<Session<T>> {
    let clients = log.clients();
    let session_id = log.session_id().unwrap_or("replay").to_string();
    let mut config = SessionConfig::new(session_id, clients.clone(), mode);
    config.max_clients = clients.len().max(1);
    let mut s = create_session(config, models)?;
    for e in &log.events {
        let now = e.ts_ms;
        match &e.body {
            EventBody::Message(m) => {
                s.post_message(&e.client_id, e.actor, &m.text, m.refs.clone(), now)?;
            }
            EventBody::Tag(t) if t.source == TagSource::Manual => {
                s.record_tag(&e.client_id, &t.category, &t.value, t.message_index, now)?;
            }
            EventBody::Tag(_) | EventBody::Advice(_) => {}
            EventBody::AdviceAccepted(a) => {
                s.accept_advice(&a.advice_id, &a.item_id, now)?;
            }
            EventBody::ResourceUse(r) => {
                s.resource_use(&e.client_id, &r.resource_id, now)?;
            }
            EventBody::SessionEnd(p) => {
                s.end_client(&e.client_id, e.actor, &p.reason, now)?;
            }
        }
    }
    Ok(s)
}

/// Advice events of a log, one JSON line each.
pub fn advice_lines(events: &[LogEvent]) -> Vec<String> {
    events
        .iter()
        .filter(|e| matches!(e.body, EventBody::Advice(_)))
        .map(LogEvent::to_json_line)
        .collect()
}

/// Session timing in decimal minutes; waiting figures are per-client values
/// averaged over the session's clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeMetrics {
    pub total_session_time: f64,
    pub max_waiting_time: f64,
    pub total_waiting_time: f64,
}

const MS_PER_MINUTE: f64 = 60_000.0;

/// Waiting runs from the first unanswered client message to the next operator
/// message to that client, or to the client's `session_end`.
pub fn compute_time_metrics(log: &SessionLog) -> Result<TimeMetrics> {
    let clients = log.clients();
    if clients.is_empty() {
        return Err(OrchestratorError::IncompleteLog("no events".into()));
    }
    let mut max_sum = 0.0;
    let mut total_sum = 0.0;
    for client in &clients {
        let mut waiting_since: Option<u64> = None;
        let mut ended = false;
        let (mut max_w, mut total_w) = (0u64, 0u64);
        for e in log.for_client(client) {
            let close = match (&e.body, e.actor) {
                (EventBody::Message(_), Actor::Client) => {
                    waiting_since.get_or_insert(e.ts_ms);
                    false
                }
                (EventBody::Message(_), Actor::Operator) => true,
                (EventBody::SessionEnd(_), _) => {
                    ended = true;
                    true
                }
                _ => false,
            };
            if close {
                if let Some(since) = waiting_since.take() {
                    let w = e.ts_ms.saturating_sub(since);
                    max_w = max_w.max(w);
                    total_w += w;
                }
            }
        }
        if !ended {
            return Err(OrchestratorError::IncompleteLog(format!("client {client:?} has no session_end")));
        }
        max_sum += max_w as f64;
        total_sum += total_w as f64;
    }
    let n = clients.len() as f64;
    let last = log.events.iter().map(|e| e.ts_ms).max().unwrap_or(0);
    Ok(TimeMetrics {
        total_session_time: last as f64 / MS_PER_MINUTE,
        max_waiting_time: max_sum / n / MS_PER_MINUTE,
        total_waiting_time: total_sum / n / MS_PER_MINUTE,
    })
}

/// Mean of each metric over several sessions.
pub fn mean_metrics(all: &[TimeMetrics]) -> Option<TimeMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    Some(TimeMetrics {
        total_session_time: all.iter().map(|m| m.total_session_time).sum::<f64>() / n,
        max_waiting_time: all.iter().map(|m| m.max_waiting_time).sum::<f64>() / n,
        total_waiting_time: all.iter().map(|m| m.total_waiting_time).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Keep only operator-made (manual) tags.
    pub manual_tags_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLog {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub files: usize,
    pub sessions_used: usize,
    pub advise_only_excluded: usize,
    /// Corrupt logs, skipped.
    pub skipped: Vec<SkippedLog>,
    pub client_messages: usize,
    pub manual_tags: usize,
    pub auto_tags: usize,
    pub dropped_auto_tags: usize,
}

/// Training material read from a directory of session logs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingExport {
    /// One row per client message with its final tags.
    pub corpus: Vec<TaggedMessage>,
    /// Logs that feed the advisor, already filtered.
    pub logs: Vec<SessionLog>,
    pub report: ExportReport,
}

impl TrainingExport {
    pub fn tag_events(&self) -> Vec<TagEvent> {
        self.logs.iter().flat_map(crate::advisor::tag_events).collect()
    }

    pub fn demonstrations(&self, schema: &Schema, catalog: &AdviceCatalog) -> Result<Vec<Demonstration>> {
        let mut out = Vec::new();
        for log in &self.logs {
            out.extend(extract_demonstrations(log, schema, catalog)?);
        }
        Ok(out)
    }

    /// Writes `tag_corpus.jsonl`, the filtered logs under `episodes/`, and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("episodes"))?;
        let mut corpus = String::new();
        for row in &self.corpus {
            corpus.push_str(&serde_json::to_string(row).expect("corpus rows serialize"));
            corpus.push('\n');
        }
        std::fs::write(dir.join("tag_corpus.jsonl"), corpus)?;
        for (i, log) in self.logs.iter().enumerate() {
            let name = format!("{:05}_{}.jsonl", i, log.session_id().unwrap_or("session"));
            log.write(&dir.join("episodes").join(name))?;
        }
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&self.report).expect("report serializes"),
        )?;
        Ok(())
    }
}

/// Reads a tag corpus written by [`TrainingExport::write`].
pub fn read_corpus(path: &Path) -> Result<Vec<TaggedMessage>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                OrchestratorError::Log(LogError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

/// `*.jsonl` files directly inside `dir`, sorted by name.
pub fn log_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Tagged client messages of one log.
pub fn corpus_rows(log: &SessionLog) -> Vec<TaggedMessage> {
    let mut rows = Vec::new();
    for client in log.clients() {
        let events: Vec<&LogEvent> = log.for_client(&client).collect();
        let mut tags: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        for e in &events {
            if let EventBody::Tag(t) = &e.body {
                tags.entry(t.message_index)
                    .or_default()
                    .insert(t.category.clone(), t.value.clone());
            }
        }
        for e in &events {
            if let (EventBody::Message(m), Actor::Client) = (&e.body, e.actor) {
                rows.push(TaggedMessage {
                    text: m.text.clone(),
                    tags: tags
                        .get(&m.message_index)
                        .map(|t| t.iter().map(|(c, v)| GoldTag::new(c.clone(), v.clone())).collect())
                        .unwrap_or_default(),
                });
            }
        }
    }
    rows
}

/// Filters and converts a batch of logs. Corrupt files are skipped and
/// reported; `advise_only` sessions never feed training.
pub fn export_logs(logs: Vec<(String, std::result::Result<SessionLog, String>)>, options: ExportOptions) -> TrainingExport {
    let mut out = TrainingExport::default();
    out.report.files = logs.len();
    for (file, parsed) in logs {
        let mut log = match parsed {
            Ok(l) => l,
            Err(reason) => {
                out.report.skipped.push(SkippedLog { file, reason });
                continue;
            }
        };
        if !log.is_time_ordered() {
            out.report.skipped.push(SkippedLog {
                file,
                reason: "timestamps out of order".into(),
            });
            continue;
        }
        if log.mode() == Some(Mode::AdviseOnly) {
            out.report.advise_only_excluded += 1;
            continue;
        }
        if options.manual_tags_only {
            let before = log.events.len();
            log.events
                .retain(|e| !matches!(&e.body, EventBody::Tag(t) if t.source == TagSource::Auto));
            out.report.dropped_auto_tags += before - log.events.len();
        }
        for e in &log.events {
            match (&e.body, e.actor) {
                (EventBody::Message(_), Actor::Client) => out.report.client_messages += 1,
                (EventBody::Tag(t), _) if t.source == TagSource::Manual => out.report.manual_tags += 1,
                (EventBody::Tag(_), _) => out.report.auto_tags += 1,
                _ => {}
            }
        }
        out.corpus.extend(corpus_rows(&log));
        out.logs.push(log);
        out.report.sessions_used += 1;
    }
    out
}

/// Reads every `*.jsonl` log in `dir` and exports the training corpora.
pub fn export_training_data(dir: &Path, options: ExportOptions) -> Result<TrainingExport> {
    let logs = log_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            (name, SessionLog::read(&p).map_err(|e| e.to_string()))
        })
        .collect();
    Ok(export_logs(logs, options))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(ts: u64, client: &str, actor: Actor, i: usize) -> LogEvent {
        LogEvent {
            ts_ms: ts,
            session_id: "s".into(),
            client_id: client.into(),
            actor,
            body: EventBody::Message(MessagePayload {
                message_index: i,
                text: "x".into(),
                refs: vec![],
            }),
        }
    }

    fn end(ts: u64, client: &str) -> LogEvent {
        LogEvent {
            ts_ms: ts,
            session_id: "s".into(),
            client_id: client.into(),
            actor: Actor::Client,
            body: EventBody::SessionEnd(SessionEndPayload {
                reason: "completed".into(),
                mode: Mode::Collect,
            }),
        }
    }

    #[test]
    fn metrics_hand_computed() {
        // Waits of 0.5 and 1.5 minutes.
        let log = SessionLog::new(vec![
            msg(0, "c1", Actor::Client, 0),
            msg(30_000, "c1", Actor::Operator, 1),
            msg(60_000, "c1", Actor::Client, 2),
            msg(90_000, "c1", Actor::Client, 3),
            msg(150_000, "c1", Actor::Operator, 4),
            msg(170_000, "c1", Actor::Client, 5),
            msg(170_000, "c1", Actor::Operator, 6),
            end(180_000, "c1"),
        ]);
        let m = compute_time_metrics(&log).unwrap();
        assert!((m.max_waiting_time - 1.5).abs() < 1e-12);
        assert!((m.total_waiting_time - 2.0).abs() < 1e-12);
        assert!((m.total_session_time - 3.0).abs() < 1e-12);
    }

    #[test]
    fn instant_replies_mean_no_waiting() {
        let log = SessionLog::new(vec![
            msg(0, "c1", Actor::Client, 0),
            msg(0, "c1", Actor::Operator, 1),
            msg(5_000, "c1", Actor::Client, 2),
            msg(5_000, "c1", Actor::Operator, 3),
            end(6_000, "c1"),
        ]);
        assert_eq!(compute_time_metrics(&log).unwrap().total_waiting_time, 0.0);
    }

    #[test]
    fn metrics_average_over_clients() {
        let log = SessionLog::new(vec![
            msg(0, "a", Actor::Client, 0),
            msg(60_000, "a", Actor::Operator, 1),
            msg(60_000, "b", Actor::Client, 0),
            msg(240_000, "b", Actor::Operator, 1),
            end(250_000, "a"),
            end(300_000, "b"),
        ]);
        let m = compute_time_metrics(&log).unwrap();
        // a waits 1 min, b waits 3 min.
        assert!((m.max_waiting_time - 2.0).abs() < 1e-12);
        assert!((m.total_waiting_time - 2.0).abs() < 1e-12);
        assert!((m.total_session_time - 5.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_need_session_end() {
        let log = SessionLog::new(vec![msg(0, "a", Actor::Client, 0)]);
        assert!(matches!(compute_time_metrics(&log), Err(OrchestratorError::IncompleteLog(_))));
    }

    fn collect_session(clients: &[&str]) -> Result<Session<f64>> {
        create_session(
            SessionConfig::new("s1", clients.iter().map(|s| s.to_string()).collect(), Mode::Collect),
            Models::default(),
        )
    }

    #[test]
    fn client_bounds_and_bundles() {
        assert!(matches!(
            collect_session(&["a", "b", "c", "d"]),
            Err(OrchestratorError::TooManyClients { requested: 4, max: 3 })
        ));
        assert!(matches!(collect_session(&[]), Err(OrchestratorError::NoClients)));
        let err = create_session::<f64>(
            SessionConfig::new("s", vec!["a".into()], Mode::AdviseOnly),
            Models::default(),
        )
        .unwrap_err();
        assert!(matches!(err, OrchestratorError::MissingModelBundle { .. }));
    }

    #[test]
    fn collect_mode_logs_only_messages_and_tags() {
        let mut s = collect_session(&["a", "b"]).unwrap();
        s.post_message("a", Actor::Client, "I study at UCLA", vec![], 100).unwrap();
        s.post_message("b", Actor::Client, "hello", vec![], 200).unwrap();
        s.record_tag("a", "university", "UCLA", 0, 300).unwrap();
        s.post_message("a", Actor::Operator, "thanks", vec![], 400).unwrap();
        s.shutdown(500);
        let log = s.log();
        assert_eq!(log.events[0].ts_ms, 0);
        assert!(log.events.windows(2).all(|w| w[0].ts_ms < w[1].ts_ms));
        assert!(log.events.iter().all(|e| e.actor != Actor::Agent));
        assert!(log.events.iter().all(|e| !matches!(e.body, EventBody::Advice(_))));
        assert_eq!(log.mode(), Some(Mode::Collect));
        assert!(s.is_closed());
    }

    #[test]
    fn tag_errors() {
        let mut s = collect_session(&["a"]).unwrap();
        s.post_message("a", Actor::Client, "hi", vec![], 0).unwrap();
        assert!(matches!(
            s.record_tag("a", "university", "UCLA", 1, 10),
            Err(OrchestratorError::MessageIndexOutOfRange { index: 1, count: 1 })
        ));
        assert!(matches!(
            s.record_tag("zz", "university", "UCLA", 0, 10),
            Err(OrchestratorError::UnknownClient(_))
        ));
        s.end_client("a", Actor::Client, "completed", 20).unwrap();
        assert!(matches!(
            s.post_message("a", Actor::Client, "again", vec![], 30),
            Err(OrchestratorError::SessionClosed(_))
        ));
    }

    #[test]
    fn out_of_schema_tag_leaves_vector() {
        let events = vec![TagEvent::new("s", "university", "UCLA", 0, 0, TagSource::Manual).unwrap()];
        let schema = Schema::from_events(&events, 1).unwrap();
        let models = Models::<f64> {
            schema: Some(Arc::new(schema)),
            ..Models::default()
        };
        let mut s = create_session(SessionConfig::new("s", vec!["a".into()], Mode::Collect), models).unwrap();
        s.post_message("a", Actor::Client, "my pet is a dog", vec![], 0).unwrap();
        let before = s.vector("a").unwrap().clone();
        let ev = s.record_tag("a", "pet", "dog", 0, 5).unwrap();
        assert!(matches!(&ev[0].body, EventBody::Tag(t) if !t.in_schema && t.category == "pet"));
        assert_eq!(s.vector("a").unwrap(), &before);
        s.post_message("a", Actor::Client, "UCLA", vec![], 10).unwrap();
        s.record_tag("a", "university", "UCLA", 1, 20).unwrap();
        assert!(s.vector("a").unwrap().is_present(0));
    }

    #[test]
    fn export_filters_modes_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let empty = export_training_data(dir.path(), ExportOptions::default()).unwrap();
        assert!(empty.corpus.is_empty());
        assert_eq!(empty.report.files, 0);

        let mut s = collect_session(&["a"]).unwrap();
        s.post_message("a", Actor::Client, "I study at UCLA", vec![], 0).unwrap();
        s.record_tag("a", "university", "UCLA", 0, 10).unwrap();
        s.shutdown(20);
        s.log().write(&dir.path().join("a.jsonl")).unwrap();
        let mut only = s.log();
        for e in &mut only.events {
            if let EventBody::SessionEnd(p) = &mut e.body {
                p.mode = Mode::AdviseOnly;
            }
        }
        only.write(&dir.path().join("b.jsonl")).unwrap();
        std::fs::write(dir.path().join("c.jsonl"), "{broken\n").unwrap();

        let ex = export_training_data(dir.path(), ExportOptions::default()).unwrap();
        assert_eq!(ex.report.files, 3);
        assert_eq!(ex.report.sessions_used, 1);
        assert_eq!(ex.report.advise_only_excluded, 1);
        assert_eq!(ex.report.skipped.len(), 1);
        assert_eq!(ex.corpus, vec![TaggedMessage {
            text: "I study at UCLA".into(),
            tags: vec![GoldTag::new("university", "UCLA")],
        }]);
    }
}
