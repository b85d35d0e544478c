//! Append-only session event log and its JSONL encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{AdviceType, Recommendation};
use crate::vectorcore::TagSource;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Client,
    Operator,
    Agent,
}

/// Operating phase of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Humans only; the agent observes.
    #[default]
    Collect,
    /// The agent advises and the session still feeds training.
    AdviseAndCollect,
    /// Steady state: advice only, nothing exported for training.
    AdviseOnly,
}

impl Mode {
    pub fn advises(self) -> bool {
        !matches!(self, Mode::Collect)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Collect => "collect",
            Mode::AdviseAndCollect => "advise_and_collect",
            Mode::AdviseOnly => "advise_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "collect" => Ok(Mode::Collect),
            "advise_and_collect" => Ok(Mode::AdviseAndCollect),
            "advise_only" => Ok(Mode::AdviseOnly),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessagePayload {
    /// Position of this message in the client's conversation.
    pub message_index: usize,
    pub text: String,
    /// Advice items this operator message carries out, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagPayload {
    pub category: String,
    pub value: String,
    pub message_index: usize,
    pub source: TagSource,
    /// False for categories outside the active label list (schema-growth candidates).
    pub in_schema: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvicePayload {
    pub advice_id: String,
    pub recommendations: BTreeMap<AdviceType, Recommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviceAcceptedPayload {
    pub advice_id: String,
    pub item_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsePayload {
    pub resource_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEndPayload {
    pub reason: String,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    Message(MessagePayload),
    Tag(TagPayload),
    Advice(AdvicePayload),
    AdviceAccepted(AdviceAcceptedPayload),
    ResourceUse(ResourceUsePayload),
    SessionEnd(SessionEndPayload),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Message(_) => "message",
            EventBody::Tag(_) => "tag",
            EventBody::Advice(_) => "advice",
            EventBody::AdviceAccepted(_) => "advice_accepted",
            EventBody::ResourceUse(_) => "resource_use",
            EventBody::SessionEnd(_) => "session_end",
        }
    }
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub ts_ms: u64,
    pub session_id: String,
    pub client_id: String,
    pub actor: Actor,
    #[serde(flatten)]
    pub body: EventBody,
}

impl LogEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log events serialize")
    }
}

/// Ordered event stream of one session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionLog {
    pub events: Vec<LogEvent>,
}

impl SessionLog {
    pub fn new(events: Vec<LogEvent>) -> Self {
        Self { events }
    }

    pub fn session_id(&self) -> Option<&str> {
        self.events.first().map(|e| e.session_id.as_str())
    }

    /// Client ids in order of first appearance.
    pub fn clients(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.events {
            if !out.contains(&e.client_id) {
                out.push(e.client_id.clone());
            }
        }
        out
    }

    pub fn for_client<'a>(&'a self, client_id: &'a str) -> impl Iterator<Item = &'a LogEvent> + 'a {
        self.events.iter().filter(move |e| e.client_id == client_id)
    }

    pub fn is_time_ordered(&self) -> bool {
        self.events.windows(2).all(|w| w[0].ts_ms <= w[1].ts_ms)
    }

    /// Mode recorded on the session-end events, if any.
    pub fn mode(&self) -> Option<Mode> {
        self.events.iter().find_map(|e| match &e.body {
            EventBody::SessionEnd(p) => Some(p.mode),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, LogError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(line).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            events.push(event);
        }
        Ok(Self { events })
    }

    pub fn read(path: &Path) -> Result<Self, LogError> {
        let reader = BufReader::new(File::open(path)?);
        let mut events = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { events })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

/// Appends events to a JSONL file, one flushed write per event.
#[derive(Debug)]
pub struct LogWriter {
    file: File,
}

impl LogWriter {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, event: &LogEvent) -> io::Result<()> {
        let mut line = event.to_json_line();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }
}
