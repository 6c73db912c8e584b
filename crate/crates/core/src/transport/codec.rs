//! Newline-delimited JSON frames with sorted keys.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{Endpoint, PeerId, Task, TaskId, TaskResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    TaskForward,
    ResultReturn,
    Ack,
    ErrorReport,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::TaskForward => "task_forward",
            MessageKind::ResultReturn => "result_return",
            MessageKind::Ack => "ack",
            MessageKind::ErrorReport => "error_report",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "task_forward" => MessageKind::TaskForward,
            "result_return" => MessageKind::ResultReturn,
            "ack" => MessageKind::Ack,
            "error_report" => MessageKind::ErrorReport,
            _ => return None,
        })
    }
}

/// Why a subtree gave up, and which peers it found hung or exhausted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub reason: String,
    #[serde(default)]
    pub tried: BTreeSet<PeerId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    TaskForward(Task),
    ResultReturn(TaskResult),
    Ack,
    ErrorReport(ErrorBody),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::TaskForward(_) => MessageKind::TaskForward,
            Body::ResultReturn(_) => MessageKind::ResultReturn,
            Body::Ack => MessageKind::Ack,
            Body::ErrorReport(_) => MessageKind::ErrorReport,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub task_id: TaskId,
    pub sender: Endpoint,
    pub body: Body,
}

impl WireMessage {
    pub fn new(task_id: TaskId, sender: Endpoint, body: Body) -> Self {
        WireMessage { task_id, sender, body }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed frame at byte {offset}: {message}")]
    MalformedFrame { offset: usize, message: String },
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
}

fn malformed(offset: usize, message: impl Into<String>) -> CodecError {
    CodecError::MalformedFrame { offset, message: message.into() }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    kind: String,
    task_id: TaskId,
    sender: Endpoint,
    body: Value,
}

/// One line of JSON, keys sorted at every level, terminated by `\n`.
pub fn encode(message: &WireMessage) -> Vec<u8> {
    let body = match &message.body {
        Body::TaskForward(t) => serde_json::to_value(t),
        Body::ResultReturn(r) => serde_json::to_value(r),
        Body::Ack => Ok(Value::Object(Default::default())),
        Body::ErrorReport(e) => serde_json::to_value(e),
    }
    .expect("wire types serialize");
    let raw = RawFrame {
        kind: message.kind().as_str().to_string(),
        task_id: message.task_id,
        sender: message.sender.clone(),
        body,
    };
    // Round-tripping through Value sorts object keys; JSON escapes keep
    // embedded newlines out of the frame.
    let value = serde_json::to_value(&raw).expect("frame serializes");
    let mut out = serde_json::to_vec(&value).expect("value serializes");
    out.push(b'\n');
    out
}

/// Parses exactly one frame, trailing newline included.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, CodecError> {
    let Some((&last, line)) = bytes.split_last() else {
        return Err(malformed(0, "empty frame"));
    };
    if last != b'\n' {
        return Err(malformed(bytes.len(), "frame is not newline-terminated"));
    }
    if let Some(pos) = line.iter().position(|&b| b == b'\n') {
        return Err(malformed(pos, "more than one line in frame"));
    }
    let value: Value = serde_json::from_slice(line).map_err(|e| malformed(error_offset(line, &e), e.to_string()))?;
    let kind = match value.get("kind") {
        Some(Value::String(k)) => k.clone(),
        Some(_) => return Err(malformed(0, "kind must be a string")),
        None => return Err(malformed(0, "missing field `kind`")),
    };
    let kind = MessageKind::parse(&kind).ok_or(CodecError::UnknownKind(kind))?;
    let raw: RawFrame = serde_json::from_value(value).map_err(|e| malformed(0, e.to_string()))?;
    let body_err = |e: serde_json::Error| malformed(0, format!("body: {e}"));
    let body = match kind {
        MessageKind::TaskForward => Body::TaskForward(serde_json::from_value(raw.body).map_err(body_err)?),
        MessageKind::ResultReturn => Body::ResultReturn(serde_json::from_value(raw.body).map_err(body_err)?),
        MessageKind::Ack => match raw.body {
            Value::Object(m) if m.is_empty() => Body::Ack,
            _ => return Err(malformed(0, "ack body must be {}")),
        },
        MessageKind::ErrorReport => Body::ErrorReport(serde_json::from_value(raw.body).map_err(body_err)?),
    };
    Ok(WireMessage { task_id: raw.task_id, sender: raw.sender, body })
}

/// Byte offset of a parse error inside a single-line frame.
fn error_offset(line: &[u8], e: &serde_json::Error) -> usize {
    if e.is_eof() {
        return line.len();
    }
    e.column().saturating_sub(1).min(line.len())
}
