//! Run traces: one record per engine event, serialized as JSON lines behind
//! a schema header.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{MessageKind, RunStatus, StateId};
use crate::transition::Via;

pub const TRACE_SCHEMA: &str = "stateflow-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    TaskInput,
    OutputProduced,
    TransitionTaken,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMessage {
    pub kind: MessageKind,
    pub producer: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceTransition {
    pub from: StateId,
    pub to: StateId,
    pub via: Via,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub state: StateId,
    pub event: TraceEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<TraceMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TraceTransition>,
    /// (prompt, completion) tokens of the backend call behind this record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<(u64, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<RunStatus>,
}

impl TraceRecord {
    pub fn new(step: usize, state: StateId, event: TraceEvent) -> Self {
        TraceRecord {
            step,
            state,
            event,
            message: None,
            transition: None,
            tokens: None,
            model: None,
            status: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("unsupported trace schema `{0}`")]
    Schema(String),
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunTrace {
    records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Entered states in order: the initial state, then every transition
    /// target.
    pub fn states_visited(&self) -> Vec<StateId> {
        let mut out = Vec::new();
        for r in &self.records {
            match r.event {
                TraceEvent::TaskInput if out.is_empty() => out.push(r.state.clone()),
                TraceEvent::TransitionTaken => {
                    if let Some(t) = &r.transition {
                        out.push(t.to.clone());
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Every message in history order.
    pub fn messages(&self) -> Vec<&TraceMessage> {
        self.records.iter().filter_map(|r| r.message.as_ref()).collect()
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.records.iter().rev().find_map(|r| r.status)
    }

    /// Token pairs with the model they were billed to.
    pub fn token_records(&self) -> impl Iterator<Item = (u64, u64, Option<&str>)> {
        self.records
            .iter()
            .filter_map(|r| r.tokens.map(|(p, c)| (p, c, r.model.as_deref())))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &Header {
            schema: TRACE_SCHEMA.to_string(),
        })?;
        out.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, TraceError> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| {
            l.as_ref().map_or(true, |s| !s.trim().is_empty())
        });
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: Header =
            serde_json::from_str(&first?).map_err(|source| TraceError::Record { line: 1, source })?;
        if header.schema != TRACE_SCHEMA {
            return Err(TraceError::Schema(header.schema));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let record = serde_json::from_str(&line?).map_err(|source| TraceError::Record {
                line: i + 1,
                source,
            })?;
            records.push(record);
        }
        Ok(RunTrace { records })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        Self::read_jsonl(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_records() {
        let mut t = RunTrace::new();
        let mut r = TraceRecord::new(0, "Init".into(), TraceEvent::TaskInput);
        r.message = Some(TraceMessage {
            kind: MessageKind::Task,
            producer: "task-input".into(),
            content: "q".into(),
        });
        t.push(r);
        let mut end = TraceRecord::new(0, "Init".into(), TraceEvent::Terminated);
        end.status = Some(RunStatus::ReachedFinal);
        t.push(end);
        let text = t.to_jsonl();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(r#"{"schema":"stateflow-trace/1"}"#));
        assert!(lines.next().unwrap().contains(r#""event":"TaskInput""#));
        assert_eq!(RunTrace::from_jsonl(&text).unwrap(), t);
        assert_eq!(t.status(), Some(RunStatus::ReachedFinal));
    }

    #[test]
    fn rejects_other_schema() {
        assert!(matches!(
            RunTrace::from_jsonl("{\"schema\":\"other/2\"}\n"),
            Err(TraceError::Schema(_))
        ));
        assert!(matches!(RunTrace::from_jsonl(""), Err(TraceError::Empty)));
    }
}
