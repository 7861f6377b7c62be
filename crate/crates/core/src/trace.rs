//! Timestamped record of everything a run did, stored as JSON lines.
//!
//! The first line is a header carrying the format tag and the run outcome;
//! every following line is one [`TraceRecord`].

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dispatcher::GenerationStatus;
use crate::events::{EventKind, Priority};
use crate::fsm::{FsmState, OverrideReason};
use crate::ledger::Millis;
use crate::processes::Pid;
use crate::toolkit::RequestId;

pub const TRACE_FORMAT: &str = "agent-trace/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    /// Everything settled: idle, nothing queued or pending.
    Quiescent,
    /// Ran up to the configured time limit, as requested.
    TimeLimit,
    /// Hit the time limit before settling.
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewriteReason {
    /// The generation ended and its assistant message got its content.
    Finalize,
    /// The message was cut back to what had been emitted.
    Reconcile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationPhase {
    Start,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionPhase {
    SegmentStart,
    SegmentDone,
    Halted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolPhase {
    Invoked,
    Rejected,
    Completed,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessOp {
    Fork,
    Spawn,
    Finish,
    Kill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RecordBody {
    EventProcessed {
        kind: EventKind,
        priority: Priority,
        enqueue_seq: u64,
        enqueued_at: Millis,
        state_before: FsmState,
        state_after: FsmState,
        message_seq: Option<u64>,
        override_reason: Option<OverrideReason>,
    },
    ForceTransition {
        state_before: FsmState,
        state_after: FsmState,
        reason: String,
    },
    LedgerAppend {
        message: Value,
    },
    LedgerRewrite {
        seq: u64,
        reason: RewriteReason,
        message: Value,
    },
    Generation {
        generation: u64,
        phase: GenerationPhase,
        status: GenerationStatus,
        detail: Option<String>,
    },
    Emission {
        phase: EmissionPhase,
        text: String,
    },
    Tool {
        phase: ToolPhase,
        tool: String,
        request_id: Option<RequestId>,
        detail: Option<String>,
    },
    Process {
        op: ProcessOp,
        child: Pid,
        parent: Option<Pid>,
        origin_request: Option<RequestId>,
        detail: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: Millis,
    pub pid: Pid,
    #[serde(flatten)]
    pub body: RecordBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub outcome: RunOutcome,
    pub end_time: Millis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("trace line {line}: {detail}")]
pub struct TraceError {
    pub line: usize,
    pub detail: String,
}

impl Trace {
    pub fn new(outcome: RunOutcome, end_time: Millis, records: Vec<TraceRecord>) -> Self {
        Self {
            header: TraceHeader {
                format: TRACE_FORMAT.to_string(),
                outcome,
                end_time,
            },
            records,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TraceError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(TraceError {
            line: 1,
            detail: "missing header".into(),
        })?;
        let header: TraceHeader = serde_json::from_str(first).map_err(|e| TraceError {
            line: 1,
            detail: e.to_string(),
        })?;
        if header.format != TRACE_FORMAT {
            return Err(TraceError {
                line: 1,
                detail: format!("unsupported format `{}`", header.format),
            });
        }
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| TraceError {
                    line: i + 1,
                    detail: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, records })
    }

    /// Records of one process.
    pub fn for_pid(&self, pid: Pid) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.pid == pid)
    }
}

/// One differing field at the first diverging line. Line 0 is the header;
/// record `i` is line `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub line: usize,
    pub field: String,
    pub left: Option<Value>,
    pub right: Option<Value>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<Value>| match v {
            Some(v) => v.to_string(),
            None => "<absent>".to_string(),
        };
        write!(
            f,
            "line {}: {}: {} != {}",
            self.line,
            self.field,
            show(&self.left),
            show(&self.right)
        )
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&path, v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), v, out);
            }
            if items.is_empty() {
                out.push((prefix.to_string(), value.clone()));
            }
        }
        _ => out.push((prefix.to_string(), value.clone())),
    }
}

fn field_diffs(line: usize, a: Option<&Value>, b: Option<&Value>) -> Vec<Divergence> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    if let Some(a) = a {
        flatten("", a, &mut left);
    }
    if let Some(b) = b {
        flatten("", b, &mut right);
    }
    let mut out = Vec::new();
    for (path, lv) in &left {
        let rv = right.iter().find(|(p, _)| p == path).map(|(_, v)| v);
        if rv != Some(lv) {
            out.push(Divergence {
                line,
                field: path.clone(),
                left: Some(lv.clone()),
                right: rv.cloned(),
            });
        }
    }
    for (path, rv) in &right {
        if !left.iter().any(|(p, _)| p == path) {
            out.push(Divergence {
                line,
                field: path.clone(),
                left: None,
                right: Some(rv.clone()),
            });
        }
    }
    out
}

/// Field differences at the first line where `a` and `b` disagree; empty iff
/// the traces are equal.
pub fn diff_traces(a: &Trace, b: &Trace) -> Vec<Divergence> {
    let ja: Vec<Value> = std::iter::once(serde_json::to_value(&a.header).expect("header"))
        .chain(a.records.iter().map(|r| serde_json::to_value(r).expect("record")))
        .collect();
    let jb: Vec<Value> = std::iter::once(serde_json::to_value(&b.header).expect("header"))
        .chain(b.records.iter().map(|r| serde_json::to_value(r).expect("record")))
        .collect();
    for line in 0..ja.len().max(jb.len()) {
        let (va, vb) = (ja.get(line), jb.get(line));
        if va != vb {
            return field_diffs(line, va, vb);
        }
    }
    Vec::new()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Trace {
        Trace::new(
            RunOutcome::Quiescent,
            500,
            vec![
                TraceRecord {
                    time: 0,
                    pid: 0,
                    body: RecordBody::EventProcessed {
                        kind: EventKind::UserChat,
                        priority: Priority::Level(-1),
                        enqueue_seq: 0,
                        enqueued_at: 0,
                        state_before: FsmState::Idle,
                        state_after: FsmState::Generating,
                        message_seq: Some(1),
                        override_reason: None,
                    },
                },
                TraceRecord {
                    time: 20,
                    pid: 0,
                    body: RecordBody::Tool {
                        phase: ToolPhase::Invoked,
                        tool: "search".into(),
                        request_id: Some(RequestId::parse("0abd754d495").unwrap()),
                        detail: None,
                    },
                },
            ],
        )
    }

    #[test]
    fn jsonl_round_trip() {
        let trace = sample();
        let text = trace.to_jsonl();
        assert!(text.starts_with("{\"format\":\"agent-trace/1\""));
        assert_eq!(Trace::from_jsonl(&text).unwrap(), trace);
        let first_record: Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(first_record["record"], "event_processed");
        assert_eq!(first_record["message_seq"], 1);
        assert!(first_record["override_reason"].is_null());
    }

    #[test]
    fn diff_of_equal_traces_is_empty() {
        assert!(diff_traces(&sample(), &sample()).is_empty());
    }

    #[test]
    fn diff_names_the_altered_field() {
        let a = sample();
        let mut b = sample();
        if let RecordBody::EventProcessed { priority, .. } = &mut b.records[0].body {
            *priority = Priority::Level(2);
        }
        let diffs = diff_traces(&a, &b);
        assert_eq!(diffs.len(), 1);
        assert_eq!(diffs[0].line, 1);
        assert_eq!(diffs[0].field, "priority");
        assert_eq!(diffs[0].right, Some(Value::from(2)));
    }

    #[test]
    fn diff_reports_missing_records() {
        let a = sample();
        let mut b = sample();
        b.records.pop();
        let diffs = diff_traces(&a, &b);
        assert_eq!(diffs[0].line, 2);
        assert!(diffs.iter().all(|d| d.right.is_none()));
    }

    #[test]
    fn bad_lines_are_located() {
        let mut text = sample().to_jsonl();
        text.push_str("{oops}\n");
        assert_eq!(Trace::from_jsonl(&text).unwrap_err().line, 4);
        assert!(Trace::from_jsonl("").is_err());
    }
}
