//! Wire frames. Every frame is a JSON object tagged by `kind`; server frames
//! also carry the protocol version `v`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use asyncagent_core::processes::ProcessInfo;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientFrame {
    UtteranceStart,
    UtteranceEnd { text: String },
    Kill { pid: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerFrame {
    StateChange { state: String },
    LedgerAppend { message: Value },
    LedgerRewrite { seq: u64, message: Value },
    EmitSegment { text: String },
    EmissionHalted { emitted: String },
    ProcessTree { processes: Vec<ProcessInfo> },
    Clock { now_ms: u64 },
    Error { detail: String },
}

#[derive(Serialize)]
struct Versioned<'a> {
    v: u32,
    #[serde(flatten)]
    frame: &'a ServerFrame,
}

impl ServerFrame {
    pub fn error(detail: impl Into<String>) -> Self {
        ServerFrame::Error {
            detail: detail.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Versioned {
            v: PROTOCOL_VERSION,
            frame: self,
        })
        .expect("frame serializes")
    }

    /// Parses a server frame, ignoring the version field.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut value: Value = serde_json::from_str(text)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("v");
        }
        serde_json::from_value(value)
    }
}

impl ClientFrame {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("malformed frame: {e}"))
    }
}

/// Client-side view of the root ledger rebuilt from frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LedgerMirror {
    messages: Vec<Value>,
}

impl LedgerMirror {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies a frame; frames that do not touch the ledger are ignored.
    pub fn apply(&mut self, frame: &ServerFrame) -> Result<(), String> {
        match frame {
            ServerFrame::LedgerAppend { message } => {
                let seq = message.get("seq").and_then(Value::as_u64);
                if seq != Some(self.messages.len() as u64) {
                    return Err(format!(
                        "append out of order: expected seq {}, got {seq:?}",
                        self.messages.len()
                    ));
                }
                self.messages.push(message.clone());
            }
            ServerFrame::LedgerRewrite { seq, message } => {
                let slot = self
                    .messages
                    .get_mut(*seq as usize)
                    .ok_or_else(|| format!("rewrite of unknown seq {seq}"))?;
                *slot = message.clone();
            }
            _ => {}
        }
        Ok(())
    }

    pub fn messages(&self) -> &[Value] {
        &self.messages
    }

    /// The canonical document form, as produced by `Ledger::serialize`.
    pub fn to_document(&self) -> Value {
        serde_json::json!({ "messages": self.messages })
    }
}
