//! Model dispatch: prompt in, token stream out, plus the parsing and
//! reconciliation applied to what comes back.

mod parser;
mod remote;
mod scripted;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use parser::{parse_all, ParseError, ParseEvent, StreamParser};
pub use remote::{RemoteModel, RemoteModelConfig};
pub use scripted::{tokenize, ModelRule, ScriptedModel, ScriptedModelSpec};

use crate::ledger::{Millis, INTERRUPT_TOKEN};

/// What a token stream has to offer right now.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamStep {
    /// A token that becomes available `delay_ms` after the previous one (or
    /// after the request, for the first token).
    Token { text: String, delay_ms: Millis },
    /// Nothing yet; poll again later. Only live streams return this.
    Pending,
    End,
    Failed(String),
}

pub trait TokenStream: Send {
    fn next_step(&mut self) -> StreamStep;
    fn cancel(&mut self);
}

pub trait DispatchModel: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str) -> Box<dyn TokenStream>;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReconcileError {
    #[error("emitted text {emitted:?} is not a prefix of the generated chat")]
    NotPrefix { emitted: String },
}

/// Chat text for an interrupted generation: the part that was spoken, then the
/// interrupt token.
pub fn reconcile(generated: &str, emitted: &str) -> Result<String, ReconcileError> {
    if !generated.starts_with(emitted) {
        return Err(ReconcileError::NotPrefix {
            emitted: emitted.to_string(),
        });
    }
    let mut out = emitted.to_string();
    if !out.is_empty() && !out.ends_with(char::is_whitespace) {
        out.push(' ');
    }
    out.push_str(INTERRUPT_TOKEN);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Running,
    Finished,
    Cancelled,
    Aborted,
}

/// Book-keeping for one model call.
#[derive(Debug, Clone)]
pub struct GenerationHandle {
    pub id: u64,
    pub started_at: Millis,
    pub ledger_seq: u64,
    pub status: GenerationStatus,
}

impl GenerationHandle {
    pub fn new(id: u64, started_at: Millis, ledger_seq: u64) -> Self {
        Self {
            id,
            started_at,
            ledger_seq,
            status: GenerationStatus::Running,
        }
    }

    pub fn is_running(&self) -> bool {
        self.status == GenerationStatus::Running
    }

    /// Moves a running generation to `status`. Returns false if it had already
    /// stopped.
    pub fn stop(&mut self, status: GenerationStatus) -> bool {
        if !self.is_running() {
            return false;
        }
        self.status = status;
        true
    }
}

/// Models by name.
#[derive(Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn DispatchModel>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, model: Arc<dyn DispatchModel>) {
        self.models.insert(model.name().to_string(), model);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn DispatchModel>> {
        self.models.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}
