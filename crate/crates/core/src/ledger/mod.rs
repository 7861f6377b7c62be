//! Message data model and the append-only ledger.
//!
//! The ledger is the single source of truth for what the dispatch model
//! sees. Entries are appended atomically and never edited, with two narrow
//! exceptions owned by the dispatcher:
//!
//! - an assistant message opened at generation start is written once when the
//!   generation finishes (`finalize_assistant`);
//! - an assistant message whose chat was cut short by the user is rewritten to
//!   the emitted prefix plus [`INTERRUPT_TOKEN`] (`rewrite_interrupted`).

mod codec;
mod template;

use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::events::Priority;
use crate::toolkit::RequestId;

pub use template::{ChatMlTemplate, DefaultTemplate, PromptTemplate, TemplateRegistry};

/// Marker appended to assistant chat that was cut off by the user.
pub const INTERRUPT_TOKEN: &str = "<|interrupt|>";

/// Session-relative time in milliseconds.
pub type Millis = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    System,
    User,
    Assistant,
    Notification,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Notification => "notification",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            "notification" => Ok(Role::Notification),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserContent {
    pub timestamp: Millis,
    pub chat: String,
}

/// One tool call produced by the dispatch model.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionCall {
    payload: Map<String, Value>,
    /// Assigned when the call is dispatched.
    pub request_id: Option<RequestId>,
}

impl FunctionCall {
    /// Builds a call from a JSON payload. The payload must be an object with a
    /// string `name` field naming the target tool.
    pub fn new(payload: Value) -> Result<Self, LedgerError> {
        match payload {
            Value::Object(map) => match map.get("name") {
                Some(Value::String(_)) => Ok(Self {
                    payload: map,
                    request_id: None,
                }),
                _ => Err(LedgerError::InvalidFunction(
                    "payload has no string `name` field".into(),
                )),
            },
            _ => Err(LedgerError::InvalidFunction(
                "payload is not a JSON object".into(),
            )),
        }
    }

    pub fn tool_name(&self) -> &str {
        self.payload
            .get("name")
            .and_then(Value::as_str)
            .unwrap_or_default()
    }

    pub fn payload(&self) -> &Map<String, Value> {
        &self.payload
    }
}

/// Segment kinds of a streamed assistant message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Thought,
    Function,
    Chat,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 3] = [SegmentKind::Thought, SegmentKind::Function, SegmentKind::Chat];

    pub fn marker(self) -> &'static str {
        match self {
            SegmentKind::Thought => "<|thought|>",
            SegmentKind::Function => "<|function|>",
            SegmentKind::Chat => "<|chat|>",
        }
    }
}

/// Assistant content. `order` records the first-appearance order of each
/// segment kind so that serialization can preserve generation order. Two
/// contents are equal when their fields and normalized segment order agree.
#[derive(Debug, Clone, Default)]
pub struct AssistantContent {
    pub thought: String,
    pub functions: Vec<FunctionCall>,
    pub chat: String,
    pub interrupted: bool,
    order: Vec<SegmentKind>,
}

impl AssistantContent {
    pub fn chat(text: impl Into<String>) -> Self {
        let mut content = Self::default();
        content.push_chat(&text.into());
        content
    }

    pub fn push_thought(&mut self, text: &str) {
        self.note(SegmentKind::Thought);
        self.thought.push_str(text);
    }

    pub fn push_chat(&mut self, text: &str) {
        self.note(SegmentKind::Chat);
        self.chat.push_str(text);
    }

    pub fn push_function(&mut self, call: FunctionCall) {
        self.note(SegmentKind::Function);
        self.functions.push(call);
    }

    /// Records that a segment of `kind` was opened, even if it stays empty.
    pub fn note(&mut self, kind: SegmentKind) {
        if !self.order.contains(&kind) {
            self.order.push(kind);
        }
    }

    pub fn opened(&self, kind: SegmentKind) -> bool {
        self.order.contains(&kind)
    }

    /// Segment kinds in generation order, followed by any never-produced kinds
    /// in the default order.
    pub fn segment_order(&self) -> Vec<SegmentKind> {
        let mut order = self.order.clone();
        for kind in SegmentKind::ALL {
            if !order.contains(&kind) {
                order.push(kind);
            }
        }
        order
    }

    pub fn produced_order(&self) -> &[SegmentKind] {
        &self.order
    }

    pub(crate) fn with_order(mut self, order: Vec<SegmentKind>) -> Self {
        self.order = order;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.thought.is_empty() && self.functions.is_empty() && self.chat.is_empty()
    }
}

impl PartialEq for AssistantContent {
    fn eq(&self, other: &Self) -> bool {
        self.thought == other.thought
            && self.functions == other.functions
            && self.chat == other.chat
            && self.interrupted == other.interrupted
            && self.segment_order() == other.segment_order()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NotificationSource {
    System,
    Tool {
        tool: String,
        request_id: RequestId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotificationContent {
    pub source: NotificationSource,
    pub timestamp: Millis,
    pub data: String,
}

impl NotificationContent {
    pub fn system(timestamp: Millis, data: impl Into<String>) -> Self {
        Self {
            source: NotificationSource::System,
            timestamp,
            data: data.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    System(String),
    User(UserContent),
    Assistant(AssistantContent),
    Notification(NotificationContent),
}

impl Content {
    pub fn role(&self) -> Role {
        match self {
            Content::System(_) => Role::System,
            Content::User(_) => Role::User,
            Content::Assistant(_) => Role::Assistant,
            Content::Notification(_) => Role::Notification,
        }
    }

    pub fn timestamp(&self) -> Option<Millis> {
        match self {
            Content::User(u) => Some(u.timestamp),
            Content::Notification(n) => Some(n.timestamp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub seq: u64,
    pub role: Role,
    pub priority: Priority,
    pub content: Content,
}

impl Message {
    pub fn assistant(&self) -> Option<&AssistantContent> {
        match &self.content {
            Content::Assistant(a) => Some(a),
            _ => None,
        }
    }

    pub fn notification(&self) -> Option<&NotificationContent> {
        match &self.content {
            Content::Notification(n) => Some(n),
            _ => None,
        }
    }

    pub fn user(&self) -> Option<&UserContent> {
        match &self.content {
            Content::User(u) => Some(u),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        codec::message_to_value(self)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LedgerError {
    #[error("role `{role}` does not accept {content} content")]
    RoleMismatch { role: Role, content: Role },
    #[error("invalid function call: {0}")]
    InvalidFunction(String),
    #[error("no message with seq {0}")]
    UnknownSeq(u64),
    #[error("message {0} is not an open assistant message")]
    NotOpen(u64),
    #[error("invalid interruption rewrite of message {seq}: {detail}")]
    InvalidRewrite { seq: u64, detail: String },
    #[error("malformed ledger document at message {index}: {detail}")]
    Malformed { index: usize, detail: String },
    #[error("malformed ledger document: {0}")]
    Document(String),
}

/// Append-only ordered list of messages.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    messages: Vec<Message>,
    // Seq of the assistant message opened by an in-flight generation.
    open: Option<u64>,
}

impl PartialEq for Ledger {
    fn eq(&self, other: &Self) -> bool {
        self.messages == other.messages
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn get(&self, seq: u64) -> Option<&Message> {
        self.messages.get(seq as usize)
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    /// Appends a message and returns its seq. Rejects content that does not
    /// match `role` without touching the ledger.
    pub fn append(
        &mut self,
        role: Role,
        content: Content,
        priority: Priority,
    ) -> Result<u64, LedgerError> {
        if content.role() != role {
            return Err(LedgerError::RoleMismatch {
                role,
                content: content.role(),
            });
        }
        let seq = self.messages.len() as u64;
        self.messages.push(Message {
            seq,
            role,
            priority,
            content,
        });
        Ok(seq)
    }

    /// Appends an empty assistant message that will be written exactly once by
    /// [`Ledger::finalize_assistant`].
    pub fn open_assistant(&mut self, priority: Priority) -> u64 {
        let seq = self
            .append(
                Role::Assistant,
                Content::Assistant(AssistantContent::default()),
                priority,
            )
            .expect("assistant content matches assistant role");
        self.open = Some(seq);
        seq
    }

    pub fn open_seq(&self) -> Option<u64> {
        self.open
    }

    pub fn finalize_assistant(
        &mut self,
        seq: u64,
        content: AssistantContent,
    ) -> Result<(), LedgerError> {
        if self.open != Some(seq) {
            return Err(LedgerError::NotOpen(seq));
        }
        let msg = self
            .messages
            .get_mut(seq as usize)
            .ok_or(LedgerError::UnknownSeq(seq))?;
        msg.content = Content::Assistant(content);
        self.open = None;
        Ok(())
    }

    /// Replaces the chat of a finalized assistant message with `new_chat`,
    /// which must be a prefix of the current chat followed by the interrupt
    /// token (optionally separated by one space), and marks it interrupted.
    pub fn rewrite_interrupted(&mut self, seq: u64, new_chat: &str) -> Result<(), LedgerError> {
        let invalid = |detail: &str| LedgerError::InvalidRewrite {
            seq,
            detail: detail.to_string(),
        };
        if self.open == Some(seq) {
            return Err(invalid("message is still open"));
        }
        let msg = self
            .messages
            .get_mut(seq as usize)
            .ok_or(LedgerError::UnknownSeq(seq))?;
        let Content::Assistant(content) = &mut msg.content else {
            return Err(invalid("not an assistant message"));
        };
        if content.interrupted {
            return Err(invalid("already interrupted"));
        }
        let Some(kept) = new_chat.strip_suffix(INTERRUPT_TOKEN) else {
            return Err(invalid("missing interrupt token"));
        };
        let kept_prefix = kept.strip_suffix(' ').filter(|k| !k.is_empty()).unwrap_or(kept);
        if !content.chat.starts_with(kept_prefix) {
            return Err(invalid("kept text is not a prefix of the generated chat"));
        }
        content.chat = new_chat.to_string();
        content.interrupted = true;
        content.note(SegmentKind::Chat);
        Ok(())
    }

    /// Independent deep copy. The open-message marker is not carried over.
    pub fn copy(&self) -> Ledger {
        Ledger {
            messages: self.messages.clone(),
            open: None,
        }
    }

    /// Copy of the messages before the open assistant message (all of them
    /// if none is open).
    pub fn committed_prefix(&self) -> Ledger {
        let end = self.open.map_or(self.messages.len(), |seq| seq as usize);
        Ledger {
            messages: self.messages[..end].to_vec(),
            open: None,
        }
    }

    /// Canonical JSON document.
    pub fn serialize(&self) -> String {
        codec::ledger_to_string(self)
    }

    pub fn deserialize(text: &str) -> Result<Ledger, LedgerError> {
        let messages = codec::ledger_from_str(text)?;
        Ok(Ledger {
            messages,
            open: None,
        })
    }

    /// Renders the ledger with `template`.
    pub fn render(&self, template: &dyn PromptTemplate) -> String {
        template.render(self)
    }
}
