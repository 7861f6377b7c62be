//! Events and the priority scheduling queue.
//!
//! Lower priority values are more urgent. [`Priority::Min`] sorts before every
//! finite level. Ties are broken by enqueue order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::fsm::FsmState;
use crate::ledger::{Content, Millis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Priority {
    /// Below every finite level; processed as soon as the gate allows.
    Min,
    Level(i64),
}

impl Priority {
    pub fn to_json(self) -> Value {
        match self {
            Priority::Min => Value::String("MIN".into()),
            Priority::Level(v) => Value::from(v),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        match v {
            Value::String(s) if s == "MIN" => Ok(Priority::Min),
            Value::Number(n) => n
                .as_i64()
                .map(Priority::Level)
                .ok_or_else(|| format!("priority {n} is not an integer")),
            other => Err(format!("priority {other} is neither an integer nor \"MIN\"")),
        }
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Priority::Min => f.write_str("MIN"),
            Priority::Level(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Priority {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Priority::Min => serializer.serialize_str("MIN"),
            Priority::Level(v) => serializer.serialize_i64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Priority {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(deserializer)?;
        Priority::from_json(&v).map_err(serde::de::Error::custom)
    }
}

impl From<i64> for Priority {
    fn from(v: i64) -> Self {
        Priority::Level(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GenerateDone,
    Emit,
    EmitDone,
    Interrupt,
    ToolResponseReceived,
    UserChat,
    ToolRequestSent,
    TimePassage,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::GenerateDone,
        EventKind::Emit,
        EventKind::EmitDone,
        EventKind::Interrupt,
        EventKind::ToolResponseReceived,
        EventKind::UserChat,
        EventKind::ToolRequestSent,
        EventKind::TimePassage,
    ];

    pub fn carries_message(self) -> bool {
        !matches!(
            self,
            EventKind::GenerateDone | EventKind::Emit | EventKind::EmitDone
        )
    }

    /// Default priority. Tool responses have none: they use the tool's own.
    pub fn default_priority(self) -> Option<Priority> {
        match self {
            EventKind::GenerateDone
            | EventKind::Emit
            | EventKind::EmitDone
            | EventKind::Interrupt
            | EventKind::ToolRequestSent => Some(Priority::Min),
            EventKind::ToolResponseReceived => None,
            EventKind::UserChat => Some(Priority::Level(-1)),
            EventKind::TimePassage => Some(Priority::Level(1)),
        }
    }

    pub fn target_state(self) -> FsmState {
        match self {
            EventKind::GenerateDone | EventKind::EmitDone | EventKind::ToolRequestSent => {
                FsmState::Idle
            }
            EventKind::Emit => FsmState::Emitting,
            EventKind::Interrupt => FsmState::Listening,
            EventKind::ToolResponseReceived | EventKind::UserChat | EventKind::TimePassage => {
                FsmState::Generating
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::GenerateDone => "generate_done",
            EventKind::Emit => "emit",
            EventKind::EmitDone => "emit_done",
            EventKind::Interrupt => "interrupt",
            EventKind::ToolResponseReceived => "tool_response_received",
            EventKind::UserChat => "user_chat",
            EventKind::ToolRequestSent => "tool_request_sent",
            EventKind::TimePassage => "time_passage",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EventError {
    #[error("{0} events must carry a message")]
    MissingMessage(EventKind),
    #[error("{0} events carry no message")]
    UnexpectedMessage(EventKind),
    #[error("{0} events need an explicit priority")]
    MissingPriority(EventKind),
    #[error("scheduling queue is empty")]
    EmptyQueue,
}

/// A prioritized request for a state transition, optionally carrying a
/// message for the ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub kind: EventKind,
    pub priority: Priority,
    pub message: Option<Content>,
    pub target_state: FsmState,
    /// Assigned by the queue on push.
    pub enqueue_seq: u64,
    /// Assigned by the queue on push.
    pub enqueue_time: Millis,
}

impl Event {
    /// Builds an event with an explicit priority and target, checking message
    /// presence against the kind.
    pub fn new(
        kind: EventKind,
        priority: Priority,
        message: Option<Content>,
        target_state: FsmState,
    ) -> Result<Self, EventError> {
        match (kind.carries_message(), message.is_some()) {
            (true, false) => return Err(EventError::MissingMessage(kind)),
            (false, true) => return Err(EventError::UnexpectedMessage(kind)),
            _ => {}
        }
        Ok(Self {
            kind,
            priority,
            message,
            target_state,
            enqueue_seq: 0,
            enqueue_time: 0,
        })
    }

    /// Builds an event with the kind's default priority and target.
    pub fn standard(kind: EventKind, message: Option<Content>) -> Result<Self, EventError> {
        let priority = kind
            .default_priority()
            .ok_or(EventError::MissingPriority(kind))?;
        Self::new(kind, priority, message, kind.target_state())
    }

    pub fn with_priority(mut self, priority: Priority) -> Self {
        self.priority = priority;
        self
    }

    pub fn generate_done() -> Self {
        Self::standard(EventKind::GenerateDone, None).expect("valid")
    }

    pub fn emit() -> Self {
        Self::standard(EventKind::Emit, None).expect("valid")
    }

    pub fn emit_done() -> Self {
        Self::standard(EventKind::EmitDone, None).expect("valid")
    }

    pub fn tool_response(priority: Priority, message: Content) -> Self {
        Self::new(
            EventKind::ToolResponseReceived,
            priority,
            Some(message),
            FsmState::Generating,
        )
        .expect("valid")
    }

    pub fn with_message(kind: EventKind, message: Content) -> Result<Self, EventError> {
        Self::standard(kind, Some(message))
    }

    fn key(&self) -> (Priority, u64) {
        (self.priority, self.enqueue_seq)
    }
}

/// Priority queue of events ordered by `(priority, enqueue_seq)`.
#[derive(Debug, Clone, Default)]
pub struct SchedulingQueue {
    events: BTreeMap<(Priority, u64), Event>,
    next_seq: u64,
}

impl SchedulingQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enqueues `event`, stamping its enqueue seq and time. Returns the seq.
    pub fn push(&mut self, mut event: Event, now: Millis) -> u64 {
        event.enqueue_seq = self.next_seq;
        event.enqueue_time = now;
        self.next_seq += 1;
        let seq = event.enqueue_seq;
        self.events.insert(event.key(), event);
        seq
    }

    pub fn top(&self) -> Option<&Event> {
        self.events.values().next()
    }

    pub fn pop(&mut self) -> Result<Event, EventError> {
        self.events
            .pop_first()
            .map(|(_, e)| e)
            .ok_or(EventError::EmptyQueue)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events in pop order.
    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.values()
    }

    /// Drops every queued time_passage event except the most recently
    /// enqueued one.
    pub fn coalesce_time_passage(&mut self) {
        let newest = self
            .events
            .values()
            .filter(|e| e.kind == EventKind::TimePassage)
            .map(|e| e.enqueue_seq)
            .max();
        if let Some(newest) = newest {
            self.events
                .retain(|_, e| e.kind != EventKind::TimePassage || e.enqueue_seq == newest);
        }
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.values().filter(|e| e.kind == kind).count()
    }

    /// Removes all events.
    pub fn clear(&mut self) {
        self.events.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{NotificationContent, UserContent};

    fn note(t: Millis) -> Content {
        Content::Notification(NotificationContent::system(t, format!("Time passed. t={t} ms")))
    }

    fn user(t: Millis) -> Content {
        Content::User(UserContent {
            timestamp: t,
            chat: "hi".into(),
        })
    }

    fn at(p: Priority) -> Event {
        Event::new(EventKind::TimePassage, p, Some(note(0)), FsmState::Generating).unwrap()
    }

    #[test]
    fn min_is_below_every_level() {
        for v in [i64::MIN, -1, 0, 1, i64::MAX] {
            assert!(Priority::Min < Priority::Level(v));
        }
        assert!(Priority::Level(-2) < Priority::Level(-1));
    }

    #[test]
    fn priority_json_forms() {
        assert_eq!(Priority::Min.to_json(), serde_json::json!("MIN"));
        assert_eq!(Priority::from_json(&serde_json::json!(-1)), Ok(Priority::Level(-1)));
        assert!(Priority::from_json(&serde_json::json!("min")).is_err());
        assert!(Priority::from_json(&serde_json::json!(1.5)).is_err());
    }

    #[test]
    fn table_one_bindings() {
        use EventKind::*;
        use FsmState::*;
        let expected = [
            (GenerateDone, Some(Priority::Min), false, Idle),
            (Emit, Some(Priority::Min), false, Emitting),
            (EmitDone, Some(Priority::Min), false, Idle),
            (Interrupt, Some(Priority::Min), true, Listening),
            (ToolResponseReceived, None, true, Generating),
            (UserChat, Some(Priority::Level(-1)), true, Generating),
            (ToolRequestSent, Some(Priority::Min), true, Idle),
            (TimePassage, Some(Priority::Level(1)), true, Generating),
        ];
        for (kind, priority, message, state) in expected {
            assert_eq!(kind.default_priority(), priority, "{kind}");
            assert_eq!(kind.carries_message(), message, "{kind}");
            assert_eq!(kind.target_state(), state, "{kind}");
        }
    }

    #[test]
    fn message_presence_checked_for_all_kinds() {
        for kind in EventKind::ALL {
            let with = Event::new(kind, Priority::Level(0), Some(note(0)), kind.target_state());
            let without = Event::new(kind, Priority::Level(0), None, kind.target_state());
            if kind.carries_message() {
                assert!(with.is_ok());
                assert_eq!(without, Err(EventError::MissingMessage(kind)));
            } else {
                assert_eq!(with, Err(EventError::UnexpectedMessage(kind)));
                assert!(without.is_ok());
            }
        }
        assert_eq!(
            Event::standard(EventKind::ToolResponseReceived, Some(note(0))),
            Err(EventError::MissingPriority(EventKind::ToolResponseReceived))
        );
    }

    #[test]
    fn user_chat_beats_tool_response() {
        let mut q = SchedulingQueue::new();
        q.push(Event::with_message(EventKind::UserChat, user(0)).unwrap(), 0);
        q.push(Event::tool_response(Priority::Level(1), note(0)), 0);
        assert_eq!(q.top().unwrap().kind, EventKind::UserChat);
    }

    #[test]
    fn equal_priorities_are_fifo() {
        let mut q = SchedulingQueue::new();
        let first = q.push(at(Priority::Level(1)), 10);
        q.push(at(Priority::Level(1)), 20);
        assert_eq!(q.top().unwrap().enqueue_seq, first);
        assert_eq!(q.pop().unwrap().enqueue_time, 10);
        assert_eq!(q.pop().unwrap().enqueue_time, 20);
    }

    #[test]
    fn interrupt_jumps_ahead() {
        let mut q = SchedulingQueue::new();
        q.push(at(Priority::Level(-5)), 0);
        q.push(
            Event::with_message(EventKind::Interrupt, note(0)).unwrap(),
            0,
        );
        assert_eq!(q.top().unwrap().kind, EventKind::Interrupt);
    }

    #[test]
    fn top_and_pop() {
        let mut q = SchedulingQueue::new();
        assert!(q.top().is_none());
        assert_eq!(q.pop(), Err(EventError::EmptyQueue));
        q.push(at(Priority::Level(2)), 0);
        q.push(at(Priority::Level(0)), 0);
        assert_eq!(q.top().unwrap().priority, Priority::Level(0));
        assert_eq!(q.top(), q.top());
        assert_eq!(q.pop().unwrap().priority, Priority::Level(0));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn coalesce_keeps_newest_tick() {
        let mut q = SchedulingQueue::new();
        q.push(Event::with_message(EventKind::TimePassage, note(5000)).unwrap(), 5000);
        q.push(Event::with_message(EventKind::UserChat, user(6000)).unwrap(), 6000);
        q.push(Event::with_message(EventKind::TimePassage, note(10000)).unwrap(), 10000);
        q.push(Event::with_message(EventKind::TimePassage, note(15000)).unwrap(), 15000);
        q.coalesce_time_passage();
        assert_eq!(q.len(), 2);
        let tick = q.iter().find(|e| e.kind == EventKind::TimePassage).unwrap();
        assert_eq!(tick.message.as_ref().unwrap().timestamp(), Some(15000));

        let mut empty = SchedulingQueue::new();
        empty.push(Event::with_message(EventKind::UserChat, user(0)).unwrap(), 0);
        empty.coalesce_time_passage();
        assert_eq!(empty.len(), 1);
    }
}
