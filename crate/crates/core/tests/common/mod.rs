#![allow(dead_code)]

use std::path::PathBuf;

use proptest::prelude::*;
use serde_json::{json, Value};

use asyncagent_core::events::{EventKind, Priority};
use asyncagent_core::harness::{self, RunResult};
use asyncagent_core::ledger::{
    AssistantContent, Content, FunctionCall, Ledger, Message, NotificationContent,
    NotificationSource, Role, SegmentKind, UserContent, INTERRUPT_TOKEN,
};
use asyncagent_core::processes::Pid;
use asyncagent_core::scenario::Scenario;
use asyncagent_core::toolkit::RequestId;
use asyncagent_core::trace::{RecordBody, TraceRecord};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn from_value(v: Value) -> Scenario {
    Scenario::from_json(&v.to_string()).unwrap_or_else(|e| panic!("inline scenario: {e}"))
}

pub fn run(s: &Scenario) -> RunResult {
    harness::run(s).expect("scenario builds")
}

/// Processed-event records of one process, in order.
pub struct Processed<'a> {
    pub index: usize,
    pub record: &'a TraceRecord,
    pub kind: EventKind,
    pub priority: Priority,
    pub enqueue_seq: u64,
    pub enqueued_at: u64,
    pub message_seq: Option<u64>,
}

pub fn processed(records: &[TraceRecord], pid: Pid) -> Vec<Processed<'_>> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.pid == pid)
        .filter_map(|(index, record)| match &record.body {
            RecordBody::EventProcessed {
                kind,
                priority,
                enqueue_seq,
                enqueued_at,
                message_seq,
                ..
            } => Some(Processed {
                index,
                record,
                kind: *kind,
                priority: *priority,
                enqueue_seq: *enqueue_seq,
                enqueued_at: *enqueued_at,
                message_seq: *message_seq,
            }),
            _ => None,
        })
        .collect()
}

pub fn notification(msg: &Message) -> Option<&NotificationContent> {
    msg.notification()
}

pub fn tool_source(msg: &Message) -> Option<(&str, &RequestId)> {
    match &msg.notification()?.source {
        NotificationSource::Tool { tool, request_id } => Some((tool.as_str(), request_id)),
        NotificationSource::System => None,
    }
}

pub fn find_data(ledger: &Ledger, data: &str) -> Option<usize> {
    ledger
        .messages()
        .iter()
        .position(|m| m.notification().is_some_and(|n| n.data == data))
}

/// Minimal scripted scenario document with the given rules and utterances.
pub fn doc(rules: Value, utterances: Value) -> Value {
    json!({
        "format": "agent-scenario/1",
        "system_prompt": "Test agent.",
        "model_rules": rules,
        "utterances": utterances,
    })
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 .,!?{}\"\\\\é\n]{0,16}"
}

fn priority() -> impl Strategy<Value = Priority> {
    prop_oneof![Just(Priority::Min), (-3i64..4).prop_map(Priority::Level)]
}

fn function_call() -> impl Strategy<Value = FunctionCall> {
    (
        "[a-z]{1,8}",
        text(),
        any::<i32>(),
        proptest::option::of(any::<u64>()),
    )
        .prop_map(|(name, arg, n, id)| {
            let mut call = FunctionCall::new(json!({"name": name, "arg": arg, "n": n})).unwrap();
            call.request_id = id.map(RequestId::from_bits);
            call
        })
}

fn assistant() -> impl Strategy<Value = AssistantContent> {
    (
        text(),
        text(),
        proptest::collection::vec(function_call(), 0..3),
        any::<bool>(),
        Just(SegmentKind::ALL.to_vec()).prop_shuffle(),
        0usize..4,
    )
        .prop_map(|(thought, chat, functions, interrupted, order, shown)| {
            let mut content = AssistantContent::default();
            for kind in order.into_iter().take(shown) {
                content.note(kind);
            }
            content.thought = thought;
            content.functions = functions;
            content.chat = if interrupted {
                format!("{chat} {INTERRUPT_TOKEN}")
            } else {
                chat
            };
            content.interrupted = interrupted;
            content
        })
}

fn content() -> impl Strategy<Value = Content> {
    prop_oneof![
        text().prop_map(Content::System),
        (any::<u32>(), text()).prop_map(|(t, chat)| Content::User(UserContent {
            timestamp: t as u64,
            chat
        })),
        assistant().prop_map(Content::Assistant),
        (any::<u32>(), text(), proptest::option::of(("[a-z]{1,6}", any::<u64>()))).prop_map(
            |(t, data, tool)| Content::Notification(NotificationContent {
                source: match tool {
                    Some((tool, bits)) => NotificationSource::Tool {
                        tool,
                        request_id: RequestId::from_bits(bits),
                    },
                    None => NotificationSource::System,
                },
                timestamp: t as u64,
                data,
            })
        ),
    ]
}

pub fn ledger_strategy() -> impl Strategy<Value = Ledger> {
    proptest::collection::vec((content(), priority()), 0..12).prop_map(|items| {
        let mut ledger = Ledger::new();
        for (content, priority) in items {
            let role: Role = content.role();
            ledger.append(role, content, priority).unwrap();
        }
        ledger
    })
}
