//! Canonical JSON form of the ledger.

use serde_json::{json, Map, Value};

use super::{
    AssistantContent, Content, FunctionCall, Ledger, LedgerError, Message, NotificationContent,
    NotificationSource, Role, SegmentKind, UserContent, INTERRUPT_TOKEN,
};
use crate::events::Priority;
use crate::toolkit::RequestId;

pub(super) fn ledger_to_string(ledger: &Ledger) -> String {
    let messages: Vec<Value> = ledger.messages().iter().map(message_to_value).collect();
    json!({ "messages": messages }).to_string()
}

pub(super) fn message_to_value(msg: &Message) -> Value {
    let mut obj = Map::new();
    obj.insert("seq".into(), json!(msg.seq));
    obj.insert("role".into(), json!(msg.role.as_str()));
    obj.insert("priority".into(), msg.priority.to_json());
    obj.insert("content".into(), content_to_value(&msg.content));
    Value::Object(obj)
}

fn content_to_value(content: &Content) -> Value {
    match content {
        Content::System(text) => json!({ "text": text }),
        Content::User(u) => json!({ "timestamp": u.timestamp, "chat": u.chat }),
        Content::Notification(n) => {
            let source = match &n.source {
                NotificationSource::System => json!("system"),
                NotificationSource::Tool { tool, request_id } => {
                    json!({ "tool": tool, "request_id": request_id.as_str() })
                }
            };
            json!({ "source": source, "timestamp": n.timestamp, "data": n.data })
        }
        Content::Assistant(a) => {
            let mut obj = Map::new();
            for kind in a.segment_order() {
                match kind {
                    SegmentKind::Thought => {
                        obj.insert("thought".into(), json!(a.thought));
                    }
                    SegmentKind::Function => {
                        let calls: Vec<Value> = a
                            .functions
                            .iter()
                            .map(|f| {
                                json!({
                                    "payload": Value::Object(f.payload().clone()),
                                    "request_id": f.request_id.as_ref().map(|r| r.as_str()),
                                })
                            })
                            .collect();
                        obj.insert("functions".into(), Value::Array(calls));
                    }
                    SegmentKind::Chat => {
                        obj.insert("chat".into(), json!(a.chat));
                    }
                }
            }
            obj.insert("interrupted".into(), json!(a.interrupted));
            Value::Object(obj)
        }
    }
}

pub(super) fn ledger_from_str(text: &str) -> Result<Vec<Message>, LedgerError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| LedgerError::Document(e.to_string()))?;
    let Some(Value::Array(items)) = doc.get("messages") else {
        return Err(LedgerError::Document("missing `messages` array".into()));
    };
    items
        .iter()
        .enumerate()
        .map(|(index, item)| {
            message_from_value(item).map_err(|detail| LedgerError::Malformed { index, detail })
        })
        .enumerate()
        .map(|(index, r)| {
            let msg = r?;
            if msg.seq != index as u64 {
                return Err(LedgerError::Malformed {
                    index,
                    detail: format!("seq {} out of order", msg.seq),
                });
            }
            Ok(msg)
        })
        .collect()
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value, String> {
    obj.get(name).ok_or_else(|| format!("missing field `{name}`"))
}

fn as_u64(v: &Value, name: &str) -> Result<u64, String> {
    v.as_u64()
        .ok_or_else(|| format!("field `{name}` is not a non-negative integer"))
}

fn as_str<'a>(v: &'a Value, name: &str) -> Result<&'a str, String> {
    v.as_str().ok_or_else(|| format!("field `{name}` is not a string"))
}

fn message_from_value(v: &Value) -> Result<Message, String> {
    let obj = v.as_object().ok_or("message is not an object")?;
    let seq = as_u64(field(obj, "seq")?, "seq")?;
    let role: Role = as_str(field(obj, "role")?, "role")?.parse()?;
    let priority = Priority::from_json(field(obj, "priority")?)?;
    let content = field(obj, "content")?
        .as_object()
        .ok_or("field `content` is not an object")?;
    let content = match role {
        Role::System => {
            expect_keys(content, &["text"])?;
            Content::System(as_str(field(content, "text")?, "text")?.to_string())
        }
        Role::User => {
            expect_keys(content, &["timestamp", "chat"])?;
            Content::User(UserContent {
                timestamp: as_u64(field(content, "timestamp")?, "timestamp")?,
                chat: as_str(field(content, "chat")?, "chat")?.to_string(),
            })
        }
        Role::Notification => {
            expect_keys(content, &["source", "timestamp", "data"])?;
            let source = match field(content, "source")? {
                Value::String(s) if s == "system" => NotificationSource::System,
                Value::Object(src) => NotificationSource::Tool {
                    tool: as_str(field(src, "tool")?, "tool")?.to_string(),
                    request_id: RequestId::parse(as_str(field(src, "request_id")?, "request_id")?)
                        .map_err(|e| e.to_string())?,
                },
                _ => return Err("field `source` is neither \"system\" nor a tool source".into()),
            };
            Content::Notification(NotificationContent {
                source,
                timestamp: as_u64(field(content, "timestamp")?, "timestamp")?,
                data: as_str(field(content, "data")?, "data")?.to_string(),
            })
        }
        Role::Assistant => Content::Assistant(assistant_from_map(content)?),
    };
    Ok(Message {
        seq,
        role,
        priority,
        content,
    })
}

fn expect_keys(obj: &Map<String, Value>, keys: &[&str]) -> Result<(), String> {
    for key in obj.keys() {
        if !keys.contains(&key.as_str()) {
            return Err(format!("unexpected field `{key}` for this role"));
        }
    }
    Ok(())
}

fn assistant_from_map(obj: &Map<String, Value>) -> Result<AssistantContent, String> {
    expect_keys(obj, &["thought", "functions", "chat", "interrupted"])?;
    let mut content = AssistantContent {
        thought: as_str(field(obj, "thought")?, "thought")?.to_string(),
        chat: as_str(field(obj, "chat")?, "chat")?.to_string(),
        interrupted: field(obj, "interrupted")?
            .as_bool()
            .ok_or("field `interrupted` is not a boolean")?,
        ..Default::default()
    };
    let calls = field(obj, "functions")?
        .as_array()
        .ok_or("field `functions` is not an array")?;
    for call in calls {
        let call = call.as_object().ok_or("function entry is not an object")?;
        let mut fc = FunctionCall::new(field(call, "payload")?.clone()).map_err(|e| e.to_string())?;
        fc.request_id = match field(call, "request_id")? {
            Value::Null => None,
            Value::String(s) => Some(RequestId::parse(s).map_err(|e| e.to_string())?),
            _ => return Err("field `request_id` is neither a string nor null".into()),
        };
        content.functions.push(fc);
    }
    if content.interrupted && !content.chat.ends_with(INTERRUPT_TOKEN) {
        return Err("interrupted assistant chat does not end with the interrupt token".into());
    }

    // Key order carries the generation order of the segments.
    let order: Vec<SegmentKind> = obj
        .keys()
        .filter_map(|k| match k.as_str() {
            "thought" => Some(SegmentKind::Thought),
            "functions" => Some(SegmentKind::Function),
            "chat" => Some(SegmentKind::Chat),
            _ => None,
        })
        .collect();
    Ok(content.with_order(order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_ledger_document() {
        assert_eq!(Ledger::new().serialize(), r#"{"messages":[]}"#);
        assert!(Ledger::deserialize(r#"{"messages":[]}"#).unwrap().is_empty());
    }

    #[test]
    fn one_user_message_fields() {
        let mut ledger = Ledger::new();
        ledger
            .append(
                Role::User,
                Content::User(UserContent {
                    timestamp: 4200,
                    chat: "Hi".into(),
                }),
                Priority::Level(-1),
            )
            .unwrap();
        let text = ledger.serialize();
        // Reparse through the generic JSON value model, independent of the codec.
        let doc: Value = serde_json::from_str(&text).unwrap();
        let msg = &doc["messages"][0];
        assert_eq!(msg["seq"], json!(0));
        assert_eq!(msg["role"], json!("user"));
        assert_eq!(msg["priority"], json!(-1));
        assert_eq!(msg["content"]["timestamp"], json!(4200));
        assert_eq!(msg["content"]["chat"], json!("Hi"));
    }

    #[test]
    fn assistant_key_order_follows_generation() {
        let mut ledger = Ledger::new();
        let seq = ledger.open_assistant(Priority::Level(1));
        let mut content = AssistantContent::default();
        content.push_chat("Ok!");
        content.push_thought("plan");
        content.push_function(FunctionCall::new(json!({"name": "search"})).unwrap());
        ledger.finalize_assistant(seq, content).unwrap();
        let text = ledger.serialize();
        let chat = text.find("\"chat\"").unwrap();
        let thought = text.find("\"thought\"").unwrap();
        let functions = text.find("\"functions\"").unwrap();
        assert!(chat < thought && thought < functions);
        assert_eq!(Ledger::deserialize(&text).unwrap(), ledger);
    }

    #[test]
    fn variant_mismatch_names_index() {
        let doc = r#"{"messages":[
            {"seq":0,"role":"system","priority":"MIN","content":{"text":"sys"}},
            {"seq":1,"role":"assistant","priority":1,"content":{"timestamp":5,"chat":"hi"}}
        ]}"#;
        match Ledger::deserialize(doc) {
            Err(LedgerError::Malformed { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_order_seq_rejected() {
        let doc = r#"{"messages":[{"seq":3,"role":"system","priority":0,"content":{"text":"s"}}]}"#;
        assert!(matches!(
            Ledger::deserialize(doc),
            Err(LedgerError::Malformed { index: 0, .. })
        ));
    }

    #[test]
    fn interrupted_requires_token() {
        let doc = r#"{"messages":[{"seq":0,"role":"assistant","priority":1,"content":
            {"thought":"","functions":[],"chat":"Blah","interrupted":true}}]}"#;
        assert!(Ledger::deserialize(doc).is_err());
    }
}
