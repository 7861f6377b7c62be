//! Prompt templates. Token choices depend on the model vocabulary, so the
//! rendering is pluggable.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::Value;

use super::{AssistantContent, Content, Ledger, Message, NotificationSource, SegmentKind};

pub trait PromptTemplate: Send + Sync {
    fn name(&self) -> &str;
    fn render(&self, ledger: &Ledger) -> String;
}

fn source_label(source: &NotificationSource) -> String {
    match source {
        NotificationSource::System => "system".to_string(),
        NotificationSource::Tool { tool, request_id } => format!("{tool}:{request_id}"),
    }
}

fn assistant_body(content: &AssistantContent) -> String {
    let mut out = String::new();
    for kind in content.segment_order() {
        match kind {
            SegmentKind::Thought if !content.thought.is_empty() => {
                out.push_str(kind.marker());
                out.push_str(&content.thought);
            }
            SegmentKind::Function => {
                for call in &content.functions {
                    out.push_str(kind.marker());
                    out.push_str(&Value::Object(call.payload().clone()).to_string());
                }
            }
            SegmentKind::Chat if !content.chat.is_empty() => {
                out.push_str(kind.marker());
                out.push_str(&content.chat);
            }
            _ => {}
        }
    }
    out
}

/// `<|role|>` header lines with segment markers for assistant content.
///
/// ```text
/// <|user|> t=4200
/// Hi
/// <|assistant|>
/// <|chat|>Hello.
/// <|notification|> source=search:0abd754d495 t=4500
/// Here are your results...
/// ```
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultTemplate;

impl DefaultTemplate {
    fn render_message(msg: &Message, out: &mut String) {
        out.push_str("<|");
        out.push_str(msg.role.as_str());
        out.push_str("|>");
        match &msg.content {
            Content::System(text) => {
                out.push('\n');
                out.push_str(text);
            }
            Content::User(u) => {
                out.push_str(&format!(" t={}\n", u.timestamp));
                out.push_str(&u.chat);
            }
            Content::Assistant(a) => {
                out.push('\n');
                out.push_str(&assistant_body(a));
            }
            Content::Notification(n) => {
                out.push_str(&format!(
                    " source={} t={}\n",
                    source_label(&n.source),
                    n.timestamp
                ));
                out.push_str(&n.data);
            }
        }
    }
}

impl PromptTemplate for DefaultTemplate {
    fn name(&self) -> &str {
        "default"
    }

    fn render(&self, ledger: &Ledger) -> String {
        let mut out = String::new();
        for (i, msg) in ledger.messages().iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            Self::render_message(msg, &mut out);
        }
        out
    }
}

/// ChatML-style blocks. Notifications use their own role name.
#[derive(Debug, Default, Clone, Copy)]
pub struct ChatMlTemplate;

impl PromptTemplate for ChatMlTemplate {
    fn name(&self) -> &str {
        "chatml"
    }

    fn render(&self, ledger: &Ledger) -> String {
        let mut out = String::new();
        for msg in ledger.messages() {
            out.push_str("<|im_start|>");
            out.push_str(msg.role.as_str());
            out.push('\n');
            match &msg.content {
                Content::System(text) => out.push_str(text),
                Content::User(u) => out.push_str(&format!("[t={}] {}", u.timestamp, u.chat)),
                Content::Assistant(a) => out.push_str(&assistant_body(a)),
                Content::Notification(n) => out.push_str(&format!(
                    "[source={} t={}] {}",
                    source_label(&n.source),
                    n.timestamp,
                    n.data
                )),
            }
            out.push_str("<|im_end|>\n");
        }
        out
    }
}

/// Templates by name. `default` and `chatml` are always registered.
#[derive(Clone)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Arc<dyn PromptTemplate>>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut registry = Self {
            templates: BTreeMap::new(),
        };
        registry.register(Arc::new(DefaultTemplate));
        registry.register(Arc::new(ChatMlTemplate));
        registry
    }
}

impl TemplateRegistry {
    pub fn register(&mut self, template: Arc<dyn PromptTemplate>) {
        self.templates.insert(template.name().to_string(), template);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn PromptTemplate>> {
        self.templates.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Priority;
    use crate::ledger::{NotificationContent, Role, UserContent};

    fn interruption_triple() -> Ledger {
        let mut ledger = Ledger::new();
        let seq = ledger.open_assistant(Priority::Level(1));
        ledger
            .finalize_assistant(seq, AssistantContent::chat("Blah blah blah blah"))
            .unwrap();
        ledger
            .rewrite_interrupted(seq, "Blah blah blah <|interrupt|>")
            .unwrap();
        ledger
            .append(
                Role::Notification,
                Content::Notification(NotificationContent::system(
                    900,
                    "Assistant interrupted due to user speaking",
                )),
                Priority::Min,
            )
            .unwrap();
        ledger
            .append(
                Role::User,
                Content::User(UserContent {
                    timestamp: 2000,
                    chat: "I am interrupting you.".into(),
                }),
                Priority::Level(-1),
            )
            .unwrap();
        ledger
    }

    #[test]
    fn empty_ledger_renders_empty() {
        assert_eq!(DefaultTemplate.render(&Ledger::new()), "");
        assert_eq!(ChatMlTemplate.render(&Ledger::new()), "");
    }

    #[test]
    fn render_is_deterministic() {
        let ledger = interruption_triple();
        assert_eq!(DefaultTemplate.render(&ledger), DefaultTemplate.render(&ledger));
    }

    #[test]
    fn interruption_triple_renders_in_order() {
        let text = DefaultTemplate.render(&interruption_triple());
        assert_eq!(
            text,
            "<|assistant|>\n<|chat|>Blah blah blah <|interrupt|>\n\
             <|notification|> source=system t=900\nAssistant interrupted due to user speaking\n\
             <|user|> t=2000\nI am interrupting you."
        );
    }

    #[test]
    fn registry_has_builtins() {
        let registry = TemplateRegistry::default();
        assert!(registry.get("default").is_some());
        assert!(registry.get("chatml").is_some());
        assert!(registry.get("nope").is_none());
    }
}
