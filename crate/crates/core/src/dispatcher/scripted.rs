//! Deterministic model driven by trigger rules, for tests and scenarios.

use serde::Deserialize;

use super::{DispatchModel, StreamStep, TokenStream};
use crate::ledger::{Millis, SegmentKind};

/// Replies with `reply` (or exactly `tokens`) when the prompt ends with
/// `trigger`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelRule {
    pub trigger: String,
    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
    #[serde(default)]
    pub token_delay_ms: Option<Millis>,
}

fn default_delay() -> Millis {
    20
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScriptedModelSpec {
    #[serde(default = "default_delay")]
    pub token_delay_ms: Millis,
    #[serde(default)]
    pub rules: Vec<ModelRule>,
}

impl Default for ScriptedModelSpec {
    fn default() -> Self {
        Self {
            token_delay_ms: default_delay(),
            rules: Vec::new(),
        }
    }
}

/// Splits a reply into tokens. Segment markers are tokens of their own; other
/// text is cut into leading whitespace plus a run of non-whitespace.
pub fn tokenize(reply: &str) -> Vec<String> {
    fn words(text: &str, out: &mut Vec<String>) {
        let mut cur = String::new();
        let mut seen_word = false;
        for c in text.chars() {
            if c.is_whitespace() && seen_word {
                out.push(std::mem::take(&mut cur));
                seen_word = false;
            }
            if !c.is_whitespace() {
                seen_word = true;
            }
            cur.push(c);
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }

    let mut out = Vec::new();
    let mut rest = reply;
    loop {
        let next = SegmentKind::ALL
            .iter()
            .filter_map(|k| rest.find(k.marker()).map(|p| (p, k.marker())))
            .min_by_key(|(p, _)| *p);
        match next {
            Some((pos, marker)) => {
                words(&rest[..pos], &mut out);
                out.push(marker.to_string());
                rest = &rest[pos + marker.len()..];
            }
            None => {
                words(rest, &mut out);
                return out;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedModel {
    name: String,
    spec: ScriptedModelSpec,
}

impl ScriptedModel {
    pub fn new(name: impl Into<String>, spec: ScriptedModelSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    /// Longest trigger that the trimmed prompt ends with; earlier rules win
    /// ties.
    pub fn matching_rule(&self, prompt: &str) -> Option<&ModelRule> {
        let prompt = prompt.trim_end();
        let mut best: Option<&ModelRule> = None;
        for rule in &self.spec.rules {
            let trigger = rule.trigger.trim_end();
            if !prompt.ends_with(trigger) {
                continue;
            }
            if best.is_none_or(|b| trigger.len() > b.trigger.trim_end().len()) {
                best = Some(rule);
            }
        }
        best
    }

    pub fn reply_tokens(&self, prompt: &str) -> (Vec<String>, Millis) {
        match self.matching_rule(prompt) {
            Some(rule) => {
                let tokens = match (&rule.tokens, &rule.reply) {
                    (Some(tokens), _) => tokens.clone(),
                    (None, Some(reply)) => tokenize(reply),
                    (None, None) => Vec::new(),
                };
                (tokens, rule.token_delay_ms.unwrap_or(self.spec.token_delay_ms))
            }
            None => (Vec::new(), self.spec.token_delay_ms),
        }
    }
}

struct ScriptedStream {
    tokens: std::vec::IntoIter<String>,
    delay_ms: Millis,
    cancelled: bool,
}

impl TokenStream for ScriptedStream {
    fn next_step(&mut self) -> StreamStep {
        if self.cancelled {
            return StreamStep::End;
        }
        match self.tokens.next() {
            Some(text) => StreamStep::Token {
                text,
                delay_ms: self.delay_ms,
            },
            None => StreamStep::End,
        }
    }

    fn cancel(&mut self) {
        self.cancelled = true;
    }
}

impl DispatchModel for ScriptedModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str) -> Box<dyn TokenStream> {
        let (tokens, delay_ms) = self.reply_tokens(prompt);
        Box::new(ScriptedStream {
            tokens: tokens.into_iter(),
            delay_ms,
            cancelled: false,
        })
    }
}
