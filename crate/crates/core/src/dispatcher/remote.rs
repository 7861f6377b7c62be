//! Streaming chat-completions client. The rendered ledger is sent as a single
//! user message; the reply is expected to use the segment markers.

use std::io::{BufRead, BufReader};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{DispatchModel, StreamStep, TokenStream};

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RemoteModelConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub system_preamble: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_timeout() -> u64 {
    60_000
}

#[derive(Debug, Clone)]
pub struct RemoteModel {
    name: String,
    config: RemoteModelConfig,
}

impl RemoteModel {
    pub fn new(name: impl Into<String>, config: RemoteModelConfig) -> Self {
        Self {
            name: name.into(),
            config,
        }
    }

    fn request_body(&self, prompt: &str) -> Value {
        let mut messages = Vec::new();
        if let Some(preamble) = &self.config.system_preamble {
            messages.push(json!({"role": "system", "content": preamble}));
        }
        messages.push(json!({"role": "user", "content": prompt}));
        json!({"model": self.config.model, "stream": true, "messages": messages})
    }
}

/// Content delta carried by one server-sent-events line, if any.
pub(crate) fn sse_delta(line: &str) -> Option<Result<String, ()>> {
    let data = line.strip_prefix("data:")?.trim();
    if data == "[DONE]" {
        return Some(Err(()));
    }
    let value: Value = serde_json::from_str(data).ok()?;
    value["choices"][0]["delta"]["content"]
        .as_str()
        .map(|s| Ok(s.to_string()))
}

struct RemoteStream {
    rx: Receiver<StreamStep>,
    cancel: Arc<AtomicBool>,
    done: bool,
}

impl TokenStream for RemoteStream {
    fn next_step(&mut self) -> StreamStep {
        if self.done {
            return StreamStep::End;
        }
        match self.rx.try_recv() {
            Ok(step) => {
                if matches!(step, StreamStep::End | StreamStep::Failed(_)) {
                    self.done = true;
                }
                step
            }
            Err(TryRecvError::Empty) => StreamStep::Pending,
            Err(TryRecvError::Disconnected) => {
                self.done = true;
                StreamStep::End
            }
        }
    }

    fn cancel(&mut self) {
        self.cancel.store(true, Ordering::SeqCst);
        self.done = true;
    }
}

impl DispatchModel for RemoteModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str) -> Box<dyn TokenStream> {
        let (tx, rx) = mpsc::channel();
        let cancel = Arc::new(AtomicBool::new(false));
        let flag = cancel.clone();
        let body = self.request_body(prompt);
        let endpoint = self.config.endpoint.clone();
        let key = self
            .config
            .api_key_env
            .as_ref()
            .and_then(|var| std::env::var(var).ok());
        let timeout = Duration::from_millis(self.config.timeout_ms);
        thread::spawn(move || {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into();
            let mut request = agent
                .post(&endpoint)
                .header("accept", "text/event-stream")
                .header("content-type", "application/json");
            if let Some(key) = key {
                request = request.header("authorization", &format!("Bearer {key}"));
            }
            let response = match request.send(body.to_string()) {
                Ok(r) => r,
                Err(e) => {
                    let _ = tx.send(StreamStep::Failed(e.to_string()));
                    return;
                }
            };
            let reader = BufReader::new(response.into_body().into_reader());
            for line in reader.lines() {
                if flag.load(Ordering::SeqCst) {
                    return;
                }
                let line = match line {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = tx.send(StreamStep::Failed(e.to_string()));
                        return;
                    }
                };
                match sse_delta(&line) {
                    Some(Ok(text)) if !text.is_empty() => {
                        if tx.send(StreamStep::Token { text, delay_ms: 0 }).is_err() {
                            return;
                        }
                    }
                    Some(Err(())) => break,
                    _ => {}
                }
            }
            let _ = tx.send(StreamStep::End);
        });
        Box::new(RemoteStream {
            rx,
            cancel,
            done: false,
        })
    }
}
