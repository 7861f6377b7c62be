//! Tool registry, request ids and tool handlers.
//!
//! The registry knows every tool by name, including the reserved process
//! tools (`fork`, `spawn`, `kill`) whose execution is owned by the process
//! tree. Handlers never touch the ledger; they only produce response text.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::events::Priority;
use crate::ledger::{FunctionCall, Millis};

const ID_BITS: u32 = 44;
const ID_MASK: u64 = (1 << ID_BITS) - 1;
const MIX_A: u64 = 0x9E37_79B9_7F4B;
const MIX_B: u64 = 0xBF58_476D_1CE5;

/// Request identifier: 11 lowercase hex characters (44 bits).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RequestId(String);

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid request id `{0}`: expected 11 lowercase hex characters")]
pub struct InvalidRequestId(String);

impl RequestId {
    pub fn parse(s: &str) -> Result<Self, InvalidRequestId> {
        if s.len() == 11 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(Self(s.to_string()))
        } else {
            Err(InvalidRequestId(s.to_string()))
        }
    }

    pub fn from_bits(bits: u64) -> Self {
        Self(format!("{:011x}", bits & ID_MASK))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for RequestId {
    type Error = InvalidRequestId;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        RequestId::parse(&s)
    }
}

impl From<RequestId> for String {
    fn from(id: RequestId) -> Self {
        id.0
    }
}

fn mul_inverse(a: u64) -> u64 {
    // Newton iteration; each round doubles the number of correct low bits.
    let mut inv = a;
    for _ in 0..6 {
        inv = inv.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(inv)));
    }
    inv & ID_MASK
}

/// Bijection on 44-bit values.
fn mix44(mut x: u64) -> u64 {
    x &= ID_MASK;
    x ^= x >> 22;
    x = x.wrapping_mul(MIX_A) & ID_MASK;
    x ^= x >> 23;
    x = x.wrapping_mul(MIX_B) & ID_MASK;
    x ^= x >> 22;
    x
}

fn unmix44(mut x: u64) -> u64 {
    x &= ID_MASK;
    x ^= x >> 22;
    x = x.wrapping_mul(mul_inverse(MIX_B)) & ID_MASK;
    x ^= x >> 23;
    x = x.wrapping_mul(mul_inverse(MIX_A)) & ID_MASK;
    x ^= x >> 22;
    x
}

/// Seeded request-id source. The n-th id is a fixed bijection of
/// `seed + n`, so ids never repeat within 2^44 requests.
#[derive(Debug, Clone)]
pub struct RequestIdGenerator {
    seed: u64,
    issued: u64,
}

impl RequestIdGenerator {
    pub fn new(seed: u64) -> Self {
        Self { seed, issued: 0 }
    }

    /// The seed whose first id is `first`.
    pub fn seed_for_first(first: &RequestId) -> u64 {
        let bits = u64::from_str_radix(first.as_str(), 16).expect("validated hex");
        unmix44(bits)
    }

    pub fn next_id(&mut self) -> RequestId {
        let id = RequestId::from_bits(mix44(self.seed.wrapping_add(self.issued)));
        self.issued += 1;
        id
    }
}

/// Argument type in a tool's schema. A trailing `?` in the declaration marks
/// the argument optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgType {
    String,
    Number,
    Integer,
    Boolean,
    Object,
    Array,
    Any,
}

impl ArgType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "string" => ArgType::String,
            "number" => ArgType::Number,
            "integer" => ArgType::Integer,
            "boolean" => ArgType::Boolean,
            "object" => ArgType::Object,
            "array" => ArgType::Array,
            "any" => ArgType::Any,
            _ => return None,
        })
    }

    fn accepts(self, v: &Value) -> bool {
        match self {
            ArgType::String => v.is_string(),
            ArgType::Number => v.is_number(),
            ArgType::Integer => v.is_i64() || v.is_u64(),
            ArgType::Boolean => v.is_boolean(),
            ArgType::Object => v.is_object(),
            ArgType::Array => v.is_array(),
            ArgType::Any => true,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ArgType::String => "string",
            ArgType::Number => "number",
            ArgType::Integer => "integer",
            ArgType::Boolean => "boolean",
            ArgType::Object => "object",
            ArgType::Array => "array",
            ArgType::Any => "any",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArgSpec {
    pub ty: ArgType,
    pub required: bool,
}

impl ArgSpec {
    pub fn parse(decl: &str) -> Option<Self> {
        let (name, required) = match decl.strip_suffix('?') {
            Some(n) => (n, false),
            None => (decl, true),
        };
        ArgType::parse(name).map(|ty| ArgSpec { ty, required })
    }
}

/// Completion that arrives from outside the simulation (live adapters).
pub trait PendingResponse: Send {
    /// `None` while still running.
    fn poll(&mut self) -> Option<Result<String, String>>;
}

pub enum ToolStart {
    /// Completes after `latency_ms` of virtual time.
    Ready { latency_ms: Millis, response: String },
    Deferred(Box<dyn PendingResponse>),
}

pub trait ToolHandler: Send + Sync {
    fn start(&self, args: &Map<String, Value>) -> ToolStart;
}

/// Fixed-latency tool answering from a script; the last entry repeats.
#[derive(Debug)]
pub struct ScriptedTool {
    latency_ms: Millis,
    responses: Vec<String>,
    calls: AtomicUsize,
}

impl ScriptedTool {
    pub fn new(latency_ms: Millis, responses: Vec<String>) -> Self {
        Self {
            latency_ms,
            responses,
            calls: AtomicUsize::new(0),
        }
    }
}

impl ToolHandler for ScriptedTool {
    fn start(&self, _args: &Map<String, Value>) -> ToolStart {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        let response = self
            .responses
            .get(n)
            .or(self.responses.last())
            .cloned()
            .unwrap_or_default();
        ToolStart::Ready {
            latency_ms: self.latency_ms,
            response,
        }
    }
}

/// Live-mode tool: POSTs the payload JSON to a URL and answers with the body.
#[derive(Debug, Clone)]
pub struct HttpTool {
    url: String,
    timeout: Duration,
}

impl HttpTool {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
        }
    }
}

struct ChannelResponse(mpsc::Receiver<Result<String, String>>);

impl PendingResponse for ChannelResponse {
    fn poll(&mut self) -> Option<Result<String, String>> {
        match self.0.try_recv() {
            Ok(r) => Some(r),
            Err(mpsc::TryRecvError::Empty) => None,
            Err(mpsc::TryRecvError::Disconnected) => Some(Err("tool worker vanished".into())),
        }
    }
}

impl ToolHandler for HttpTool {
    fn start(&self, args: &Map<String, Value>) -> ToolStart {
        let (tx, rx) = mpsc::channel();
        let url = self.url.clone();
        let timeout = self.timeout;
        let body = Value::Object(args.clone()).to_string();
        std::thread::spawn(move || {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .build()
                .into();
            let result = agent
                .post(&url)
                .header("content-type", "application/json")
                .send(body)
                .and_then(|mut resp| resp.body_mut().read_to_string())
                .map_err(|e| e.to_string());
            let _ = tx.send(result);
        });
        ToolStart::Deferred(Box::new(ChannelResponse(rx)))
    }
}

/// Reserved process tools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservedTool {
    Fork,
    Spawn,
    Kill,
}

impl ReservedTool {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "fork" => Some(ReservedTool::Fork),
            "spawn" => Some(ReservedTool::Spawn),
            "kill" => Some(ReservedTool::Kill),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ReservedTool::Fork => "fork",
            ReservedTool::Spawn => "spawn",
            ReservedTool::Kill => "kill",
        }
    }
}

#[derive(Clone)]
pub enum ToolBehavior {
    Handler(Arc<dyn ToolHandler>),
    Reserved(ReservedTool),
}

impl fmt::Debug for ToolBehavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToolBehavior::Handler(_) => f.write_str("Handler"),
            ToolBehavior::Reserved(r) => write!(f, "Reserved({})", r.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToolDef {
    pub name: String,
    pub args: BTreeMap<String, ArgSpec>,
    pub priority: i64,
    pub echo_args: bool,
    pub behavior: ToolBehavior,
}

impl ToolDef {
    pub fn new(name: impl Into<String>, handler: Arc<dyn ToolHandler>) -> Self {
        Self {
            name: name.into(),
            args: BTreeMap::new(),
            priority: 1,
            echo_args: false,
            behavior: ToolBehavior::Handler(handler),
        }
    }

    pub fn with_priority(mut self, priority: i64) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_arg(mut self, name: &str, spec: ArgSpec) -> Self {
        self.args.insert(name.to_string(), spec);
        self
    }

    pub fn echoing_args(mut self) -> Self {
        self.echo_args = true;
        self
    }

    fn reserved(tool: ReservedTool) -> Self {
        let string = ArgSpec {
            ty: ArgType::String,
            required: true,
        };
        let mut args = BTreeMap::new();
        match tool {
            ReservedTool::Fork | ReservedTool::Spawn => {
                args.insert("instructions".to_string(), string);
                args.insert(
                    "model".to_string(),
                    ArgSpec {
                        ty: ArgType::String,
                        required: false,
                    },
                );
            }
            ReservedTool::Kill => {
                args.insert(
                    "pid".to_string(),
                    ArgSpec {
                        ty: ArgType::Integer,
                        required: true,
                    },
                );
            }
        }
        Self {
            name: tool.name().to_string(),
            args,
            priority: 1,
            echo_args: false,
            behavior: ToolBehavior::Reserved(tool),
        }
    }

    pub fn event_priority(&self) -> Priority {
        Priority::Level(self.priority)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegistryError {
    #[error("tool `{0}` is already registered")]
    Duplicate(String),
    #[error("tool name `{0}` is reserved")]
    Reserved(String),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InvokeError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("invalid arguments for `{tool}`: {detail}")]
    InvalidArgs { tool: String, detail: String },
}

impl InvokeError {
    /// Notification text shown to the model.
    pub fn notification_text(&self) -> String {
        format!("Error: {self}.")
    }
}

/// Tool set of one environment, including the reserved process tools.
#[derive(Debug, Clone)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolDef>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        let mut tools = BTreeMap::new();
        for r in [ReservedTool::Fork, ReservedTool::Spawn, ReservedTool::Kill] {
            tools.insert(r.name().to_string(), ToolDef::reserved(r));
        }
        Self { tools }
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, def: ToolDef) -> Result<(), RegistryError> {
        if ReservedTool::from_name(&def.name).is_some() {
            return Err(RegistryError::Reserved(def.name));
        }
        if self.tools.contains_key(&def.name) {
            return Err(RegistryError::Duplicate(def.name));
        }
        self.tools.insert(def.name.clone(), def);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ToolDef> {
        self.tools.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    /// Checks that `call` names a registered tool and matches its schema.
    pub fn validate(&self, call: &FunctionCall) -> Result<&ToolDef, InvokeError> {
        let name = call.tool_name();
        let def = self
            .tools
            .get(name)
            .ok_or_else(|| InvokeError::UnknownTool(name.to_string()))?;
        let payload = call.payload();
        for (arg, spec) in &def.args {
            match payload.get(arg) {
                None if spec.required => {
                    return Err(InvokeError::InvalidArgs {
                        tool: name.to_string(),
                        detail: format!("missing `{arg}`"),
                    })
                }
                Some(v) if !spec.ty.accepts(v) => {
                    return Err(InvokeError::InvalidArgs {
                        tool: name.to_string(),
                        detail: format!("`{arg}` must be {}", spec.ty.as_str()),
                    })
                }
                _ => {}
            }
        }
        Ok(def)
    }

    /// Priority for the error response of a failed invoke: the tool's own
    /// priority when the tool is known, else 1.
    pub fn error_priority(&self, call: &FunctionCall) -> Priority {
        self.tools
            .get(call.tool_name())
            .map(ToolDef::event_priority)
            .unwrap_or(Priority::Level(1))
    }
}

/// Text of the request-sent notification.
pub fn request_sent_text(def: &ToolDef, id: &RequestId, call: &FunctionCall) -> String {
    let mut text = format!("Request sent for: {}. ID: {}.", def.name, id);
    if def.echo_args {
        let mut args = call.payload().clone();
        args.remove("name");
        text.push_str(&format!(" Arguments: {}", Value::Object(args)));
    }
    text
}

/// Tool declaration as it appears in scenario and gateway config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDecl {
    pub name: String,
    #[serde(default = "default_tool_priority")]
    pub priority: i64,
    #[serde(default)]
    pub latency_ms: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<String>>,
    /// Live mode only: POST the payload to this URL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default)]
    pub echo_args: bool,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

fn default_tool_priority() -> i64 {
    1
}

impl ToolDecl {
    pub fn to_def(&self, http_timeout: Duration) -> Result<ToolDef, String> {
        let handler: Arc<dyn ToolHandler> = match (&self.response, &self.script, &self.url) {
            (Some(r), None, None) => Arc::new(ScriptedTool::new(self.latency_ms, vec![r.clone()])),
            (None, Some(s), None) if !s.is_empty() => {
                Arc::new(ScriptedTool::new(self.latency_ms, s.clone()))
            }
            (None, None, Some(url)) => Arc::new(HttpTool::new(url.clone(), http_timeout)),
            _ => {
                return Err(format!(
                    "tool `{}` needs exactly one of `response`, a non-empty `script`, or `url`",
                    self.name
                ))
            }
        };
        let mut def = ToolDef::new(self.name.clone(), handler).with_priority(self.priority);
        def.echo_args = self.echo_args;
        for (arg, decl) in &self.args {
            let spec = ArgSpec::parse(decl)
                .ok_or_else(|| format!("tool `{}`: unknown arg type `{decl}`", self.name))?;
            def.args.insert(arg.clone(), spec);
        }
        Ok(def)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn search() -> ToolDef {
        ToolDef::new(
            "search",
            Arc::new(ScriptedTool::new(300, vec!["Here are your results...".into()])),
        )
        .with_arg("query", ArgSpec::parse("string").unwrap())
    }

    #[test]
    fn request_id_shape() {
        let mut ids = RequestIdGenerator::new(42);
        for _ in 0..100 {
            let id = ids.next_id();
            assert!(RequestId::parse(id.as_str()).is_ok());
        }
        assert!(RequestId::parse("0abd754d495").is_ok());
        assert!(RequestId::parse("0ABD754D495").is_err());
        assert!(RequestId::parse("0abd754d49").is_err());
    }

    #[test]
    fn mix_is_a_bijection_with_inverse() {
        for x in [0u64, 1, 2, 12345, ID_MASK, 0x0abd754d495, 0x7_ffff_ffff] {
            assert_eq!(unmix44(mix44(x)), x);
            assert_eq!(mix44(unmix44(x)), x);
        }
        assert_eq!(mul_inverse(MIX_A).wrapping_mul(MIX_A) & ID_MASK, 1);
    }

    #[test]
    fn seed_reproduces_first_id() {
        let wanted = RequestId::parse("0abd754d495").unwrap();
        let seed = RequestIdGenerator::seed_for_first(&wanted);
        let mut ids = RequestIdGenerator::new(seed);
        assert_eq!(ids.next_id(), wanted);
        assert_ne!(ids.next_id(), wanted);
    }

    #[test]
    fn ids_unique_and_deterministic() {
        let mut a = RequestIdGenerator::new(7);
        let mut b = RequestIdGenerator::new(7);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..10_000 {
            let id = a.next_id();
            assert_eq!(id, b.next_id());
            assert!(seen.insert(id));
        }
    }

    #[test]
    fn register_rules() {
        let mut reg = ToolRegistry::new();
        reg.register(search()).unwrap();
        assert_eq!(
            reg.register(search()),
            Err(RegistryError::Duplicate("search".into()))
        );
        let fork = ToolDef::new("fork", Arc::new(ScriptedTool::new(0, vec![])));
        assert_eq!(
            reg.register(fork),
            Err(RegistryError::Reserved("fork".into()))
        );
        assert!(reg.get("fork").is_some());
    }

    #[test]
    fn validate_schema() {
        let mut reg = ToolRegistry::new();
        reg.register(search()).unwrap();
        let ok = FunctionCall::new(json!({"name": "search", "query": "miami"})).unwrap();
        assert!(reg.validate(&ok).is_ok());
        let missing = FunctionCall::new(json!({"name": "search"})).unwrap();
        assert!(matches!(
            reg.validate(&missing),
            Err(InvokeError::InvalidArgs { .. })
        ));
        let wrong = FunctionCall::new(json!({"name": "search", "query": 3})).unwrap();
        assert!(reg.validate(&wrong).is_err());
        let unknown = FunctionCall::new(json!({"name": "weather"})).unwrap();
        assert_eq!(
            reg.validate(&unknown).unwrap_err(),
            InvokeError::UnknownTool("weather".into())
        );
        assert_eq!(reg.error_priority(&unknown), Priority::Level(1));
        let kill = FunctionCall::new(json!({"name": "kill", "pid": "x"})).unwrap();
        assert!(reg.validate(&kill).is_err());
    }

    #[test]
    fn request_sent_wording() {
        let def = search();
        let id = RequestId::parse("0abd754d495").unwrap();
        let call = FunctionCall::new(json!({"name": "search", "query": "q"})).unwrap();
        assert_eq!(
            request_sent_text(&def, &id, &call),
            "Request sent for: search. ID: 0abd754d495."
        );
        assert_eq!(
            request_sent_text(&def.clone().echoing_args(), &id, &call),
            "Request sent for: search. ID: 0abd754d495. Arguments: {\"query\":\"q\"}"
        );
    }

    #[test]
    fn scripted_tool_repeats_last() {
        let tool = ScriptedTool::new(5, vec!["a".into(), "b".into()]);
        let args = Map::new();
        let texts: Vec<String> = (0..3)
            .map(|_| match tool.start(&args) {
                ToolStart::Ready { response, .. } => response,
                ToolStart::Deferred(_) => unreachable!(),
            })
            .collect();
        assert_eq!(texts, ["a", "b", "b"]);
    }

    #[test]
    fn decl_requires_one_behavior() {
        let decl: ToolDecl =
            serde_json::from_value(json!({"name": "w", "latency_ms": 2000, "response": "sunny"}))
                .unwrap();
        let def = decl.to_def(Duration::from_secs(1)).unwrap();
        assert_eq!(def.priority, 1);
        let bad: ToolDecl = serde_json::from_value(json!({"name": "w"})).unwrap();
        assert!(bad.to_def(Duration::from_secs(1)).is_err());
    }
}
