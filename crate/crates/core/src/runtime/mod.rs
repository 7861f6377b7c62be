//! The execution environment: one dialog system per thought process, driven
//! by a shared agenda of timed occurrences.
//!
//! Everything runs on one logical thread. Model tokens, tool completions,
//! emitter word boundaries, clock ticks and speech edges are all agenda
//! entries; handling one may push events, and every push drains the target
//! environment's queue as far as its gate allows. Under a virtual clock the
//! run is fully deterministic. Live sessions advance the same agenda from a
//! wall clock and additionally poll remote models and tools.

mod dialog;
mod speech;
mod tools;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;

use crate::dispatcher::{DispatchModel, GenerationHandle, ModelRegistry, StreamParser, TokenStream};
use crate::events::Priority;
use crate::fsm::{DialogConfig, DialogSystem, FsmState};
use crate::ledger::{
    AssistantContent, Content, Ledger, Millis, PromptTemplate, Role, TemplateRegistry,
};
use crate::peripherals::{
    ChatKey, Clock, ClockError, ClockMode, EmissionRate, Emitter, Utterance,
    DEFAULT_CHARS_PER_SECOND, DEFAULT_TICK_INTERVAL_MS,
};
use crate::processes::{
    Pid, ProcessError, ProcessInfo, ProcessTree, DEFAULT_CHILD_SYSTEM_PROMPT, DEFAULT_MAX_DEPTH,
    ROOT_PID,
};
use crate::toolkit::{PendingResponse, RequestId, RequestIdGenerator, ToolRegistry};
use crate::trace::{RecordBody, RunOutcome, TraceRecord};

/// Priority levels the environment assigns on its own behalf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Priorities {
    pub user: i64,
    pub assistant: i64,
    pub time_passage: i64,
    /// Results and terminal notices of child processes.
    pub process_result: i64,
}

impl Default for Priorities {
    fn default() -> Self {
        Self {
            user: -1,
            assistant: 1,
            time_passage: 1,
            process_result: 1,
        }
    }
}

/// Seed whose first request id is `0abd754d495`.
pub fn default_seed() -> u64 {
    RequestIdGenerator::seed_for_first(
        &RequestId::parse("0abd754d495").expect("valid request id"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub tick_interval_ms: Millis,
    pub coalesce_ticks: bool,
    /// Give child processes their own time-passage ticks.
    pub child_ticks: bool,
    pub chars_per_second: u32,
    pub seed: u64,
    pub max_depth: usize,
    pub priorities: Priorities,
    pub interrupt_user: bool,
    pub child_system_prompt: String,
    pub template: String,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            tick_interval_ms: DEFAULT_TICK_INTERVAL_MS,
            coalesce_ticks: true,
            child_ticks: false,
            chars_per_second: DEFAULT_CHARS_PER_SECOND,
            seed: default_seed(),
            max_depth: DEFAULT_MAX_DEPTH,
            priorities: Priorities::default(),
            interrupt_user: false,
            child_system_prompt: DEFAULT_CHILD_SYSTEM_PROMPT.to_string(),
            template: "default".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("unknown prompt template `{0}`")]
    UnknownTemplate(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("chars_per_second must be positive")]
    ZeroRate,
    #[error(transparent)]
    Clock(#[from] ClockError),
}

/// Everything needed to start a session.
pub struct RuntimeSetup {
    pub config: RuntimeConfig,
    pub system_prompt: String,
    pub tools: ToolRegistry,
    pub models: ModelRegistry,
    /// Name of the root process's model in `models`.
    pub model: String,
    pub clock: ClockMode,
}

#[derive(Debug, Clone, PartialEq)]
enum Occurrence {
    Token { pid: Pid, generation: u64, text: String },
    ToolDone { pid: Pid, request_id: RequestId },
    Word { pid: Pid, epoch: u64 },
    Tick { pid: Pid },
    SpeechStart,
    SpeechEnd { text: String },
}

#[derive(Debug, Default)]
struct Agenda {
    items: BTreeMap<(Millis, u64), Occurrence>,
    next: u64,
}

impl Agenda {
    fn schedule(&mut self, at: Millis, occurrence: Occurrence) {
        self.items.insert((at, self.next), occurrence);
        self.next += 1;
    }

    fn peek_time(&self) -> Option<Millis> {
        self.items.keys().next().map(|(t, _)| *t)
    }

    fn pop(&mut self) -> Option<(Millis, Occurrence)> {
        self.items.pop_first().map(|((t, _), o)| (t, o))
    }

    fn has_speech(&self) -> bool {
        self.items
            .values()
            .any(|o| matches!(o, Occurrence::SpeechStart | Occurrence::SpeechEnd { .. }))
    }
}

struct Generation {
    handle: GenerationHandle,
    stream: Box<dyn TokenStream>,
    parser: StreamParser,
    content: AssistantContent,
    chat_open: bool,
    chat_opened: bool,
    awaiting_poll: bool,
}

enum PendingKind {
    Scheduled { response: String },
    Deferred(Box<dyn PendingResponse>),
    Child,
}

struct PendingTool {
    tool: String,
    priority: Priority,
    kind: PendingKind,
}

/// One thought process: dialog system, dispatcher state and emitter.
struct Environment {
    ds: DialogSystem,
    model: Arc<dyn DispatchModel>,
    emitter: Emitter,
    generation: Option<Generation>,
    followup_pending: bool,
    draining: bool,
    pending: BTreeMap<RequestId, PendingTool>,
    chat_seqs: BTreeMap<ChatKey, u64>,
    emitted_segments: Vec<String>,
}

impl Environment {
    fn new(ledger: Ledger, model: Arc<dyn DispatchModel>, rate: EmissionRate, config: DialogConfig) -> Self {
        let mut ds = DialogSystem::new(ledger);
        ds.config = config;
        Self {
            ds,
            model,
            emitter: Emitter::new(rate),
            generation: None,
            followup_pending: false,
            draining: false,
            pending: BTreeMap::new(),
            chat_seqs: BTreeMap::new(),
            emitted_segments: Vec::new(),
        }
    }

    fn quiescent(&self) -> bool {
        self.ds.state == FsmState::Idle
            && self.ds.queue.is_empty()
            && self.generation.is_none()
            && self.pending.is_empty()
            && !self.emitter.is_active()
    }
}

/// When a run stops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Until {
    /// Stop once everything has settled; the time limit is a timeout.
    #[default]
    Quiescence,
    /// Run until the time limit regardless.
    TimeLimit,
}

pub struct Runtime {
    config: RuntimeConfig,
    clock: Clock,
    tree: ProcessTree,
    envs: BTreeMap<Pid, Environment>,
    agenda: Agenda,
    ids: RequestIdGenerator,
    tools: Arc<ToolRegistry>,
    models: ModelRegistry,
    template: Arc<dyn PromptTemplate>,
    records: Vec<TraceRecord>,
    next_generation: u64,
    speaking: bool,
    faults: Vec<String>,
}

impl Runtime {
    pub fn new(setup: RuntimeSetup) -> Result<Self, RuntimeError> {
        let config = setup.config;
        let template = TemplateRegistry::default()
            .get(&config.template)
            .ok_or_else(|| RuntimeError::UnknownTemplate(config.template.clone()))?;
        if config.chars_per_second == 0 {
            return Err(RuntimeError::ZeroRate);
        }
        let clock = match setup.clock {
            ClockMode::Virtual => Clock::new_virtual(config.tick_interval_ms)?,
            ClockMode::Wall => Clock::new_wall(config.tick_interval_ms)?,
        };
        let model = setup
            .models
            .get(&setup.model)
            .ok_or_else(|| RuntimeError::UnknownModel(setup.model.clone()))?;
        let mut runtime = Self {
            tree: ProcessTree::new(config.max_depth),
            ids: RequestIdGenerator::new(config.seed),
            clock,
            envs: BTreeMap::new(),
            agenda: Agenda::default(),
            tools: Arc::new(setup.tools),
            models: setup.models,
            template,
            records: Vec::new(),
            next_generation: 0,
            speaking: false,
            faults: Vec::new(),
            config,
        };
        let root = Environment::new(
            Ledger::new(),
            model,
            EmissionRate::CharsPerSecond(runtime.config.chars_per_second),
            DialogConfig {
                interrupt_user: runtime.config.interrupt_user,
            },
        );
        runtime.envs.insert(ROOT_PID, root);
        if !setup.system_prompt.is_empty() {
            runtime.append_system(ROOT_PID, setup.system_prompt);
        }
        let first_tick = runtime.clock.next_tick_after(0);
        runtime.agenda.schedule(first_tick, Occurrence::Tick { pid: ROOT_PID });
        Ok(runtime)
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    /// Internal invariant violations observed so far. Always empty unless
    /// something is broken.
    pub fn faults(&self) -> &[String] {
        &self.faults
    }

    pub fn state(&self, pid: Pid) -> Option<FsmState> {
        self.envs.get(&pid).map(|e| e.ds.state)
    }

    pub fn ledger(&self, pid: Pid) -> Option<&Ledger> {
        self.envs.get(&pid).map(|e| &e.ds.ledger)
    }

    pub fn emitted_segments(&self, pid: Pid) -> Option<&[String]> {
        self.envs.get(&pid).map(|e| e.emitted_segments.as_slice())
    }

    pub fn processes(&self) -> Vec<ProcessInfo> {
        self.tree.snapshot()
    }

    pub fn is_speaking(&self) -> bool {
        self.speaking
    }

    /// Root idle with nothing queued, running or expected.
    pub fn is_quiescent(&self) -> bool {
        !self.speaking
            && !self.agenda.has_speech()
            && self.tree.pids().filter(|p| self.tree.is_running(*p)).all(|p| {
                self.envs.get(&p).is_some_and(Environment::quiescent)
            })
    }

    /// Queues the start and end of a scripted utterance.
    pub fn schedule_utterance(&mut self, utterance: &Utterance) {
        self.agenda.schedule(utterance.start_ms, Occurrence::SpeechStart);
        self.agenda.schedule(
            utterance.end_ms,
            Occurrence::SpeechEnd {
                text: utterance.text.clone(),
            },
        );
    }

    /// Runs the agenda until the stop condition holds or `limit` is reached.
    pub fn run(&mut self, limit: Millis, until: Until) -> RunOutcome {
        loop {
            self.settle_children();
            if until == Until::Quiescence && self.is_quiescent() {
                return RunOutcome::Quiescent;
            }
            match self.agenda.peek_time() {
                Some(t) if t <= limit => {
                    let (t, occurrence) = self.agenda.pop().expect("peeked");
                    self.advance_clock(t);
                    self.dispatch(occurrence);
                }
                _ => {
                    self.advance_clock(limit.max(self.now()));
                    return match until {
                        Until::TimeLimit => RunOutcome::TimeLimit,
                        Until::Quiescence => RunOutcome::Timeout,
                    };
                }
            }
        }
    }

    /// Live mode: handles everything due up to `t`, polling remote models
    /// and tools until nothing more is ready.
    pub fn advance_to(&mut self, t: Millis) {
        let t = t.max(self.now());
        loop {
            while let Some(due) = self.agenda.peek_time() {
                if due > t {
                    break;
                }
                let (due, occurrence) = self.agenda.pop().expect("peeked");
                self.advance_clock(due);
                self.dispatch(occurrence);
                self.settle_children();
            }
            self.advance_clock(t);
            let moved = self.poll_live();
            self.settle_children();
            let due_now = self.agenda.peek_time().is_some_and(|d| d <= t);
            if !moved && !due_now {
                return;
            }
        }
    }

    /// Wall-clock sessions: catches up with real elapsed time.
    pub fn advance_live(&mut self) {
        let t = self.clock.wall_elapsed();
        self.advance_to(t);
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock.mode()
    }

    /// Operator kill from outside the process tree. No kill-call response is
    /// generated; the parent still gets its terminal notice.
    pub fn operator_kill(&mut self, pid: Pid) -> Result<(), ProcessError> {
        let notices = self.kill_subtree(None, pid)?;
        for (target, event) in notices {
            self.push_event(target, event);
        }
        self.settle_children();
        Ok(())
    }

    fn advance_clock(&mut self, t: Millis) {
        if t > self.clock.now() {
            self.clock.advance_to(t).expect("forward");
        }
    }

    fn dispatch(&mut self, occurrence: Occurrence) {
        match occurrence {
            Occurrence::Token {
                pid,
                generation,
                text,
            } => self.on_token(pid, generation, &text),
            Occurrence::ToolDone { pid, request_id } => self.on_tool_done(pid, &request_id),
            Occurrence::Word { pid, epoch } => self.on_word(pid, epoch),
            Occurrence::Tick { pid } => self.on_tick(pid),
            Occurrence::SpeechStart => self.speech_start(),
            Occurrence::SpeechEnd { text } => self.speech_end(&text),
        }
    }

    fn record(&mut self, pid: Pid, body: RecordBody) {
        self.records.push(TraceRecord {
            time: self.clock.now(),
            pid,
            body,
        });
    }

    fn fault(&mut self, detail: String) {
        tracing::error!(%detail, "runtime invariant violated");
        self.faults.push(detail);
    }

    fn env(&mut self, pid: Pid) -> &mut Environment {
        self.envs.get_mut(&pid).expect("environment exists for pid")
    }

    fn append_system(&mut self, pid: Pid, text: String) {
        let seq = self
            .env(pid)
            .ds
            .ledger
            .append(Role::System, Content::System(text), Priority::Min)
            .expect("system content");
        self.record_append(pid, seq);
    }

    fn record_append(&mut self, pid: Pid, seq: u64) {
        let message = self.env(pid).ds.ledger.get(seq).expect("appended").to_json();
        self.record(pid, RecordBody::LedgerAppend { message });
    }
}
