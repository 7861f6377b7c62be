//! One client session: a live environment plus the translation of its trace
//! into outgoing frames.

use asyncagent_core::fsm::FsmState;
use asyncagent_core::ledger::Millis;
use asyncagent_core::peripherals::ClockMode;
use asyncagent_core::processes::ROOT_PID;
use asyncagent_core::runtime::{Runtime, RuntimeSetup};
use asyncagent_core::trace::{EmissionPhase, RecordBody};

use crate::config::GatewayConfig;
use crate::frames::{ClientFrame, ServerFrame};

/// Interval between clock frames.
pub const CLOCK_FRAME_MS: Millis = 1000;

pub struct Session {
    runtime: Runtime,
    cursor: usize,
    state: FsmState,
    last_clock: Option<Millis>,
}

impl Session {
    /// Builds the environment and returns the initial snapshot frames.
    pub fn open(
        cfg: &GatewayConfig,
        model: Option<&str>,
        clock: ClockMode,
    ) -> Result<(Self, Vec<ServerFrame>), String> {
        let model = model.unwrap_or(&cfg.model).to_string();
        let tools = cfg.tool_registry().map_err(|e| e.to_string())?;
        let runtime = Runtime::new(RuntimeSetup {
            config: cfg.runtime_config(),
            system_prompt: cfg.system_prompt.clone(),
            tools,
            models: cfg.model_registry(),
            model,
            clock,
        })
        .map_err(|e| e.to_string())?;
        let mut session = Self {
            state: runtime.state(ROOT_PID).expect("root"),
            runtime,
            cursor: 0,
            last_clock: None,
        };
        let mut frames = vec![
            ServerFrame::StateChange {
                state: session.state.as_str().to_string(),
            },
            ServerFrame::ProcessTree {
                processes: session.runtime.processes(),
            },
        ];
        frames.extend(session.pump());
        Ok((session, frames))
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    /// Applies one client frame. Malformed frames yield an error frame and
    /// leave the session untouched.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerFrame> {
        match ClientFrame::from_json(text) {
            Ok(frame) => self.handle(frame),
            Err(e) => vec![ServerFrame::error(e)],
        }
    }

    pub fn handle(&mut self, frame: ClientFrame) -> Vec<ServerFrame> {
        if self.runtime.clock_mode() == ClockMode::Wall {
            self.runtime.advance_live();
        }
        let mut frames = Vec::new();
        match frame {
            ClientFrame::UtteranceStart => self.runtime.speech_start(),
            ClientFrame::UtteranceEnd { text } => self.runtime.speech_end(&text),
            ClientFrame::Kill { pid } => {
                if let Err(e) = self.runtime.operator_kill(pid) {
                    frames.push(ServerFrame::error(format!("kill {pid}: {e}")));
                }
            }
        }
        let mut out = self.pump();
        out.extend(frames);
        out
    }

    pub fn advance_to(&mut self, t: Millis) -> Vec<ServerFrame> {
        self.runtime.advance_to(t);
        self.pump()
    }

    pub fn advance_live(&mut self) -> Vec<ServerFrame> {
        self.runtime.advance_live();
        self.pump()
    }

    /// Frames for everything recorded since the last call.
    fn pump(&mut self) -> Vec<ServerFrame> {
        let mut frames = Vec::new();
        let records = &self.runtime.records()[self.cursor..];
        self.cursor += records.len();
        let mut tree_changed = false;
        for record in records {
            if let RecordBody::Process { .. } = record.body {
                tree_changed = true;
                continue;
            }
            if record.pid != ROOT_PID {
                continue;
            }
            match &record.body {
                RecordBody::EventProcessed { state_after, .. }
                | RecordBody::ForceTransition { state_after, .. } => {
                    if *state_after != self.state {
                        self.state = *state_after;
                        frames.push(ServerFrame::StateChange {
                            state: state_after.as_str().to_string(),
                        });
                    }
                }
                RecordBody::LedgerAppend { message } => frames.push(ServerFrame::LedgerAppend {
                    message: message.clone(),
                }),
                RecordBody::LedgerRewrite { seq, message, .. } => {
                    frames.push(ServerFrame::LedgerRewrite {
                        seq: *seq,
                        message: message.clone(),
                    })
                }
                RecordBody::Emission {
                    phase: EmissionPhase::SegmentStart,
                    text,
                } => frames.push(ServerFrame::EmitSegment { text: text.clone() }),
                RecordBody::Emission {
                    phase: EmissionPhase::Halted,
                    text,
                } => frames.push(ServerFrame::EmissionHalted {
                    emitted: text.clone(),
                }),
                _ => {}
            }
        }
        if tree_changed {
            frames.push(ServerFrame::ProcessTree {
                processes: self.runtime.processes(),
            });
        }
        let now = self.runtime.now();
        if self.last_clock.is_none_or(|last| now >= last + CLOCK_FRAME_MS) {
            self.last_clock = Some(now);
            frames.push(ServerFrame::Clock { now_ms: now });
        }
        frames
    }
}
