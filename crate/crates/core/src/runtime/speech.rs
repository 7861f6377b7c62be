use crate::dispatcher::{reconcile, GenerationStatus};
use crate::events::{Event, EventKind, Priority};
use crate::fsm::FsmState;
use crate::ledger::{Content, NotificationContent, UserContent};
use crate::processes::ROOT_PID;
use crate::trace::{EmissionPhase, RecordBody, RewriteReason};

use super::Runtime;

pub const INTERRUPT_NOTICE: &str = "Assistant interrupted due to user speaking";

impl Runtime {
    /// The user started talking. Anything being generated or spoken is cut
    /// off, the ledger is reconciled with what was actually heard, and the
    /// root process moves to listening.
    pub fn speech_start(&mut self) {
        if self.speaking {
            return;
        }
        self.speaking = true;
        let pid = ROOT_PID;
        let env = self.env(pid);
        let busy = env.generation.is_some()
            || env.emitter.is_active()
            || env.ds.state != FsmState::Idle;
        if !busy {
            self.force(pid, FsmState::Listening, "speech_start");
            return;
        }

        self.env(pid).draining = true;
        let report = self.env(pid).emitter.halt();
        if report.was_active {
            self.record(
                pid,
                RecordBody::Emission {
                    phase: EmissionPhase::Halted,
                    text: report.emitted_text(),
                },
            );
        }
        let in_flight = self.env(pid).generation.as_ref().map(|g| (g.handle.id, g.chat_opened));
        if in_flight.is_some() {
            let events = {
                let g = self.env(pid).generation.as_mut().expect("in flight");
                g.stream.cancel();
                g.parser.cancel()
            };
            // The emitter was halted, so closing the chat here emits nothing.
            for event in events {
                if let crate::dispatcher::ParseEvent::Close(kind) = event {
                    if let Some(g) = self.env(pid).generation.as_mut() {
                        g.content.note(kind);
                    }
                }
            }
            self.close_generation(pid, GenerationStatus::Cancelled, Some("interrupted".into()));
            self.enqueue(pid, Event::generate_done());
        }

        let chats: Vec<(u64, u64)> = std::mem::take(&mut self.env(pid).chat_seqs).into_iter().collect();
        for (key, seq) in chats {
            let cut_mid_generation = in_flight == Some((key, true));
            let Some(halted) = report.chats.iter().find(|c| c.chat == key) else {
                continue;
            };
            let unheard = halted.emitted.trim_end() != halted.generated.trim_end();
            if !(unheard || cut_mid_generation) {
                continue;
            }
            let generated = match self.env(pid).ds.ledger.get(seq).and_then(|m| m.assistant()) {
                Some(a) => a.chat.clone(),
                None => continue,
            };
            let result = reconcile(&generated, &halted.emitted)
                .map_err(|e| e.to_string())
                .and_then(|chat| {
                    self.env(pid)
                        .ds
                        .ledger
                        .rewrite_interrupted(seq, &chat)
                        .map_err(|e| e.to_string())
                });
            match result {
                Ok(()) => {
                    let message = self.env(pid).ds.ledger.get(seq).expect("rewritten").to_json();
                    self.record(
                        pid,
                        RecordBody::LedgerRewrite {
                            seq,
                            reason: RewriteReason::Reconcile,
                            message,
                        },
                    );
                }
                Err(e) => self.fault(format!("reconcile of message {seq} failed: {e}")),
            }
        }

        let env = self.env(pid);
        env.followup_pending = false;
        let now = self.now();
        let notice = Event::with_message(
            EventKind::Interrupt,
            Content::Notification(NotificationContent::system(now, INTERRUPT_NOTICE)),
        )
        .expect("interrupt carries a message");
        self.enqueue(pid, notice);
        self.env(pid).draining = false;
        self.drain(pid);
    }

    /// The user stopped talking; their words become a user message.
    pub fn speech_end(&mut self, text: &str) {
        self.speaking = false;
        let pid = ROOT_PID;
        if self.env(pid).ds.state == FsmState::Listening {
            self.force(pid, FsmState::Idle, "speech_end");
        }
        let now = self.now();
        let event = Event::with_message(
            EventKind::UserChat,
            Content::User(UserContent {
                timestamp: now,
                chat: text.to_string(),
            }),
        )
        .expect("user chat carries a message")
        .with_priority(Priority::Level(self.config.priorities.user));
        self.push_event(pid, event);
    }

    fn force(&mut self, pid: u64, state: FsmState, reason: &str) {
        let t = self.env(pid).ds.force_transition(state, reason);
        self.record(
            pid,
            RecordBody::ForceTransition {
                state_before: t.state_before,
                state_after: t.state_after,
                reason: t.reason,
            },
        );
    }
}
