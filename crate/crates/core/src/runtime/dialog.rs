use crate::dispatcher::{
    GenerationHandle, GenerationStatus, ParseEvent, StreamParser, StreamStep,
};
use crate::events::{Event, EventKind, Priority};
use crate::fsm::{FsmState, OverrideReason, Surroundings};
use crate::ledger::{Content, NotificationContent, SegmentKind};
use crate::peripherals::{time_passage_text, EmitterSignal};
use crate::processes::{Pid, ROOT_PID};
use crate::trace::{EmissionPhase, GenerationPhase, RecordBody, RewriteReason};

use super::{Generation, Occurrence, Runtime};

impl Runtime {
    /// Enqueues `event` for `pid` and runs whatever the gate lets through.
    pub(super) fn push_event(&mut self, pid: Pid, event: Event) {
        if !self.tree.is_running(pid) {
            return;
        }
        let now = self.now();
        self.env(pid).ds.push(event, now);
        self.drain(pid);
    }

    /// Enqueues without stepping. The caller drains afterwards.
    pub(super) fn enqueue(&mut self, pid: Pid, event: Event) {
        let now = self.now();
        self.env(pid).ds.push(event, now);
    }

    pub(super) fn drain(&mut self, pid: Pid) {
        if !self.tree.is_running(pid) || self.env(pid).draining {
            return;
        }
        self.env(pid).draining = true;
        let mut wants_generation = false;
        loop {
            let env = self.env(pid);
            let around = Surroundings {
                emitter_active: env.emitter.is_active(),
                followup_pending: env.followup_pending,
            };
            let outcome = env.ds.step_with(around);
            if outcome.ran {
                let event = outcome.event.expect("ran implies event");
                self.record(
                    pid,
                    RecordBody::EventProcessed {
                        kind: event.kind,
                        priority: event.priority,
                        enqueue_seq: event.enqueue_seq,
                        enqueued_at: event.enqueue_time,
                        state_before: outcome.state_before,
                        state_after: outcome.state_after,
                        message_seq: outcome.message_seq,
                        override_reason: outcome.override_reason,
                    },
                );
                if let Some(seq) = outcome.message_seq {
                    self.record_append(pid, seq);
                }
                let asks = event.target_state == FsmState::Generating
                    || outcome.override_reason == Some(OverrideReason::FollowupGeneration);
                if outcome.state_after == FsmState::Generating && asks {
                    let env = self.env(pid);
                    if env.generation.is_none() {
                        wants_generation = true;
                    } else if event.message.is_some() {
                        env.followup_pending = true;
                    }
                }
                continue;
            }
            // Several context events may be handled back to back; the model
            // is started once they are all in the ledger.
            let env = self.env(pid);
            if wants_generation && env.ds.state == FsmState::Generating && env.generation.is_none() {
                wants_generation = false;
                self.begin_generation(pid);
                continue;
            }
            break;
        }
        self.env(pid).draining = false;
    }

    fn begin_generation(&mut self, pid: Pid) {
        let id = self.next_generation;
        self.next_generation += 1;
        let now = self.now();
        let priority = Priority::Level(self.config.priorities.assistant);
        let template = self.template.clone();
        let env = self.env(pid);
        let prompt = env.ds.ledger.render(&*template);
        let seq = env.ds.ledger.open_assistant(priority);
        env.ds.generation_in_progress = true;
        env.followup_pending = false;
        let stream = env.model.generate(&prompt);
        let model = env.model.name().to_string();
        env.generation = Some(Generation {
            handle: GenerationHandle::new(id, now, seq),
            stream,
            parser: StreamParser::new(),
            content: Default::default(),
            chat_open: false,
            chat_opened: false,
            awaiting_poll: false,
        });
        self.record_append(pid, seq);
        self.record(
            pid,
            RecordBody::Generation {
                generation: id,
                phase: GenerationPhase::Start,
                status: GenerationStatus::Running,
                detail: Some(model),
            },
        );
        self.pull_next(pid);
    }

    pub(super) fn pull_next(&mut self, pid: Pid) {
        let now = self.now();
        let Some(g) = self.env(pid).generation.as_mut() else {
            return;
        };
        g.awaiting_poll = false;
        let id = g.handle.id;
        match g.stream.next_step() {
            StreamStep::Token { text, delay_ms } => self.agenda.schedule(
                now + delay_ms,
                Occurrence::Token {
                    pid,
                    generation: id,
                    text,
                },
            ),
            StreamStep::Pending => g.awaiting_poll = true,
            StreamStep::End => self.finish_generation(pid, GenerationStatus::Finished, None),
            StreamStep::Failed(e) => self.finish_generation(pid, GenerationStatus::Aborted, Some(e)),
        }
    }

    pub(super) fn on_token(&mut self, pid: Pid, generation: u64, text: &str) {
        if !self.tree.is_running(pid) {
            return;
        }
        let Some(g) = self.env(pid).generation.as_mut() else {
            return;
        };
        if g.handle.id != generation {
            return;
        }
        match g.parser.feed(text) {
            Ok(events) => {
                self.apply_parse(pid, events);
                let still = self
                    .env(pid)
                    .generation
                    .as_ref()
                    .is_some_and(|g| g.handle.id == generation);
                if still {
                    self.pull_next(pid);
                }
            }
            Err(e) => self.finish_generation(pid, GenerationStatus::Aborted, Some(e.to_string())),
        }
    }

    fn apply_parse(&mut self, pid: Pid, events: Vec<ParseEvent>) {
        let now = self.now();
        for event in events {
            let env = self.env(pid);
            let Some(g) = env.generation.as_mut() else {
                return;
            };
            let key = g.handle.id;
            let signals = match event {
                ParseEvent::Open(kind) => {
                    g.content.note(kind);
                    if kind == SegmentKind::Chat {
                        g.chat_open = true;
                        g.chat_opened = true;
                        let seq = g.handle.ledger_seq;
                        env.chat_seqs.insert(key, seq);
                        env.emitter.open_chat(key);
                    }
                    Vec::new()
                }
                ParseEvent::Thought(text) => {
                    g.content.push_thought(&text);
                    Vec::new()
                }
                ParseEvent::Chat(text) => {
                    g.content.push_chat(&text);
                    env.emitter.push_chat(key, &text, now)
                }
                ParseEvent::Close(SegmentKind::Chat) => {
                    g.chat_open = false;
                    env.emitter.close_chat(key, now)
                }
                ParseEvent::Close(_) => Vec::new(),
                ParseEvent::Function(call) => {
                    self.invoke(pid, call);
                    Vec::new()
                }
            };
            self.handle_signals(pid, signals);
        }
    }

    pub(super) fn handle_signals(&mut self, pid: Pid, signals: Vec<EmitterSignal>) {
        for signal in signals {
            match signal {
                EmitterSignal::Activated => self.push_event(pid, Event::emit()),
                EmitterSignal::SegmentStarted { text, .. } => self.record(
                    pid,
                    RecordBody::Emission {
                        phase: EmissionPhase::SegmentStart,
                        text,
                    },
                ),
                EmitterSignal::WordDue { at, epoch } => {
                    self.agenda.schedule(at, Occurrence::Word { pid, epoch })
                }
                EmitterSignal::SegmentFinished { text, .. } => {
                    self.env(pid).emitted_segments.push(text.clone());
                    self.record(
                        pid,
                        RecordBody::Emission {
                            phase: EmissionPhase::SegmentDone,
                            text,
                        },
                    );
                }
                EmitterSignal::Drained => {
                    let env = self.env(pid);
                    let current = env.generation.as_ref().map(|g| g.handle.id);
                    env.chat_seqs.retain(|k, _| Some(*k) == current);
                    self.push_event(pid, Event::emit_done());
                }
            }
        }
    }

    pub(super) fn on_word(&mut self, pid: Pid, epoch: u64) {
        if !self.tree.is_running(pid) {
            return;
        }
        let now = self.now();
        let signals = self.env(pid).emitter.on_word_due(epoch, now);
        self.handle_signals(pid, signals);
    }

    /// Ends the running generation of `pid`: flushes or drops the parser,
    /// writes the assistant message and queues generate_done.
    pub(super) fn finish_generation(
        &mut self,
        pid: Pid,
        mut status: GenerationStatus,
        mut detail: Option<String>,
    ) {
        let events = {
            let Some(g) = self.env(pid).generation.as_mut() else {
                return;
            };
            if status == GenerationStatus::Finished {
                match g.parser.finish() {
                    Ok(events) => events,
                    Err(e) => {
                        status = GenerationStatus::Aborted;
                        detail = Some(e.to_string());
                        g.parser.cancel()
                    }
                }
            } else {
                g.stream.cancel();
                g.parser.cancel()
            }
        };
        self.apply_parse(pid, events);
        self.close_generation(pid, status, detail);
        self.push_event(pid, Event::generate_done());
    }

    /// Finalizes and forgets the current generation without queueing
    /// anything.
    pub(super) fn close_generation(
        &mut self,
        pid: Pid,
        status: GenerationStatus,
        detail: Option<String>,
    ) {
        let env = self.env(pid);
        let Some(mut g) = env.generation.take() else {
            return;
        };
        g.handle.stop(status);
        let seq = g.handle.ledger_seq;
        let id = g.handle.id;
        env.emitter.retire(id);
        if let Err(e) = env.ds.ledger.finalize_assistant(seq, g.content) {
            self.fault(format!("pid {pid}: finalize of message {seq} failed: {e}"));
        } else {
            let message = self.env(pid).ds.ledger.get(seq).expect("finalized").to_json();
            self.record(
                pid,
                RecordBody::LedgerRewrite {
                    seq,
                    reason: RewriteReason::Finalize,
                    message,
                },
            );
        }
        self.record(
            pid,
            RecordBody::Generation {
                generation: id,
                phase: GenerationPhase::End,
                status,
                detail,
            },
        );
    }

    pub(super) fn on_tick(&mut self, pid: Pid) {
        if !self.tree.is_running(pid) {
            return;
        }
        let now = self.now();
        let text = time_passage_text(now);
        let event = Event::with_message(
            EventKind::TimePassage,
            Content::Notification(NotificationContent::system(now, text)),
        )
        .expect("time passage carries a message")
        .with_priority(Priority::Level(self.config.priorities.time_passage));
        self.enqueue(pid, event);
        if self.config.coalesce_ticks {
            self.env(pid).ds.queue.coalesce_time_passage();
        }
        self.drain(pid);
        if pid == ROOT_PID || self.config.child_ticks {
            let next = self.clock.next_tick_after(now);
            self.agenda.schedule(next, Occurrence::Tick { pid });
        }
    }
}
