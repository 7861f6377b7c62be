use crate::dispatcher::GenerationStatus;
use crate::events::{Event, EventKind, Priority};
use crate::ledger::{
    Content, FunctionCall, Ledger, NotificationContent, NotificationSource, Role, UserContent,
};
use crate::peripherals::EmissionRate;
use crate::fsm::DialogConfig;
use crate::processes::{
    kill_target, killed_text, terminated_text, ChildRequest, Origin, Pid, ProcessError, ROOT_PID,
};
use crate::toolkit::{request_sent_text, RequestId, ReservedTool, ToolBehavior, ToolStart};
use crate::trace::{ProcessOp, RecordBody, ToolPhase};

use super::{Environment, Occurrence, PendingKind, PendingTool, Runtime};

fn notification(source: NotificationSource, timestamp: u64, data: String) -> Content {
    Content::Notification(NotificationContent {
        source,
        timestamp,
        data,
    })
}

impl Runtime {
    /// Dispatches a function call produced by the model of `pid`.
    pub(super) fn invoke(&mut self, pid: Pid, mut call: FunctionCall) {
        let now = self.now();
        let tools = self.tools.clone();
        let name = call.tool_name().to_string();
        let def = match tools.validate(&call) {
            Ok(def) => def,
            Err(e) => {
                let priority = tools.error_priority(&call);
                self.push_function(pid, call);
                self.record(
                    pid,
                    RecordBody::Tool {
                        phase: ToolPhase::Rejected,
                        tool: name,
                        request_id: None,
                        detail: Some(e.to_string()),
                    },
                );
                let content = notification(NotificationSource::System, now, e.notification_text());
                self.push_event(pid, Event::tool_response(priority, content));
                return;
            }
        };

        let id = self.ids.next_id();
        call.request_id = Some(id.clone());
        self.push_function(pid, call.clone());
        self.record(
            pid,
            RecordBody::Tool {
                phase: ToolPhase::Invoked,
                tool: name.clone(),
                request_id: Some(id.clone()),
                detail: None,
            },
        );
        let source = NotificationSource::Tool {
            tool: name.clone(),
            request_id: id.clone(),
        };
        let priority = def.event_priority();
        let mut immediate: Vec<(Pid, Event)> = Vec::new();
        let fail = |text: String| Event::tool_response(priority, notification(source.clone(), now, text));

        match &def.behavior {
            ToolBehavior::Handler(handler) => match handler.start(call.payload()) {
                ToolStart::Ready {
                    latency_ms,
                    response,
                } => {
                    self.env(pid).pending.insert(
                        id.clone(),
                        PendingTool {
                            tool: name.clone(),
                            priority,
                            kind: PendingKind::Scheduled { response },
                        },
                    );
                    self.agenda.schedule(
                        now + latency_ms,
                        Occurrence::ToolDone {
                            pid,
                            request_id: id.clone(),
                        },
                    );
                }
                ToolStart::Deferred(pending) => {
                    self.env(pid).pending.insert(
                        id.clone(),
                        PendingTool {
                            tool: name.clone(),
                            priority,
                            kind: PendingKind::Deferred(pending),
                        },
                    );
                }
            },
            ToolBehavior::Reserved(tool @ (ReservedTool::Fork | ReservedTool::Spawn)) => {
                let request = ChildRequest::from_payload(call.payload());
                if let Err(e) = self.start_child(pid, *tool, &id, request) {
                    immediate.push((pid, fail(format!("Error: {e}."))));
                }
            }
            ToolBehavior::Reserved(ReservedTool::Kill) => {
                let target = kill_target(call.payload()).unwrap_or(u64::MAX);
                match self.kill_subtree(Some(pid), target) {
                    Ok(notices) => {
                        immediate.push((pid, fail(killed_text(target))));
                        immediate.extend(notices);
                    }
                    Err(e) => immediate.push((pid, fail(format!("Error: {e}.")))),
                }
            }
        }

        let sent = request_sent_text(def, &id, &call);
        let event = Event::with_message(
            EventKind::ToolRequestSent,
            notification(NotificationSource::System, now, sent),
        )
        .expect("request sent carries a message");
        self.push_event(pid, event);
        for (target, event) in immediate {
            self.push_event(target, event);
        }
    }

    fn push_function(&mut self, pid: Pid, call: FunctionCall) {
        if let Some(g) = self.env(pid).generation.as_mut() {
            g.content.push_function(call);
        }
    }

    fn start_child(
        &mut self,
        parent: Pid,
        tool: ReservedTool,
        request_id: &RequestId,
        request: ChildRequest,
    ) -> Result<Pid, String> {
        let model = match &request.model {
            Some(name) => self
                .models
                .get(name)
                .ok_or_else(|| format!("unknown model `{name}`"))?,
            None => self.env(parent).model.clone(),
        };
        let origin = Origin {
            tool,
            request_id: request_id.clone(),
        };
        let pid = self
            .tree
            .create(parent, origin, request.model.clone())
            .map_err(|e| e.to_string())?;

        let ledger = match tool {
            ReservedTool::Fork => {
                // The child sees everything committed before the generation
                // that forked it.
                self.env(parent).ds.ledger.committed_prefix()
            }
            _ => {
                let mut fresh = Ledger::new();
                fresh
                    .append(
                        Role::System,
                        Content::System(self.config.child_system_prompt.clone()),
                        Priority::Min,
                    )
                    .expect("system content");
                fresh
            }
        };
        let env = Environment::new(
            ledger,
            model,
            EmissionRate::Instant,
            DialogConfig::default(),
        );
        let copied = env.ds.ledger.len() as u64;
        self.envs.insert(pid, env);
        let priority = Priority::Level(self.config.priorities.process_result);
        self.env(parent).pending.insert(
            request_id.clone(),
            PendingTool {
                tool: tool.name().to_string(),
                priority,
                kind: PendingKind::Child,
            },
        );
        let op = match tool {
            ReservedTool::Fork => ProcessOp::Fork,
            _ => ProcessOp::Spawn,
        };
        self.record(
            pid,
            RecordBody::Process {
                op,
                child: pid,
                parent: Some(parent),
                origin_request: Some(request_id.clone()),
                detail: request.model,
            },
        );
        for seq in 0..copied {
            self.record_append(pid, seq);
        }
        if self.config.child_ticks {
            let next = self.clock.next_tick_after(self.now());
            self.agenda.schedule(next, Occurrence::Tick { pid });
        }
        let now = self.now();
        let instructions = Event::with_message(
            EventKind::UserChat,
            Content::User(UserContent {
                timestamp: now,
                chat: request.instructions,
            }),
        )
        .expect("user chat carries a message")
        .with_priority(Priority::Level(self.config.priorities.user));
        self.push_event(pid, instructions);
        Ok(pid)
    }

    /// Kills `target` and its descendants. Returns the terminal notice for the
    /// target's parent, if that parent is still running.
    pub(super) fn kill_subtree(
        &mut self,
        caller: Option<Pid>,
        target: Pid,
    ) -> Result<Vec<(Pid, Event)>, ProcessError> {
        let killed = self.tree.kill(caller, target)?;
        for &pid in &killed {
            self.env(pid).emitter.halt();
            if let Some(g) = self.env(pid).generation.as_mut() {
                g.stream.cancel();
                g.parser.cancel();
            }
            self.close_generation(pid, GenerationStatus::Cancelled, Some("killed".into()));
            let env = self.env(pid);
            env.ds.queue.clear();
            let discarded: Vec<(RequestId, String)> = std::mem::take(&mut env.pending)
                .into_iter()
                .map(|(id, p)| (id, p.tool))
                .collect();
            for (id, tool) in discarded {
                self.record(
                    pid,
                    RecordBody::Tool {
                        phase: ToolPhase::Discarded,
                        tool,
                        request_id: Some(id),
                        detail: None,
                    },
                );
            }
            self.record(
                pid,
                RecordBody::Process {
                    op: ProcessOp::Kill,
                    child: pid,
                    parent: self.tree.parent(pid),
                    origin_request: self.tree.origin(pid).map(|o| o.request_id.clone()),
                    detail: caller.map(|c| format!("killed by process {c}")),
                },
            );
        }
        Ok(self.terminal_notice(target, terminated_text(target)).into_iter().collect())
    }

    /// Removes the parent's pending entry for child `pid` and builds the
    /// response that closes the fork or spawn request.
    fn terminal_notice(&mut self, pid: Pid, text: String) -> Option<(Pid, Event)> {
        let parent = self.tree.parent(pid)?;
        let origin = self.tree.origin(pid)?.clone();
        if !self.tree.is_running(parent) {
            return None;
        }
        let pending = self.env(parent).pending.remove(&origin.request_id)?;
        let now = self.now();
        let content = notification(
            NotificationSource::Tool {
                tool: origin.tool.name().to_string(),
                request_id: origin.request_id,
            },
            now,
            text,
        );
        Some((parent, Event::tool_response(pending.priority, content)))
    }

    pub(super) fn on_tool_done(&mut self, pid: Pid, request_id: &RequestId) {
        if !self.tree.is_running(pid) {
            return;
        }
        let Some(pending) = self.env(pid).pending.remove(request_id) else {
            return;
        };
        match pending.kind {
            PendingKind::Scheduled { response } => {
                self.complete_tool(pid, request_id, pending.tool, pending.priority, response)
            }
            other => {
                self.env(pid).pending.insert(
                    request_id.clone(),
                    PendingTool {
                        kind: other,
                        ..pending
                    },
                );
            }
        }
    }

    fn complete_tool(
        &mut self,
        pid: Pid,
        request_id: &RequestId,
        tool: String,
        priority: Priority,
        response: String,
    ) {
        self.record(
            pid,
            RecordBody::Tool {
                phase: ToolPhase::Completed,
                tool: tool.clone(),
                request_id: Some(request_id.clone()),
                detail: None,
            },
        );
        let now = self.now();
        let content = notification(
            NotificationSource::Tool {
                tool,
                request_id: request_id.clone(),
            },
            now,
            response,
        );
        self.push_event(pid, Event::tool_response(priority, content));
    }

    /// Hands the result of every child that has settled to its parent.
    pub(super) fn settle_children(&mut self) {
        loop {
            let done: Vec<Pid> = self
                .tree
                .pids()
                .filter(|&p| p != ROOT_PID && self.tree.is_running(p))
                .filter(|p| self.envs.get(p).is_some_and(Environment::quiescent))
                .collect();
            if done.is_empty() {
                return;
            }
            for pid in done {
                self.tree.finish(pid).expect("running child");
                let segments = &self.env(pid).emitted_segments;
                let result = if segments.is_empty() {
                    format!("Process {pid} finished without output.")
                } else {
                    segments.join(" ")
                };
                self.record(
                    pid,
                    RecordBody::Process {
                        op: ProcessOp::Finish,
                        child: pid,
                        parent: self.tree.parent(pid),
                        origin_request: self.tree.origin(pid).map(|o| o.request_id.clone()),
                        detail: None,
                    },
                );
                if let Some((parent, event)) = self.terminal_notice(pid, result) {
                    self.push_event(parent, event);
                }
            }
        }
    }

    /// Polls live token streams and deferred tools. Returns true if anything
    /// moved.
    pub(super) fn poll_live(&mut self) -> bool {
        let mut moved = false;
        let pids: Vec<Pid> = self
            .tree
            .pids()
            .filter(|&p| self.tree.is_running(p))
            .collect();
        for pid in pids {
            if self.env(pid).generation.as_ref().is_some_and(|g| g.awaiting_poll) {
                let before = self.agenda.items.len();
                self.pull_next(pid);
                let still_waiting = self
                    .env(pid)
                    .generation
                    .as_ref()
                    .is_some_and(|g| g.awaiting_poll);
                moved |= !still_waiting || self.agenda.items.len() != before;
            }
            let ready: Vec<(RequestId, Result<String, String>)> = self
                .env(pid)
                .pending
                .iter_mut()
                .filter_map(|(id, p)| match &mut p.kind {
                    PendingKind::Deferred(d) => d.poll().map(|r| (id.clone(), r)),
                    _ => None,
                })
                .collect();
            for (id, result) in ready {
                if !self.tree.is_running(pid) {
                    break;
                }
                let Some(p) = self.env(pid).pending.remove(&id) else {
                    continue;
                };
                let text = result.unwrap_or_else(|e| format!("Error: {e}."));
                self.complete_tool(pid, &id, p.tool, p.priority, text);
                moved = true;
            }
        }
        moved
    }
}
