//! The four-state dialog machine and its event-handling step.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::events::{Event, EventKind, Priority, SchedulingQueue};
use crate::ledger::{Ledger, Millis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FsmState {
    #[default]
    Idle,
    Listening,
    Generating,
    Emitting,
}

impl FsmState {
    pub const ALL: [FsmState; 4] = [
        FsmState::Idle,
        FsmState::Listening,
        FsmState::Generating,
        FsmState::Emitting,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FsmState::Idle => "idle",
            FsmState::Listening => "listening",
            FsmState::Generating => "generating",
            FsmState::Emitting => "emitting",
        }
    }
}

impl fmt::Display for FsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether the event at the head of the queue may run in `state`.
pub fn gate_allows(state: FsmState, priority: Priority) -> bool {
    match state {
        FsmState::Idle => true,
        FsmState::Generating => priority <= Priority::Level(1),
        FsmState::Emitting => priority < Priority::Level(1),
        FsmState::Listening => false,
    }
}

/// Why the state after an event differs from the event's target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideReason {
    /// emit_done arrived while the model was still generating.
    EmitDoneWhileGenerating,
    /// An idle-targeting event arrived while output was still being emitted.
    EmitterActive,
    /// An idle-targeting event arrived while a generation was still running.
    GenerationInProgress,
    /// New context arrived during the generation that just finished; another
    /// generation starts right away.
    FollowupGeneration,
}

/// Facts about the peripherals and dispatcher consulted when an event targets
/// idle. The default describes a system with nothing else going on.
#[derive(Debug, Clone, Copy, Default)]
pub struct Surroundings {
    pub emitter_active: bool,
    pub followup_pending: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DialogConfig {
    /// Let events below priority -1 run while the user is speaking.
    pub interrupt_user: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub ran: bool,
    pub event: Option<Event>,
    pub message_seq: Option<u64>,
    pub state_before: FsmState,
    pub state_after: FsmState,
    pub override_reason: Option<OverrideReason>,
    /// The event ran through the listening gate via the interrupt-user hook.
    pub interrupted_user: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcedTransition {
    pub state_before: FsmState,
    pub state_after: FsmState,
    pub reason: String,
}

/// Dialog state, scheduling queue and ledger of one execution environment.
#[derive(Debug, Clone, Default)]
pub struct DialogSystem {
    pub state: FsmState,
    pub queue: SchedulingQueue,
    pub ledger: Ledger,
    pub generation_in_progress: bool,
    pub config: DialogConfig,
}

impl DialogSystem {
    pub fn new(ledger: Ledger) -> Self {
        Self {
            ledger,
            ..Default::default()
        }
    }

    pub fn push(&mut self, event: Event, now: Millis) -> u64 {
        self.queue.push(event, now)
    }

    /// One event-handling step with no peripheral context.
    pub fn step(&mut self) -> StepOutcome {
        self.step_with(Surroundings::default())
    }

    /// One event-handling step.
    ///
    /// Pops the head event when the gate for the current state allows it,
    /// appends its message (if any) and moves to the event's target state.
    /// Idle targets are then corrected to reflect what is still running.
    pub fn step_with(&mut self, around: Surroundings) -> StepOutcome {
        let state_before = self.state;
        let mut outcome = StepOutcome {
            ran: false,
            event: None,
            message_seq: None,
            state_before,
            state_after: state_before,
            override_reason: None,
            interrupted_user: false,
        };
        let Some(top) = self.queue.top() else {
            return outcome;
        };
        let priority = top.priority;
        let hook = state_before == FsmState::Listening
            && self.config.interrupt_user
            && priority < Priority::Level(-1);
        if !(gate_allows(state_before, priority) || hook) {
            return outcome;
        }

        let event = self.queue.pop().expect("queue has a top event");
        if let Some(content) = &event.message {
            let seq = self
                .ledger
                .append(content.role(), content.clone(), event.priority)
                .expect("role is derived from content");
            outcome.message_seq = Some(seq);
        }
        if event.kind == EventKind::GenerateDone {
            self.generation_in_progress = false;
        }
        self.state = event.target_state;
        outcome.override_reason = apply_emit_done_override(self, &event);

        if self.state == FsmState::Idle {
            if around.emitter_active {
                self.state = FsmState::Emitting;
                outcome.override_reason = Some(OverrideReason::EmitterActive);
            } else if self.generation_in_progress {
                self.state = FsmState::Generating;
                outcome.override_reason = Some(OverrideReason::GenerationInProgress);
            } else if matches!(event.kind, EventKind::GenerateDone | EventKind::EmitDone)
                && around.followup_pending
            {
                self.state = FsmState::Generating;
                outcome.override_reason = Some(OverrideReason::FollowupGeneration);
            }
        }

        outcome.ran = true;
        outcome.interrupted_user = hook;
        outcome.state_after = self.state;
        outcome.event = Some(event);
        outcome
    }

    /// Sets the state without going through the queue. Used by the peripheral
    /// paths (speech start/end); never touches the ledger.
    pub fn force_transition(&mut self, new_state: FsmState, reason: &str) -> ForcedTransition {
        let state_before = self.state;
        self.state = new_state;
        ForcedTransition {
            state_before,
            state_after: new_state,
            reason: reason.to_string(),
        }
    }
}

/// An emit_done processed while the model is still generating returns the
/// machine to generating instead of idle.
pub fn apply_emit_done_override(ds: &mut DialogSystem, event: &Event) -> Option<OverrideReason> {
    if event.kind == EventKind::EmitDone && ds.generation_in_progress {
        ds.state = FsmState::Generating;
        Some(OverrideReason::EmitDoneWhileGenerating)
    } else {
        None
    }
}
