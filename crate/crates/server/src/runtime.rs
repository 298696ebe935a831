//! Live per-session state derived from the event log.
//!
//! [`SessionRuntime::apply`] is the only way the flow position and trigger
//! state change, both when serving requests and when replaying a stored
//! timeline at startup, so the two can never disagree.

use echo_core::flow::{CompletionPayload, InteractionKind, ParticipantSession};
use echo_core::ids::{Millis, StepId};
use echo_core::log::{EventPayload, InteractionEvent, ResponseOutcome};
use echo_core::model::StepKind;
use echo_core::trigger::{FiredTrigger, TriggerInput, TriggerState};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRuntime {
    pub flow: ParticipantSession,
    pub triggers: TriggerState,
    pub external_label: Option<String>,
    /// Seq of the last applied event.
    pub seq: u64,
}

impl SessionRuntime {
    /// Starts a runtime from a `SessionStarted` event.
    pub fn start(event: &InteractionEvent) -> Option<Self> {
        let EventPayload::SessionStarted { study_id, participant_id, external_label, steps, trigger_rules } =
            &event.payload
        else {
            return None;
        };
        let flow = ParticipantSession::new(
            event.session_id.clone(),
            participant_id.clone(),
            study_id.clone(),
            steps.clone(),
            event.server_ts,
        );
        let triggers = TriggerState::new(trigger_rules.clone(), event.session_id.as_str());
        Some(Self { flow, triggers, external_label: external_label.clone(), seq: event.seq })
    }

    /// Rebuilds a runtime from a full timeline.
    pub fn replay(timeline: &[InteractionEvent]) -> Option<Self> {
        let (first, rest) = timeline.split_first()?;
        let mut rt = Self::start(first)?;
        for e in rest {
            rt.apply(e);
        }
        Some(rt)
    }

    /// Folds one event in and returns the popups it fired.
    pub fn apply(&mut self, event: &InteractionEvent) -> Vec<FiredTrigger> {
        self.seq = event.seq;
        let at = event.server_ts;
        let event_id = event.event_id.clone();
        match &event.payload {
            EventPayload::StepEntered { step_kind: StepKind::MainTask, task_id: Some(task_id), .. } => {
                self.triggers.observe(&TriggerInput::TaskStarted { task_id: task_id.clone(), at })
            }
            EventPayload::StepCompleted { completion, .. } => {
                if let CompletionPayload::TaskSubmit { .. } = completion.payload {
                    if let Some(task_id) = self.flow.current_task().cloned() {
                        self.triggers.observe(&TriggerInput::TaskEnded { task_id });
                    }
                }
                // a completion that no longer matches is logged but inert
                let _ = self.flow.apply_completion(completion, at);
                Vec::new()
            }
            EventPayload::PromptSubmitted { task_id, .. } => {
                self.flow.record_interaction(task_id, InteractionKind::Prompt);
                self.triggers.observe(&TriggerInput::Prompt { task_id: task_id.clone(), event_id, at })
            }
            EventPayload::ResponseEnded { task_id, outcome: ResponseOutcome::Completed, .. } => {
                self.flow.record_interaction(task_id, InteractionKind::Response);
                self.triggers.observe(&TriggerInput::Response { task_id: task_id.clone(), event_id, at })
            }
            EventPayload::QueryIssued { task_id, .. } => {
                self.flow.record_interaction(task_id, InteractionKind::Query);
                self.triggers.observe(&TriggerInput::Query { task_id: task_id.clone(), event_id, at })
            }
            EventPayload::ClockTick => self.triggers.observe(&TriggerInput::Tick { at }),
            EventPayload::SubmissionAttempted { task_id } => {
                let before = self.triggers.instances().len();
                self.triggers.pending_before_submission(task_id, at);
                self.triggers.instances()[before..].to_vec()
            }
            EventPayload::PopupAnswered { instance_id, response_id, .. } => {
                let _ = self.triggers.acknowledge(instance_id, response_id.clone(), at);
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    /// Whether a tick at `at` would change trigger state.
    pub fn tick_changes_state(&self, at: Millis) -> bool {
        let mut probe = self.triggers.clone();
        probe.observe(&TriggerInput::Tick { at });
        probe != self.triggers
    }

    /// Whether submitting `task` now would materialize new popups.
    pub fn submission_fires(&self, at: Millis) -> bool {
        let Some(task_id) = self.flow.current_task() else { return false };
        let mut probe = self.triggers.clone();
        let before = probe.instances().len();
        probe.pending_before_submission(task_id, at);
        probe.instances().len() > before
    }

    pub fn current_step_id(&self) -> Option<StepId> {
        self.flow.current().map(|s| s.step_id.clone())
    }
}
