//! Linear progression of one participant through a study's enabled steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Millis, ParticipantId, QuestionId, SessionId, StepId, StudyId, SurveyId, TaskId};
use crate::model::{
    AnswerValue, AttentionFailPolicy, FlowStep, Modality, StepKind, StudyConfig, SurveyInstrument,
    INTENTIONS_QUESTION,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepState {
    NotStarted,
    InProgress,
    Completed { at: Millis },
}

/// A flow step as materialized into a session at start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStep {
    pub step_id: StepId,
    pub kind: StepKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey_id: Option<SurveyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reminder_text: Option<String>,
    pub state: StepState,
}

impl From<&FlowStep> for SessionStep {
    fn from(step: &FlowStep) -> Self {
        Self {
            step_id: step.step_id.clone(),
            kind: step.kind,
            task_id: step.task_id.clone(),
            survey_id: step.survey_id.clone(),
            reminder_text: step.reminder_text.clone(),
            state: StepState::NotStarted,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionCounts {
    pub prompts: u32,
    pub responses: u32,
    pub queries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionKind {
    Prompt,
    Response,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantSession {
    pub session_id: SessionId,
    pub participant_id: ParticipantId,
    pub study_id: StudyId,
    pub steps: Vec<SessionStep>,
    pub cursor: usize,
    pub interaction_counts: InteractionCounts,
    pub task_counts: BTreeMap<TaskId, InteractionCounts>,
    /// Intention labels chosen on the latest pre-task survey.
    #[serde(default)]
    pub selected_intentions: Vec<String>,
    pub started_at: Millis,
    pub completed_at: Option<Millis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompletionPayload {
    ConsentAck { checked: Vec<bool> },
    SurveyAnswers { answers: BTreeMap<QuestionId, AnswerValue> },
    TaskSubmit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_note: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCompletion {
    pub step_kind: StepKind,
    pub payload: CompletionPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    ConsentIncomplete,
    MissingRequired,
    BelowMinInteractions,
    AttentionFailed,
    PendingTrigger,
}

impl GateReason {
    pub fn as_str(self) -> &'static str {
        match self {
            GateReason::ConsentIncomplete => "consent_incomplete",
            GateReason::MissingRequired => "missing_required",
            GateReason::BelowMinInteractions => "below_min_interactions",
            GateReason::AttentionFailed => "attention_failed",
            GateReason::PendingTrigger => "pending_trigger",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlowError {
    #[error("gate refused advance ({}): {detail}", reason.as_str())]
    Gate { reason: GateReason, detail: String },
    #[error("current step is {current:?}, not {requested:?}")]
    WrongStep { current: Option<StepKind>, requested: StepKind },
    #[error("invalid answer for {question_id}: {reason}")]
    InvalidAnswer { question_id: QuestionId, reason: String },
    #[error("the session has already completed every step")]
    SessionComplete,
    #[error("participant already has a session in this study")]
    DuplicateSession,
    #[error("step refers to survey {0} which no longer exists")]
    UnknownSurvey(SurveyId),
    #[error("step refers to task {0} which no longer exists")]
    UnknownTask(TaskId),
}

impl FlowError {
    fn gate(reason: GateReason, detail: impl Into<String>) -> Self {
        FlowError::Gate { reason, detail: detail.into() }
    }
}

/// Everything `advance` needs besides the session itself.
#[derive(Debug, Clone, Copy)]
pub struct GateContext<'a> {
    pub config: &'a StudyConfig,
    pub now: Millis,
    /// Popups still awaiting an answer, as reported by the trigger engine.
    pub pending_popups: usize,
}

/// Enabled steps sorted by their `order`. Main-task steps then take the
/// relative order given by `settings.task_order`, keeping their slots.
pub fn enabled_sequence(config: &StudyConfig) -> Vec<FlowStep> {
    let mut steps: Vec<FlowStep> = config.flow.iter().filter(|s| s.enabled).cloned().collect();
    steps.sort_by_key(|s| s.order);

    let slots: Vec<usize> = (0..steps.len()).filter(|&i| steps[i].kind == StepKind::MainTask).collect();
    let mut mains: Vec<FlowStep> = slots.iter().map(|&i| steps[i].clone()).collect();
    let rank = |s: &FlowStep| {
        s.task_id
            .as_ref()
            .and_then(|t| config.settings.task_order.iter().position(|o| o == t))
            .unwrap_or(usize::MAX)
    };
    mains.sort_by_key(rank);
    for (slot, step) in slots.into_iter().zip(mains) {
        steps[slot] = step;
    }
    steps
}

/// Starts a session at the first enabled step. Enforcing one session per
/// participant and study is the caller's job (see [`FlowError::DuplicateSession`]).
pub fn init_session(
    config: &StudyConfig,
    session_id: SessionId,
    participant_id: ParticipantId,
    now: Millis,
) -> ParticipantSession {
    let steps = enabled_sequence(config).iter().map(SessionStep::from).collect();
    ParticipantSession::new(session_id, participant_id, config.study_id.clone(), steps, now)
}

impl ParticipantSession {
    pub fn new(
        session_id: SessionId,
        participant_id: ParticipantId,
        study_id: StudyId,
        mut steps: Vec<SessionStep>,
        now: Millis,
    ) -> Self {
        for step in &mut steps {
            step.state = StepState::NotStarted;
        }
        let completed_at = if let Some(first) = steps.first_mut() {
            first.state = StepState::InProgress;
            None
        } else {
            Some(now)
        };
        Self {
            session_id,
            participant_id,
            study_id,
            steps,
            cursor: 0,
            interaction_counts: InteractionCounts::default(),
            task_counts: BTreeMap::new(),
            selected_intentions: Vec::new(),
            started_at: now,
            completed_at,
        }
    }

    pub fn current(&self) -> Option<&SessionStep> {
        self.steps.get(self.cursor)
    }

    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }

    /// Task of the current step, if it is a main task.
    pub fn current_task(&self) -> Option<&TaskId> {
        self.current().filter(|s| s.kind == StepKind::MainTask).and_then(|s| s.task_id.as_ref())
    }

    /// Whether the main task for `task_id` has been entered.
    pub fn task_started(&self, task_id: &TaskId) -> bool {
        self.steps
            .iter()
            .any(|s| s.task_id.as_ref() == Some(task_id) && s.state != StepState::NotStarted)
    }

    pub fn counts_for(&self, task_id: &TaskId) -> InteractionCounts {
        self.task_counts.get(task_id).copied().unwrap_or_default()
    }

    pub fn record_interaction(&mut self, task_id: &TaskId, kind: InteractionKind) {
        let per_task = self.task_counts.entry(task_id.clone()).or_default();
        for counts in [&mut self.interaction_counts, per_task] {
            match kind {
                InteractionKind::Prompt => counts.prompts += 1,
                InteractionKind::Response => counts.responses += 1,
                InteractionKind::Query => counts.queries += 1,
            }
        }
    }

    /// Checks every gate for the step at the cursor and returns the advanced
    /// session. `self` is left untouched on refusal.
    pub fn advance(&self, completion: &StepCompletion, ctx: GateContext<'_>) -> Result<Self, FlowError> {
        let step = self.current().ok_or(FlowError::SessionComplete)?;
        if step.kind != completion.step_kind {
            return Err(FlowError::WrongStep { current: Some(step.kind), requested: completion.step_kind });
        }
        let config = ctx.config;

        match (&completion.payload, step.kind) {
            (CompletionPayload::ConsentAck { checked }, StepKind::Consent) => {
                let expected = config.consent_checkboxes.len();
                if checked.len() != expected || !checked.iter().all(|&c| c) {
                    let ticked = checked.iter().filter(|&&c| c).count();
                    return Err(FlowError::gate(
                        GateReason::ConsentIncomplete,
                        format!("{ticked} of {expected} acknowledgments checked"),
                    ));
                }
            }
            (CompletionPayload::SurveyAnswers { answers }, kind) if kind.binds_survey() => {
                let instrument = effective_instrument(config, self, step)?;
                check_answers(&instrument, answers)?;
                let failed = attention_failures(&instrument, answers);
                if !failed.is_empty() && config.settings.attention_fail_policy == AttentionFailPolicy::BlockAdvance {
                    return Err(FlowError::gate(
                        GateReason::AttentionFailed,
                        format!("{} attention check(s) failed", failed.len()),
                    ));
                }
            }
            (CompletionPayload::TaskSubmit { .. }, StepKind::MainTask) => {
                check_interactions(self, config)?;
                if ctx.pending_popups > 0 {
                    return Err(FlowError::gate(
                        GateReason::PendingTrigger,
                        format!("{} popup(s) must be answered first", ctx.pending_popups),
                    ));
                }
            }
            _ => {
                return Err(FlowError::WrongStep { current: Some(step.kind), requested: completion.step_kind });
            }
        }

        let mut next = self.clone();
        next.apply_completion(completion, ctx.now)?;
        Ok(next)
    }

    /// Marks the current step completed without checking gates. Used by
    /// `advance` and when replaying stored completions.
    pub fn apply_completion(&mut self, completion: &StepCompletion, at: Millis) -> Result<(), FlowError> {
        let step = self.steps.get_mut(self.cursor).ok_or(FlowError::SessionComplete)?;
        if step.kind != completion.step_kind {
            return Err(FlowError::WrongStep { current: Some(step.kind), requested: completion.step_kind });
        }
        step.state = StepState::Completed { at };
        if step.kind == StepKind::PreTask {
            if let CompletionPayload::SurveyAnswers { answers } = &completion.payload {
                self.selected_intentions = match answers.get(INTENTIONS_QUESTION) {
                    Some(AnswerValue::Choices(labels)) => labels.clone(),
                    _ => Vec::new(),
                };
            }
        }
        self.cursor += 1;
        match self.steps.get_mut(self.cursor) {
            Some(next) => next.state = StepState::InProgress,
            None => self.completed_at = Some(at),
        }
        Ok(())
    }
}

/// The instrument a survey step presents: the configured survey plus the
/// generated typology items (intentions before a task, fulfillment after).
pub fn effective_instrument(
    config: &StudyConfig,
    session: &ParticipantSession,
    step: &SessionStep,
) -> Result<SurveyInstrument, FlowError> {
    let survey_id = step.survey_id.clone().unwrap_or_default();
    let mut instrument = config
        .survey(&survey_id)
        .cloned()
        .ok_or(FlowError::UnknownSurvey(survey_id))?;
    match step.kind {
        StepKind::PreTask => instrument.questions.extend(config.typology.intentions_question()),
        StepKind::PostTask => {
            let selected = config.typology.categories_for_labels(&session.selected_intentions);
            instrument.questions.extend(config.typology.fulfillment_questions(&selected));
        }
        _ => {}
    }
    Ok(instrument)
}

/// Type-checks every answer and requires every required question.
pub fn check_answers(instrument: &SurveyInstrument, answers: &BTreeMap<QuestionId, AnswerValue>) -> Result<(), FlowError> {
    for (id, value) in answers {
        let question = instrument.question(id).ok_or_else(|| FlowError::InvalidAnswer {
            question_id: id.clone(),
            reason: "no such question".into(),
        })?;
        if let Err(reason) = question.answer_type.check(value) {
            if question.required {
                return Err(FlowError::gate(GateReason::MissingRequired, format!("{id}: {reason}")));
            }
            return Err(FlowError::InvalidAnswer { question_id: id.clone(), reason });
        }
    }
    let missing: Vec<&str> = instrument
        .questions
        .iter()
        .filter(|q| q.required && !answers.contains_key(&q.question_id))
        .map(|q| q.question_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(FlowError::gate(GateReason::MissingRequired, format!("unanswered: {}", missing.join(", "))));
    }
    Ok(())
}

/// Attention-check questions whose answer is absent or differs from the
/// expected one.
pub fn attention_failures(instrument: &SurveyInstrument, answers: &BTreeMap<QuestionId, AnswerValue>) -> Vec<QuestionId> {
    instrument
        .questions
        .iter()
        .filter_map(|q| {
            let expected = &q.attention_check.as_ref()?.expected_answer;
            let passed = answers.get(&q.question_id).is_some_and(|a| a.matches_expected(expected));
            (!passed).then(|| q.question_id.clone())
        })
        .collect()
}

/// Minimum-interactions gate for the main task at the cursor: prompts for
/// chat tasks, queries for search tasks.
pub fn check_interactions(session: &ParticipantSession, config: &StudyConfig) -> Result<(), FlowError> {
    let Some(task_id) = session.current_task() else {
        return Ok(());
    };
    let task = config.task(task_id).ok_or_else(|| FlowError::UnknownTask(task_id.clone()))?;
    let counts = session.counts_for(task_id);
    let (done, noun) = match task.modality {
        Modality::Chat => (counts.prompts, "prompts"),
        Modality::Search => (counts.queries, "queries"),
    };
    let needed = config.settings.min_interactions;
    if done < needed {
        return Err(FlowError::gate(GateReason::BelowMinInteractions, format!("{done} of {needed} {noun}")));
    }
    Ok(())
}
