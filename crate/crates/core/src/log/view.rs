//! Materialized views over a session's event stream. Every view here is a
//! pure fold of the timeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EventPayload, InteractionEvent, LogError, ResponseOutcome, RATING_MAX};
use crate::flow::{CompletionPayload, SessionStep};
use crate::ids::{
    InstanceId, Millis, ParticipantId, QueryId, QuestionId, ResponseId, SessionId, StepId, StudyId, SurveyId,
    TaskId, TurnId,
};
use crate::model::{AnswerValue, StepKind};
use crate::provider::SearchResult;
use crate::trigger::FiredTrigger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnStatus {
    Streaming,
    Completed,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub turn_id: TurnId,
    pub task_id: TaskId,
    /// 1-based within the task.
    pub turn_index: u32,
    pub prompt_text: String,
    pub typing_start_ms: Millis,
    pub typing_end_ms: Millis,
    pub submitted_ms: Millis,
    pub response_text: String,
    pub response_completed_ms: Option<Millis>,
    pub status: TurnStatus,
    pub turn_rating: Option<u8>,
    pub chunks: u32,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Click {
    pub url: String,
    pub rank: u32,
    pub clicked_ms: Millis,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQueryRecord {
    pub query_id: QueryId,
    pub task_id: TaskId,
    pub query_text: String,
    pub typing_start_ms: Millis,
    pub typing_end_ms: Millis,
    pub issued_ms: Millis,
    pub result_count: u32,
    pub serp: Vec<SearchResult>,
    pub clicks: Vec<Click>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub session_id: SessionId,
    pub task_id: TaskId,
    pub text: String,
    pub updated_ms: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveySubmission {
    pub step_id: StepId,
    pub step_kind: StepKind,
    pub survey_id: Option<SurveyId>,
    pub answers: BTreeMap<QuestionId, AnswerValue>,
    pub attention_failed: Vec<QuestionId>,
    pub submitted_ms: Millis,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupRecord {
    pub fired: FiredTrigger,
    pub answer: Option<PopupAnswer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopupAnswer {
    pub response_id: ResponseId,
    pub answers: BTreeMap<QuestionId, AnswerValue>,
    pub answered_ms: Millis,
    pub seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: SessionId,
    pub study_id: StudyId,
    pub participant_id: ParticipantId,
    pub external_label: Option<String>,
    pub started_ms: Millis,
    pub steps: Vec<SessionStep>,
    pub entered_tasks: BTreeSet<TaskId>,
    pub consented_ms: Option<Millis>,
    pub completed_ms: Option<Millis>,
    pub turns: Vec<ChatTurn>,
    pub queries: Vec<SearchQueryRecord>,
    pub notes: BTreeMap<TaskId, NoteRecord>,
    pub trajectory_ratings: BTreeMap<TaskId, u8>,
    pub surveys: Vec<SurveySubmission>,
    pub popups: Vec<PopupRecord>,
    pub rejected_clicks: u32,
    /// Non-fatal anomalies such as client typing timestamps out of order.
    pub warnings: Vec<String>,
}

impl SessionView {
    pub fn fold<'a>(events: impl IntoIterator<Item = &'a InteractionEvent>) -> Self {
        let mut view = SessionView::default();
        for e in events {
            view.apply(e);
        }
        view
    }

    pub fn turn(&self, id: &TurnId) -> Option<&ChatTurn> {
        self.turns.iter().find(|t| &t.turn_id == id)
    }

    pub fn query(&self, id: &QueryId) -> Option<&SearchQueryRecord> {
        self.queries.iter().find(|q| &q.query_id == id)
    }

    pub fn turns_for<'a>(&'a self, task_id: &'a TaskId) -> impl Iterator<Item = &'a ChatTurn> + 'a {
        self.turns.iter().filter(move |t| &t.task_id == task_id)
    }

    fn turn_mut(&mut self, id: &TurnId) -> Option<&mut ChatTurn> {
        self.turns.iter_mut().find(|t| &t.turn_id == id)
    }

    pub fn popup(&self, id: &InstanceId) -> Option<&PopupRecord> {
        self.popups.iter().find(|p| &p.fired.instance_id == id)
    }

    /// Checks that `payload` may be appended after the events folded so far.
    pub fn validate(&self, payload: &EventPayload) -> Result<(), LogError> {
        use EventPayload as P;
        let invalid = |why: String| Err(LogError::PayloadInvalid(why));
        match payload {
            P::SessionStarted { .. } => invalid("session already started".into()),
            P::PromptSubmitted { turn_id, .. } => {
                if self.turn(turn_id).is_some() {
                    return invalid(format!("turn {turn_id} already exists"));
                }
                Ok(())
            }
            P::ResponseChunk { turn_id, chunk_index, .. } => match self.turn(turn_id) {
                Some(t) if t.status == TurnStatus::Streaming && t.chunks == *chunk_index => Ok(()),
                _ => Err(LogError::OutOfOrderTurn(turn_id.clone())),
            },
            P::ResponseEnded { turn_id, .. } => match self.turn(turn_id) {
                Some(t) if t.status == TurnStatus::Streaming => Ok(()),
                _ => Err(LogError::OutOfOrderTurn(turn_id.clone())),
            },
            P::TurnRated { turn_id, rating } => {
                let turn = self.turn(turn_id).ok_or_else(|| LogError::UnknownTurn(turn_id.clone()))?;
                if turn.status != TurnStatus::Completed {
                    return Err(LogError::ResponseNotComplete(turn_id.clone()));
                }
                check_rating(*rating)
            }
            P::TrajectoryRated { task_id, rating } => {
                if !self.entered_tasks.contains(task_id) {
                    return Err(LogError::UnknownTask(task_id.clone()));
                }
                check_rating(*rating)
            }
            P::QueryIssued { query_id, result_count, serp, .. } => {
                if self.query(query_id).is_some() {
                    return invalid(format!("query {query_id} already exists"));
                }
                if *result_count as usize != serp.len() {
                    return invalid("result_count disagrees with the snapshot".into());
                }
                if serp.iter().enumerate().any(|(i, r)| r.rank as usize != i + 1) {
                    return invalid("snapshot ranks must be 1..n in order".into());
                }
                Ok(())
            }
            P::ResultClicked { query_id, rank, url } => {
                let query = self
                    .query(query_id)
                    .ok_or_else(|| LogError::PayloadInvalid(format!("unknown query {query_id}")))?;
                if query.serp.iter().any(|r| r.rank == *rank && &r.url == url) {
                    Ok(())
                } else {
                    invalid(format!("rank {rank} / {url} is not in the snapshot of {query_id}"))
                }
            }
            P::PopupAnswered { instance_id, .. } => match self.popup(instance_id) {
                None => invalid(format!("unknown popup {instance_id}")),
                Some(p) if p.answer.is_some() => invalid(format!("popup {instance_id} already answered")),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }
    }

    pub fn apply(&mut self, event: &InteractionEvent) {
        use EventPayload as P;
        let at = event.server_ts;
        match &event.payload {
            P::SessionStarted { study_id, participant_id, external_label, steps, .. } => {
                self.session_id = event.session_id.clone();
                self.study_id = study_id.clone();
                self.participant_id = participant_id.clone();
                self.external_label = external_label.clone();
                self.started_ms = at;
                self.steps = steps.clone();
            }
            P::StepEntered { task_id, .. } => {
                if let Some(t) = task_id {
                    self.entered_tasks.insert(t.clone());
                }
            }
            P::StepCompleted { step_id, completion, attention_failed } => match &completion.payload {
                CompletionPayload::ConsentAck { .. } => self.consented_ms = Some(at),
                CompletionPayload::SurveyAnswers { answers } => {
                    let survey_id = self.steps.iter().find(|s| &s.step_id == step_id).and_then(|s| s.survey_id.clone());
                    self.surveys.push(SurveySubmission {
                        step_id: step_id.clone(),
                        step_kind: completion.step_kind,
                        survey_id,
                        answers: answers.clone(),
                        attention_failed: attention_failed.clone(),
                        submitted_ms: at,
                        seq: event.seq,
                    });
                }
                CompletionPayload::TaskSubmit { .. } => {}
            },
            P::SessionCompleted => self.completed_ms = Some(at),
            P::PromptSubmitted { turn_id, task_id, text, typing_start_ms, typing_end_ms } => {
                let submitted = event.client_ts;
                if !(typing_start_ms <= typing_end_ms && *typing_end_ms <= submitted) {
                    self.warnings.push(format!(
                        "turn {turn_id}: typing timestamps out of order ({typing_start_ms}, {typing_end_ms}, {submitted})"
                    ));
                }
                let turn_index = self.turns_for(task_id).count() as u32 + 1;
                self.turns.push(ChatTurn {
                    turn_id: turn_id.clone(),
                    task_id: task_id.clone(),
                    turn_index,
                    prompt_text: text.clone(),
                    typing_start_ms: *typing_start_ms,
                    typing_end_ms: *typing_end_ms,
                    submitted_ms: submitted,
                    response_text: String::new(),
                    response_completed_ms: None,
                    status: TurnStatus::Streaming,
                    turn_rating: None,
                    chunks: 0,
                    seq: event.seq,
                });
            }
            P::ResponseChunk { turn_id, text, .. } => {
                if let Some(t) = self.turn_mut(turn_id) {
                    t.response_text.push_str(text);
                    t.chunks += 1;
                }
            }
            P::ResponseEnded { turn_id, outcome, .. } => {
                if let Some(t) = self.turn_mut(turn_id) {
                    t.status = match outcome {
                        ResponseOutcome::Completed => {
                            t.response_completed_ms = Some(at);
                            TurnStatus::Completed
                        }
                        ResponseOutcome::Failed { .. } => TurnStatus::Failed,
                        ResponseOutcome::Cancelled => TurnStatus::Cancelled,
                    };
                }
            }
            P::TurnRated { turn_id, rating } => {
                if let Some(t) = self.turn_mut(turn_id) {
                    t.turn_rating = Some(*rating);
                }
            }
            P::TrajectoryRated { task_id, rating } => {
                self.trajectory_ratings.insert(task_id.clone(), *rating);
            }
            P::QueryIssued { query_id, task_id, text, typing_start_ms, typing_end_ms, result_count, serp } => {
                let issued = event.client_ts;
                if !(typing_start_ms <= typing_end_ms && *typing_end_ms <= issued) {
                    self.warnings.push(format!(
                        "query {query_id}: typing timestamps out of order ({typing_start_ms}, {typing_end_ms}, {issued})"
                    ));
                }
                self.queries.push(SearchQueryRecord {
                    query_id: query_id.clone(),
                    task_id: task_id.clone(),
                    query_text: text.clone(),
                    typing_start_ms: *typing_start_ms,
                    typing_end_ms: *typing_end_ms,
                    issued_ms: issued,
                    result_count: *result_count,
                    serp: serp.clone(),
                    clicks: Vec::new(),
                    seq: event.seq,
                });
            }
            P::ResultClicked { query_id, rank, url } => {
                if let Some(q) = self.queries.iter_mut().find(|q| &q.query_id == query_id) {
                    q.clicks.push(Click { url: url.clone(), rank: *rank, clicked_ms: event.client_ts, seq: event.seq });
                }
            }
            P::ClickRejected { .. } => self.rejected_clicks += 1,
            P::NoteSaved { task_id, text } => {
                self.notes.insert(
                    task_id.clone(),
                    NoteRecord {
                        session_id: event.session_id.clone(),
                        task_id: task_id.clone(),
                        text: text.clone(),
                        updated_ms: event.client_ts,
                    },
                );
            }
            P::PopupFired { instance } => {
                self.popups.push(PopupRecord { fired: instance.clone(), answer: None });
            }
            P::PopupAnswered { instance_id, response_id, answers, .. } => {
                if let Some(p) = self.popups.iter_mut().find(|p| &p.fired.instance_id == instance_id) {
                    p.answer = Some(PopupAnswer {
                        response_id: response_id.clone(),
                        answers: answers.clone(),
                        answered_ms: at,
                        seq: event.seq,
                    });
                }
            }
            P::AttentionCheckFailed { .. } | P::ClockTick | P::SubmissionAttempted { .. } => {}
        }
    }
}

fn check_rating(rating: u8) -> Result<(), LogError> {
    if (1..=RATING_MAX).contains(&rating) {
        Ok(())
    } else {
        Err(LogError::PayloadInvalid(format!("rating {rating} outside 1..={RATING_MAX}")))
    }
}
