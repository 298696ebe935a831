//! Replays a behavior script as one participant and records a transcript.

use std::collections::BTreeSet;
use std::time::Duration;

use echo_core::ids::{InstanceId, ParticipantId, SessionId, StudyId, TurnId};
use echo_core::model::StepKind;
use echo_server::api::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::client::{Client, ServiceError};
use crate::export::{compare_export, ExportDiff};
use crate::script::{Action, BehaviorScript, RateTarget};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub invite_code: Option<String>,
    pub external_label: Option<String>,
    /// Needed for `wait` on the virtual clock and for the export check.
    pub admin_token: Option<String>,
    /// Move the service's virtual clock on `wait` instead of sleeping.
    pub virtual_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Outcome {
    Ok { response: Value },
    Error { error: ServiceError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub action: Action,
    pub outcome: Outcome,
    /// Popups that fired while this action ran.
    pub popups: Vec<PopupDescriptor>,
    /// Why this entry did not go as the script expected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptCounts {
    pub turns: usize,
    pub queries: usize,
    pub clicks: usize,
    pub popups_fired: usize,
    pub popups_answered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub study_id: StudyId,
    pub participant_id: ParticipantId,
    pub session_id: SessionId,
    pub entries: Vec<TranscriptEntry>,
    pub counts: TranscriptCounts,
    pub completed: bool,
    /// Row counts in the export against the transcript, when an admin
    /// token was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export: Option<ExportDiff>,
}

impl SessionTranscript {
    /// Unexpected errors, unmet expectations and export disagreements.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> =
            self.entries.iter().filter_map(|e| e.problem.as_ref().map(|p| format!("action {}: {p}", e.index))).collect();
        if let Some(diff) = &self.export {
            out.extend(diff.mismatches.iter().map(|m| format!("export: {m}")));
        }
        out
    }

    pub fn is_clean(&self) -> bool {
        self.problems().is_empty()
    }

    /// Error entries whose service error matches `code_or_reason`.
    pub fn errors_matching(&self, code_or_reason: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(&e.outcome, Outcome::Error { error } if error.matches(code_or_reason)))
            .count()
    }
}

fn wall_ms() -> i64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_millis() as i64)
}

struct Runner<'a> {
    client: &'a Client,
    options: &'a RunOptions,
    token: String,
    last_turn: Option<TurnId>,
    queries: Vec<SearchResponse>,
    seen: BTreeSet<InstanceId>,
    counts: TranscriptCounts,
}

type Step = Result<(Value, Vec<PopupDescriptor>), ServiceError>;

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("wire types serialize")
}

impl Runner<'_> {
    async fn state(&self) -> Result<ParticipantState, ServiceError> {
        self.client.get("/api/session/state", &self.token).await
    }

    async fn advance(&mut self) -> Step {
        let state = self.state().await?;
        let Some(step) = state.step else {
            return Err(ServiceError {
                status: 409,
                code: "wrong_step".into(),
                reason: None,
                message: "the session is complete".into(),
                body: Value::Null,
            });
        };
        let resp: AdvanceResponse = match step.kind {
            StepKind::Consent => {
                let checked = vec![true; step.consent_checkboxes.len()];
                self.client.post("/api/session/consent", Some(&self.token), &ConsentRequest { checked }).await?
            }
            StepKind::MainTask => return self.submit(None).await,
            _ => {
                let req = SurveyRequest { step_id: Some(step.step_id), answers: Default::default() };
                self.client.post("/api/session/survey", Some(&self.token), &req).await?
            }
        };
        Ok((to_value(&resp), Vec::new()))
    }

    async fn submit(&mut self, final_note: Option<String>) -> Step {
        let req = SubmitTaskRequest { final_note };
        let resp: AdvanceResponse = self.client.post("/api/session/submit-task", Some(&self.token), &req).await?;
        Ok((to_value(&resp), Vec::new()))
    }

    async fn run(&mut self, action: &Action) -> Step {
        let now = wall_ms();
        match action {
            Action::Advance {} => self.advance().await,
            Action::AnswerSurvey { answers } => {
                let req = SurveyRequest { step_id: None, answers: answers.clone() };
                let resp: AdvanceResponse = self.client.post("/api/session/survey", Some(&self.token), &req).await?;
                Ok((to_value(&resp), Vec::new()))
            }
            Action::Chat { prompt, typing_ms } => {
                let req = ChatRequest {
                    prompt: prompt.clone(),
                    typing_start_ms: now - typing_ms,
                    typing_end_ms: now,
                    client_ts: None,
                };
                let frames = self.client.chat(&self.token, &req).await?;
                self.counts.turns += 1;
                let mut popups = Vec::new();
                for f in &frames {
                    match f {
                        ChatFrame::Start { turn_id } => self.last_turn = Some(turn_id.clone()),
                        ChatFrame::Final { popups: p, .. } | ChatFrame::Error { popups: p, .. } => popups = p.clone(),
                        ChatFrame::Chunk { .. } => {}
                    }
                }
                Ok((to_value(&frames), popups))
            }
            Action::Search { query, typing_ms } => {
                let req = SearchRequest {
                    query: query.clone(),
                    typing_start_ms: now - typing_ms,
                    typing_end_ms: now,
                    client_ts: None,
                };
                let resp: SearchResponse = self.client.post("/api/session/search", Some(&self.token), &req).await?;
                self.counts.queries += 1;
                let popups = resp.popups.clone();
                let value = to_value(&resp);
                self.queries.push(resp);
                Ok((value, popups))
            }
            Action::Click { rank, query, url } => {
                let page = match query {
                    Some(i) => self.queries.get(*i),
                    None => self.queries.last(),
                };
                let Some(page) = page else {
                    return Err(script_misuse("click before any search"));
                };
                let url = url.clone().or_else(|| page.results.iter().find(|r| r.rank == *rank).map(|r| r.url.clone()));
                let req = ClickRequest {
                    query_id: page.query_id.clone(),
                    rank: *rank,
                    url: url.unwrap_or_else(|| "about:blank".into()),
                    client_ts: None,
                };
                let ack: Ack = self.client.post("/api/session/click", Some(&self.token), &req).await?;
                self.counts.clicks += 1;
                Ok((to_value(&ack), Vec::new()))
            }
            Action::Rate { target: RateTarget::Turn, value } => {
                let Some(turn) = self.last_turn.clone() else {
                    return Err(script_misuse("turn rating before any chat"));
                };
                let path = format!("/api/session/turns/{turn}/rating");
                let ack: Ack = self.client.post(&path, Some(&self.token), &RatingRequest { rating: *value }).await?;
                Ok((to_value(&ack), Vec::new()))
            }
            Action::Rate { target: RateTarget::Trajectory, value } => {
                let req = TrajectoryRequest { task_id: None, rating: *value };
                let ack: Ack = self.client.post("/api/session/trajectory-rating", Some(&self.token), &req).await?;
                Ok((to_value(&ack), Vec::new()))
            }
            Action::Note { text } => {
                let req = NoteRequest { task_id: None, text: text.clone() };
                let ack: Ack = self.client.post("/api/session/note", Some(&self.token), &req).await?;
                Ok((to_value(&ack), Vec::new()))
            }
            Action::Wait { seconds } => {
                let ms = (seconds * 1000.0).round() as i64;
                if self.options.virtual_clock {
                    let admin = self.options.admin_token.as_deref().ok_or_else(|| script_misuse("virtual wait needs an admin token"))?;
                    let req = ClockRequest { advance_ms: Some(ms), set_ms: None };
                    let resp: ClockResponse = self.client.post("/api/admin/clock", Some(admin), &req).await?;
                    Ok((to_value(&resp), Vec::new()))
                } else {
                    tokio::time::sleep(Duration::from_millis(ms as u64)).await;
                    Ok((json!({ "slept_ms": ms }), Vec::new()))
                }
            }
            Action::SubmitTask { final_note } => self.submit(final_note.clone()).await,
            Action::AnswerPopup { answers } => {
                let state = self.state().await?;
                let Some(popup) = state.pending_popups.first() else {
                    return Err(script_misuse("no popup is pending"));
                };
                let path = format!("/api/session/popups/{}", popup.instance_id);
                let resp: PopupAnswerResponse =
                    self.client.post(&path, Some(&self.token), &PopupAnswerRequest { answers: answers.clone() }).await?;
                self.counts.popups_answered += 1;
                Ok((to_value(&resp), Vec::new()))
            }
        }
    }

    /// Popups pending now that this runner has not seen before. Popups
    /// reported in a response count as seen.
    async fn newly_pending(&mut self, reported: Vec<PopupDescriptor>) -> Result<Vec<PopupDescriptor>, ServiceError> {
        let mut fresh = Vec::new();
        let pending = self.state().await?.pending_popups;
        for p in reported.into_iter().chain(pending) {
            if self.seen.insert(p.instance_id.clone()) {
                fresh.push(p);
            }
        }
        Ok(fresh)
    }
}

fn script_misuse(message: &str) -> ServiceError {
    ServiceError { status: 0, code: "script".into(), reason: None, message: message.into(), body: Value::Null }
}

/// Registers a participant in `study_id` and performs every scripted
/// action in order. Service errors are recorded in the transcript, not
/// returned; only registration failure and losing the service abort.
pub async fn run_script(
    client: &Client,
    study_id: &StudyId,
    script: &BehaviorScript,
    options: &RunOptions,
) -> Result<SessionTranscript, ServiceError> {
    let reg = RegisterRequest {
        study_id: study_id.clone(),
        invite_code: options.invite_code.clone(),
        external_label: options.external_label.clone(),
    };
    let registered: RegisterResponse = client.post("/api/participant/register", None, &reg).await?;
    let mut runner = Runner {
        client,
        options,
        token: registered.token.clone(),
        last_turn: None,
        queries: Vec::new(),
        seen: BTreeSet::new(),
        counts: TranscriptCounts::default(),
    };
    let mut entries = Vec::new();
    for (index, step) in script.steps.iter().enumerate() {
        let result = runner.run(&step.action).await;
        if matches!(&result, Err(e) if e.status == 0 && e.code == "transport") {
            return Err(result.unwrap_err());
        }
        let (outcome, reported) = match result {
            Ok((response, popups)) => (Outcome::Ok { response }, popups),
            Err(error) => {
                let mut popups = Vec::new();
                if let Some(list) = error.body.get("popups") {
                    popups = serde_json::from_value(list.clone()).unwrap_or_default();
                }
                (Outcome::Error { error }, popups)
            }
        };
        let popups = runner.newly_pending(reported).await?;
        runner.counts.popups_fired += popups.len();
        let problem = judge(&outcome, &popups, step.expect_error.as_deref(), step.expect_popups);
        entries.push(TranscriptEntry { index, action: step.action.clone(), outcome, popups, problem });
    }
    let state = runner.state().await?;
    let mut transcript = SessionTranscript {
        study_id: study_id.clone(),
        participant_id: registered.participant_id,
        session_id: registered.session_id,
        entries,
        counts: runner.counts,
        completed: state.completed,
        export: None,
    };
    if let Some(admin) = &options.admin_token {
        transcript.export = Some(compare_export(client, admin, &transcript).await?);
    }
    Ok(transcript)
}

fn judge(outcome: &Outcome, popups: &[PopupDescriptor], expect_error: Option<&str>, expect_popups: Option<usize>) -> Option<String> {
    let mut problems = Vec::new();
    match (outcome, expect_error) {
        (Outcome::Error { error }, None) => problems.push(format!("unexpected error {error}")),
        (Outcome::Error { error }, Some(want)) if !error.matches(want) => {
            problems.push(format!("expected {want}, got {error}"))
        }
        (Outcome::Ok { .. }, Some(want)) => problems.push(format!("expected {want}, but the action succeeded")),
        _ => {}
    }
    if let Some(n) = expect_popups {
        if popups.len() != n {
            problems.push(format!("expected {n} popup(s), {} fired", popups.len()));
        }
    }
    (!problems.is_empty()).then(|| problems.join("; "))
}

/// Runs `scripts` as concurrent participants of one study.
pub async fn run_many(
    client: &Client,
    study_id: &StudyId,
    scripts: Vec<BehaviorScript>,
    options: &RunOptions,
) -> Vec<Result<SessionTranscript, ServiceError>> {
    let runs = scripts.iter().map(|s| run_script(client, study_id, s, options));
    futures::future::join_all(runs).await
}
