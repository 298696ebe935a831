//! Request and response bodies of the HTTP interface.

use std::collections::BTreeMap;

use echo_core::flow::InteractionCounts;
use echo_core::ids::{
    InstanceId, Millis, ParticipantId, QueryId, QuestionId, RuleId, SessionId, StepId, StudyId, SurveyId, TaskId,
    TurnId,
};
use echo_core::model::{AnswerValue, IntentionTypology, Modality, StepKind, StudyConfig, StudySettings, SurveyInstrument, TaskDef};
use echo_core::provider::SearchResult;
use echo_core::trigger::{FiredTrigger, TriggerRule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetupStatus {
    pub setup_required: bool,
}

/// Either a full configuration or a template to instantiate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateStudy {
    #[serde(default)]
    pub config: Option<StudyConfig>,
    #[serde(default)]
    pub study_id: Option<StudyId>,
    #[serde(default)]
    pub template: Option<Modality>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyDoc {
    pub version: u64,
    pub config: StudyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PutStudy {
    /// Version the edit is based on; omitted means "whatever is stored".
    #[serde(default)]
    pub version: Option<u64>,
    pub config: StudyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: StudyId,
    pub title: String,
    pub sessions: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReorderFlow {
    pub step_ids: Vec<StepId>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PatchStep {
    #[serde(default)]
    pub enabled: Option<bool>,
    /// `Some("")` clears the reminder.
    #[serde(default)]
    pub reminder_text: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReorderQuestions {
    pub permutation: Vec<usize>,
}

pub type SettingsBody = StudySettings;
pub type TypologyBody = IntentionTypology;
pub type TriggerRules = Vec<TriggerRule>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetCredential {
    pub api_key: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub participant_id: ParticipantId,
    pub external_label: Option<String>,
    pub started_ms: Millis,
    pub completed_ms: Option<Millis>,
    pub step_index: usize,
    pub step_count: usize,
    pub turns: usize,
    pub queries: usize,
    pub popups_answered: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClockRequest {
    #[serde(default)]
    pub advance_ms: Option<Millis>,
    #[serde(default)]
    pub set_ms: Option<Millis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClockResponse {
    pub now_ms: Millis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub study_id: StudyId,
    #[serde(default)]
    pub invite_code: Option<String>,
    /// Id from an external recruitment platform, kept as a label.
    #[serde(default)]
    pub external_label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub participant_id: ParticipantId,
    pub session_id: SessionId,
    pub token: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoginRequest {
    pub study_id: StudyId,
    pub participant_id: ParticipantId,
    #[serde(default)]
    pub invite_code: Option<String>,
}

/// A fired in-situ survey as shown to the participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopupDescriptor {
    pub instance_id: InstanceId,
    pub rule_id: RuleId,
    pub survey_id: SurveyId,
    pub task_id: Option<TaskId>,
    pub fired_at: Millis,
    pub survey: Option<SurveyInstrument>,
}

impl PopupDescriptor {
    pub fn new(fired: &FiredTrigger, config: &StudyConfig) -> Self {
        Self {
            instance_id: fired.instance_id.clone(),
            rule_id: fired.rule_id.clone(),
            survey_id: fired.survey_id.clone(),
            task_id: fired.task_id.clone(),
            fired_at: fired.fired_at,
            survey: config.survey(&fired.survey_id).cloned(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepView {
    pub step_id: StepId,
    pub kind: StepKind,
    pub reminder_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consent_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub consent_checkboxes: Vec<String>,
    /// The instrument to fill in, typology items included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey: Option<SurveyInstrument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskDef>,
    pub min_interactions: u32,
    pub counts: InteractionCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticipantState {
    pub session_id: SessionId,
    pub participant_id: ParticipantId,
    pub study_id: StudyId,
    pub study_title: String,
    pub step_index: usize,
    pub step_count: usize,
    pub step: Option<StepView>,
    pub completed: bool,
    pub notes_enabled: bool,
    pub note: Option<String>,
    pub pending_popups: Vec<PopupDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsentRequest {
    pub checked: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveyRequest {
    /// When given, must name the current step.
    #[serde(default)]
    pub step_id: Option<StepId>,
    pub answers: BTreeMap<QuestionId, AnswerValue>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SubmitTaskRequest {
    #[serde(default)]
    pub final_note: Option<String>,
}

/// Result of a successful step completion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub step_index: usize,
    pub completed: bool,
    pub attention_failed: Vec<QuestionId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub typing_start_ms: Millis,
    pub typing_end_ms: Millis,
    /// Client clock at submission; defaults to the server clock.
    #[serde(default)]
    pub client_ts: Option<Millis>,
}

/// One server-sent event of a chat reply. The SSE event name is the tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "frame", rename_all = "snake_case")]
pub enum ChatFrame {
    Start { turn_id: TurnId },
    Chunk { turn_id: TurnId, chunk_index: u32, text: String },
    Final { turn_id: TurnId, response_text: String, popups: Vec<PopupDescriptor> },
    Error { turn_id: TurnId, message: String, partial_text: String, popups: Vec<PopupDescriptor> },
}

impl ChatFrame {
    pub fn name(&self) -> &'static str {
        match self {
            ChatFrame::Start { .. } => "start",
            ChatFrame::Chunk { .. } => "chunk",
            ChatFrame::Final { .. } => "final",
            ChatFrame::Error { .. } => "error",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatingRequest {
    pub rating: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRequest {
    #[serde(default)]
    pub task_id: Option<TaskId>,
    pub rating: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub typing_start_ms: Millis,
    pub typing_end_ms: Millis,
    #[serde(default)]
    pub client_ts: Option<Millis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResponse {
    pub query_id: QueryId,
    pub results: Vec<SearchResult>,
    pub popups: Vec<PopupDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClickRequest {
    pub query_id: QueryId,
    pub rank: u32,
    pub url: String,
    #[serde(default)]
    pub client_ts: Option<Millis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoteRequest {
    #[serde(default)]
    pub task_id: Option<TaskId>,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopupAnswerRequest {
    pub answers: BTreeMap<QuestionId, AnswerValue>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopupAnswerResponse {
    pub response_id: echo_core::ids::ResponseId,
    pub pending_popups: Vec<PopupDescriptor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ack {
    pub seq: u64,
}
