//! Study configuration types shared by the flow engine, trigger engine,
//! service layer and export.

mod survey_json;
mod template;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ids::{QuestionId, StepId, StudyId, SurveyId, TaskId};
use crate::trigger::TriggerRule;

pub use survey_json::{export_survey_json, import_survey_json, reorder_questions, SurveyError};
pub use template::default_study;
pub use validate::{validate_instrument, validate_study_config, Issue, Severity, ValidationReport};

/// Question ids with this prefix are generated from the intention typology.
pub const TYPOLOGY_PREFIX: &str = "typology.";
/// Question id of the generated multi-select intention item on pre-task surveys.
pub const INTENTIONS_QUESTION: &str = "typology.intentions";

/// The full researcher-authored experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study_id: StudyId,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub settings: StudySettings,
    #[serde(default)]
    pub flow: Vec<FlowStep>,
    #[serde(default)]
    pub tasks: Vec<TaskDef>,
    /// Keyed by survey id.
    #[serde(default)]
    pub surveys: BTreeMap<SurveyId, SurveyInstrument>,
    #[serde(default)]
    pub typology: IntentionTypology,
    #[serde(default)]
    pub trigger_rules: Vec<TriggerRule>,
    #[serde(default)]
    pub provider_config_ref: String,
    #[serde(default)]
    pub consent_text: String,
    #[serde(default)]
    pub consent_checkboxes: Vec<String>,
}

impl StudyConfig {
    pub fn task(&self, task_id: &TaskId) -> Option<&TaskDef> {
        self.tasks.iter().find(|t| &t.task_id == task_id)
    }

    pub fn survey(&self, survey_id: &SurveyId) -> Option<&SurveyInstrument> {
        self.surveys.get(survey_id)
    }

    pub fn step(&self, step_id: &StepId) -> Option<&FlowStep> {
        self.flow.iter().find(|s| &s.step_id == step_id)
    }

    /// Moves the steps into the order given by `step_ids`, which must name
    /// every step exactly once.
    pub fn reorder_flow(&mut self, step_ids: &[StepId]) -> Result<(), SurveyError> {
        if step_ids.len() != self.flow.len() {
            return Err(SurveyError::BadPermutation);
        }
        let mut positions = Vec::with_capacity(step_ids.len());
        for id in step_ids {
            let pos = self
                .flow
                .iter()
                .position(|s| &s.step_id == id)
                .ok_or(SurveyError::BadPermutation)?;
            if positions.contains(&pos) {
                return Err(SurveyError::BadPermutation);
            }
            positions.push(pos);
        }
        for (order, pos) in positions.into_iter().enumerate() {
            self.flow[pos].order = order;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionFailPolicy {
    #[default]
    RecordOnly,
    BlockAdvance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    #[serde(default)]
    pub task_order: Vec<TaskId>,
    #[serde(default)]
    pub notes_enabled: bool,
    #[serde(default)]
    pub min_interactions: u32,
    #[serde(default)]
    pub attention_fail_policy: AttentionFailPolicy,
    /// Code participants present to register. `None` leaves registration open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invite_code: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Consent,
    BackgroundSurvey,
    PreTask,
    MainTask,
    PostTask,
    ExperienceSurvey,
    EndSurvey,
    CustomSurvey,
}

impl StepKind {
    pub fn binds_survey(self) -> bool {
        !matches!(self, StepKind::Consent | StepKind::MainTask)
    }

    /// Kinds that may appear at most once in a flow.
    pub fn is_singular(self) -> bool {
        !matches!(self, StepKind::MainTask | StepKind::CustomSurvey)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Consent => "consent",
            StepKind::BackgroundSurvey => "background_survey",
            StepKind::PreTask => "pre_task",
            StepKind::MainTask => "main_task",
            StepKind::PostTask => "post_task",
            StepKind::ExperienceSurvey => "experience_survey",
            StepKind::EndSurvey => "end_survey",
            StepKind::CustomSurvey => "custom_survey",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowStep {
    pub step_id: StepId,
    pub kind: StepKind,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
    pub order: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reminder_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey_id: Option<SurveyId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<TaskId>,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyInstrument {
    pub survey_id: SurveyId,
    #[serde(default)]
    pub title: String,
    pub questions: Vec<Question>,
}

impl SurveyInstrument {
    pub fn question(&self, id: &QuestionId) -> Option<&Question> {
        self.questions.iter().find(|q| &q.question_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub question_id: QuestionId,
    pub prompt: String,
    pub answer_type: AnswerType,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_check: Option<AttentionCheck>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnswerType {
    Likert {
        points: u8,
        #[serde(default)]
        low_anchor: String,
        #[serde(default)]
        high_anchor: String,
    },
    MultipleChoice {
        options: Vec<String>,
        #[serde(default)]
        allow_multiple: bool,
    },
    OpenEnded {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_length: Option<u32>,
    },
}

impl AnswerType {
    /// Checks that `value` is a well-formed answer for this question type.
    pub fn check(&self, value: &AnswerValue) -> Result<(), String> {
        match (self, value) {
            (AnswerType::Likert { points, .. }, AnswerValue::Number(n)) => {
                if (1..=i64::from(*points)).contains(n) {
                    Ok(())
                } else {
                    Err(format!("likert answer {n} outside 1..={points}"))
                }
            }
            (AnswerType::MultipleChoice { options, allow_multiple: false }, AnswerValue::Text(t)) => {
                if options.iter().any(|o| o == t) {
                    Ok(())
                } else {
                    Err(format!("{t:?} is not an option"))
                }
            }
            (AnswerType::MultipleChoice { options, allow_multiple: true }, AnswerValue::Choices(cs)) => {
                if cs.is_empty() {
                    return Err("no option selected".into());
                }
                for (i, c) in cs.iter().enumerate() {
                    if !options.contains(c) {
                        return Err(format!("{c:?} is not an option"));
                    }
                    if cs[..i].contains(c) {
                        return Err(format!("{c:?} selected twice"));
                    }
                }
                Ok(())
            }
            (AnswerType::OpenEnded { max_length }, AnswerValue::Text(t)) => match max_length {
                Some(max) if t.chars().count() > *max as usize => {
                    Err(format!("answer longer than {max} characters"))
                }
                _ => Ok(()),
            },
            (ty, v) => Err(format!("{} answer given for {} question", v.type_name(), ty.kind_name())),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AnswerType::Likert { .. } => "likert",
            AnswerType::MultipleChoice { allow_multiple: false, .. } => "single-choice",
            AnswerType::MultipleChoice { allow_multiple: true, .. } => "multi-choice",
            AnswerType::OpenEnded { .. } => "open_ended",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionCheck {
    pub expected_answer: AnswerValue,
}

/// A participant's answer to one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnswerValue {
    Number(i64),
    Text(String),
    Choices(Vec<String>),
}

impl AnswerValue {
    fn type_name(&self) -> &'static str {
        match self {
            AnswerValue::Number(_) => "numeric",
            AnswerValue::Text(_) => "text",
            AnswerValue::Choices(_) => "multi-select",
        }
    }

    /// Attention-check comparison: exact match after trimming whitespace.
    /// Multi-select answers compare as sets.
    pub fn matches_expected(&self, expected: &AnswerValue) -> bool {
        match (self, expected) {
            (AnswerValue::Number(a), AnswerValue::Number(b)) => a == b,
            (AnswerValue::Text(a), AnswerValue::Text(b)) => a.trim() == b.trim(),
            (AnswerValue::Choices(a), AnswerValue::Choices(b)) => {
                let norm = |v: &[String]| v.iter().map(|s| s.trim().to_string()).collect::<BTreeSet<String>>();
                norm(a) == norm(b)
            }
            _ => false,
        }
    }

    /// Flat text form used in CSV exports.
    pub fn to_export_string(&self) -> String {
        match self {
            AnswerValue::Number(n) => n.to_string(),
            AnswerValue::Text(t) => t.clone(),
            AnswerValue::Choices(cs) => serde_json::to_string(cs).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Chat,
    Search,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub task_id: TaskId,
    pub modality: Modality,
    #[serde(default)]
    pub title: String,
    pub description_markdown: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentionTypology {
    #[serde(default)]
    pub categories: Vec<IntentionCategory>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentionCategory {
    pub category_id: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
}

impl IntentionTypology {
    /// Multi-select item appended to pre-task surveys.
    pub fn intentions_question(&self) -> Option<Question> {
        if self.categories.is_empty() {
            return None;
        }
        Some(Question {
            question_id: QuestionId::new(INTENTIONS_QUESTION),
            prompt: "Which of these intentions describe what you want to achieve in this task?".into(),
            answer_type: AnswerType::MultipleChoice {
                options: self.categories.iter().map(|c| c.label.clone()).collect(),
                allow_multiple: true,
            },
            required: true,
            attention_check: None,
        })
    }

    /// One Likert fulfillment item per selected category, appended to
    /// post-task surveys.
    pub fn fulfillment_questions(&self, selected: &[String]) -> Vec<Question> {
        self.categories
            .iter()
            .filter(|c| selected.contains(&c.category_id))
            .map(|c| Question {
                question_id: QuestionId::new(format!("{TYPOLOGY_PREFIX}fulfillment.{}", c.category_id)),
                prompt: format!("How well was this intention fulfilled: {}?", c.label),
                answer_type: AnswerType::Likert {
                    points: 5,
                    low_anchor: "Not at all".into(),
                    high_anchor: "Completely".into(),
                },
                required: true,
                attention_check: None,
            })
            .collect()
    }

    /// Maps selected option labels back to category ids.
    pub fn categories_for_labels(&self, labels: &[String]) -> Vec<String> {
        labels
            .iter()
            .filter_map(|l| self.categories.iter().find(|c| &c.label == l))
            .map(|c| c.category_id.clone())
            .collect()
    }
}
