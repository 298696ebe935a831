//! Behavior scripts: one JSON action per line.
//!
//! ```text
//! {"action": "advance"}
//! {"action": "answer_survey", "answers": {"age": "31", "education": "Master"}}
//! {"action": "chat", "prompt": "Plan a day in Lisbon", "typing_ms": 4000}
//! {"action": "submit_task", "expect_error": "below_min_interactions"}
//! {"action": "wait", "seconds": 60, "expect_popups": 1}
//! ```
//!
//! Blank lines and lines starting with `#` are skipped.

use std::collections::BTreeMap;

use echo_core::ids::QuestionId;
use echo_core::model::AnswerValue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    /// Leaves the current step with default input: every consent box
    /// ticked, an empty survey, or a plain task submission.
    Advance {},
    AnswerSurvey { answers: BTreeMap<QuestionId, AnswerValue> },
    Chat {
        prompt: String,
        #[serde(default)]
        typing_ms: i64,
    },
    Search {
        query: String,
        #[serde(default)]
        typing_ms: i64,
    },
    /// Clicks a result of a query issued earlier in the script (the latest
    /// by default). `url` overrides the snapshot url, to test rejection.
    Click {
        rank: u32,
        #[serde(default)]
        query: Option<usize>,
        #[serde(default)]
        url: Option<String>,
    },
    Rate {
        target: RateTarget,
        value: u8,
    },
    Note { text: String },
    Wait { seconds: f64 },
    SubmitTask {
        #[serde(default)]
        final_note: Option<String>,
    },
    /// Answers the oldest pending popup.
    AnswerPopup { answers: BTreeMap<QuestionId, AnswerValue> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateTarget {
    /// The latest chat turn.
    Turn,
    /// The current task as a whole.
    Trajectory,
}

/// One script line: an action and what the script expects of it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScriptStep {
    #[serde(flatten)]
    pub action: Action,
    /// Error code or gate reason the service must answer with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_error: Option<String>,
    /// Number of popups that must fire during this action.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_popups: Option<usize>,
}

// Hand-written so that unknown keys in an action are still refused, which
// `deny_unknown_fields` cannot do through `flatten`.
impl<'de> Deserialize<'de> for ScriptStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut value = serde_json::Value::deserialize(d)?;
        let obj = value.as_object_mut().ok_or_else(|| D::Error::custom("a script step is a JSON object"))?;
        let expect_error = obj.remove("expect_error").map(serde_json::from_value).transpose().map_err(D::Error::custom)?;
        let expect_popups = obj.remove("expect_popups").map(serde_json::from_value).transpose().map_err(D::Error::custom)?;
        let action = Action::deserialize(value).map_err(D::Error::custom)?;
        Ok(Self { action, expect_error, expect_popups })
    }
}

impl From<Action> for ScriptStep {
    fn from(action: Action) -> Self {
        Self { action, expect_error: None, expect_popups: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScript {
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScriptError {
    #[error("line {line}: {message}")]
    Type { line: usize, message: String },
}

impl BehaviorScript {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let step: ScriptStep =
                serde_json::from_str(line).map_err(|e| ScriptError::Type { line: i + 1, message: e.to_string() })?;
            check(&step).map_err(|message| ScriptError::Type { line: i + 1, message })?;
            steps.push(step);
        }
        Ok(Self { steps })
    }

    pub fn to_text(&self) -> String {
        self.steps.iter().map(|s| serde_json::to_string(s).expect("steps serialize") + "\n").collect()
    }
}

fn check(step: &ScriptStep) -> Result<(), String> {
    match &step.action {
        Action::Wait { seconds } if !seconds.is_finite() || *seconds < 0.0 => {
            Err("wait needs a non-negative number of seconds".into())
        }
        Action::Chat { typing_ms, .. } | Action::Search { typing_ms, .. } if *typing_ms < 0 => {
            Err("typing_ms cannot be negative".into())
        }
        Action::Rate { value, .. } if !(1..=5).contains(value) => Err("ratings are 1 to 5".into()),
        Action::Click { rank: 0, .. } => Err("ranks start at 1".into()),
        _ => Ok(()),
    }
}
