use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AnswerType, StepKind, StudyConfig, SurveyInstrument, TYPOLOGY_PREFIX};
use crate::trigger::{Repeat, TriggerCondition, TriggerScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub path: String,
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_path(&self, path: &str) -> bool {
        self.issues.iter().any(|i| i.path == path)
    }

    fn error(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            path: path.into(),
            severity: Severity::Error,
            message: message.into(),
        });
    }
}

/// Checks every structural and referential invariant of a study. Never
/// fails; an empty report means the configuration is usable.
pub fn validate_study_config(config: &StudyConfig) -> ValidationReport {
    let mut report = ValidationReport::default();

    if config.study_id.is_empty() {
        report.error("study_id", "must not be empty");
    } else if !crate::store::is_valid_key_component(config.study_id.as_str()) {
        report.error("study_id", "may only contain letters, digits, '-', '_' and '.', and must not start with '.'");
    }

    validate_tasks(config, &mut report);
    validate_flow(config, &mut report);
    validate_settings(config, &mut report);

    for (key, instrument) in &config.surveys {
        let prefix = format!("surveys.{key}");
        if &instrument.survey_id != key {
            report.error(
                format!("{prefix}.survey_id"),
                format!("survey keyed as {key:?} carries id {:?}", instrument.survey_id.as_str()),
            );
        }
        report.issues.extend(validate_instrument(instrument, &prefix).issues);
    }

    let mut category_ids = HashSet::new();
    for (i, cat) in config.typology.categories.iter().enumerate() {
        let path = format!("typology.categories[{i}]");
        if cat.category_id.is_empty() || !category_ids.insert(cat.category_id.as_str()) {
            report.error(format!("{path}.category_id"), "category ids must be unique and non-empty");
        }
        if cat.label.trim().is_empty() {
            report.error(format!("{path}.label"), "label must not be empty");
        }
    }

    validate_triggers(config, &mut report);
    report
}

fn validate_tasks(config: &StudyConfig, report: &mut ValidationReport) {
    let mut seen = HashSet::new();
    for (i, task) in config.tasks.iter().enumerate() {
        if task.task_id.is_empty() || !seen.insert(&task.task_id) {
            report.error(format!("tasks[{i}].task_id"), "task ids must be unique and non-empty");
        }
        if task.description_markdown.trim().is_empty() {
            report.error(format!("tasks[{i}].description_markdown"), "description must not be empty");
        }
    }
}

fn validate_flow(config: &StudyConfig, report: &mut ValidationReport) {
    let n = config.flow.len();
    let orders: BTreeSet<usize> = config.flow.iter().map(|s| s.order).collect();
    if orders.len() != n || orders.iter().any(|&o| o >= n) {
        report.error("flow", format!("step orders must be a permutation of 0..{n}"));
    }

    let mut ids = HashSet::new();
    let mut singular = HashSet::new();
    for (i, step) in config.flow.iter().enumerate() {
        let path = format!("flow[{i}]");
        if step.step_id.is_empty() || !ids.insert(&step.step_id) {
            report.error(format!("{path}.step_id"), "step ids must be unique and non-empty");
        }
        if step.kind.is_singular() && !singular.insert(step.kind) {
            report.error(format!("{path}.kind"), format!("more than one {} step", step.kind.as_str()));
        }

        if step.kind.binds_survey() {
            match &step.survey_id {
                None => report.error(format!("{path}.survey_id"), "survey step needs a survey_id"),
                Some(id) if !config.surveys.contains_key(id) => {
                    report.error(format!("{path}.survey_id"), format!("unknown survey {:?}", id.as_str()))
                }
                Some(_) => {}
            }
        } else if step.survey_id.is_some() {
            report.error(format!("{path}.survey_id"), format!("{} steps take no survey", step.kind.as_str()));
        }

        if step.kind == StepKind::MainTask {
            match &step.task_id {
                None => report.error(format!("{path}.task_id"), "main_task step needs a task_id"),
                Some(id) if config.task(id).is_none() => {
                    report.error(format!("{path}.task_id"), format!("unknown task {:?}", id.as_str()))
                }
                Some(_) => {}
            }
        } else if step.task_id.is_some() {
            report.error(format!("{path}.task_id"), "only main_task steps reference a task");
        }
    }
}

fn validate_settings(config: &StudyConfig, report: &mut ValidationReport) {
    let declared: BTreeSet<_> = config.tasks.iter().map(|t| &t.task_id).collect();
    let ordered: BTreeSet<_> = config.settings.task_order.iter().collect();
    if ordered.len() != config.settings.task_order.len() || ordered != declared {
        report.error("settings.task_order", "must list every declared task exactly once");
    }
}

fn validate_triggers(config: &StudyConfig, report: &mut ValidationReport) {
    let mut ids = HashSet::new();
    for (i, rule) in config.trigger_rules.iter().enumerate() {
        let path = format!("trigger_rules[{i}]");
        if rule.rule_id.is_empty() || !ids.insert(&rule.rule_id) {
            report.error(format!("{path}.rule_id"), "rule ids must be unique and non-empty");
        }
        if !config.surveys.contains_key(&rule.survey_id) {
            report.error(
                format!("{path}.survey_id"),
                format!("unknown survey {:?}", rule.survey_id.as_str()),
            );
        }
        match rule.condition {
            TriggerCondition::AfterNPrompts { n }
            | TriggerCondition::AfterNResponses { n }
            | TriggerCondition::AfterNQueries { n }
                if n < 1 =>
            {
                report.error(format!("{path}.condition.n"), "n must be at least 1")
            }
            TriggerCondition::Periodic { interval_s } if interval_s < 1 => {
                report.error(format!("{path}.condition.interval_s"), "interval must be at least 1 s")
            }
            TriggerCondition::BeforeSubmission if rule.repeat != Repeat::Once => {
                report.error(format!("{path}.repeat"), "before-submission rules fire once")
            }
            _ => {}
        }
        if let TriggerScope::Task { task_id } = &rule.scope {
            if config.task(task_id).is_none() {
                report.error(format!("{path}.scope"), format!("unknown task {:?}", task_id.as_str()));
            }
        }
    }
}

/// Instrument-level invariants. `prefix` is prepended to every issue path.
pub fn validate_instrument(instrument: &SurveyInstrument, prefix: &str) -> ValidationReport {
    let mut report = ValidationReport::default();
    let join = |suffix: &str| {
        if prefix.is_empty() {
            suffix.to_owned()
        } else {
            format!("{prefix}.{suffix}")
        }
    };

    if instrument.questions.is_empty() {
        report.error(join("questions"), "an instrument needs at least one question");
    }
    let mut ids = HashSet::new();
    for (j, q) in instrument.questions.iter().enumerate() {
        let path = join(&format!("questions[{j}]"));
        if q.question_id.is_empty() || !ids.insert(&q.question_id) {
            report.error(format!("{path}.question_id"), format!("duplicate or empty id {:?}", q.question_id.as_str()));
        } else if q.question_id.as_str().starts_with(TYPOLOGY_PREFIX) {
            report.error(format!("{path}.question_id"), format!("ids starting with {TYPOLOGY_PREFIX:?} are reserved"));
        }
        match &q.answer_type {
            AnswerType::Likert { points, .. } if !(2..=11).contains(points) => {
                report.error(format!("{path}.answer_type.points"), "likert scales have 2 to 11 points")
            }
            AnswerType::MultipleChoice { options, .. } => {
                if options.len() < 2 {
                    report.error(format!("{path}.answer_type.options"), "at least two options required");
                } else if options.iter().collect::<HashSet<_>>().len() != options.len() {
                    report.error(format!("{path}.answer_type.options"), "options must be distinct");
                }
            }
            _ => {}
        }
        if let Some(check) = &q.attention_check {
            if let Err(why) = q.answer_type.check(&check.expected_answer) {
                report.error(format!("{path}.attention_check.expected_answer"), why);
            }
        }
    }
    report
}
