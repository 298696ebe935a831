//! In-situ survey triggers.
//!
//! A [`TriggerState`] belongs to one participant session. It is fed the
//! session's interaction stream (prompts, responses, queries, task entry and
//! exit) plus clock ticks, and returns the popups that fire. The state is a
//! deterministic function of its inputs, so replaying a stored event stream
//! rebuilds it exactly.
//!
//! Counting rules fire on the event that reaches the threshold even when
//! other popups are still open; their instances queue. Periodic rules are
//! anchored at main-task entry and skip boundaries that pass while one of
//! their own instances is pending.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{EventId, InstanceId, Millis, ResponseId, RuleId, SurveyId, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerCondition {
    AfterNPrompts { n: u32 },
    AfterNResponses { n: u32 },
    AfterNQueries { n: u32 },
    Periodic { interval_s: u32 },
    BeforeSubmission,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Repeat {
    #[default]
    Once,
    EveryMultiple,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerScope {
    #[default]
    AllTasks,
    Task { task_id: TaskId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerRule {
    pub rule_id: RuleId,
    pub survey_id: SurveyId,
    pub condition: TriggerCondition,
    #[serde(default)]
    pub repeat: Repeat,
    #[serde(default)]
    pub scope: TriggerScope,
}

impl TriggerRule {
    pub fn applies_to(&self, task_id: &TaskId) -> bool {
        match &self.scope {
            TriggerScope::AllTasks => true,
            TriggerScope::Task { task_id: scoped } => scoped == task_id,
        }
    }
}

/// What the engine can observe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TriggerInput {
    Prompt { task_id: TaskId, event_id: EventId, at: Millis },
    Response { task_id: TaskId, event_id: EventId, at: Millis },
    Query { task_id: TaskId, event_id: EventId, at: Millis },
    TaskStarted { task_id: TaskId, at: Millis },
    TaskEnded { task_id: TaskId },
    Tick { at: Millis },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FireCause {
    Event { event_id: EventId },
    Tick { at: Millis },
    Submission { task_id: TaskId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum InstanceState {
    Pending,
    Answered { response_id: ResponseId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredTrigger {
    pub instance_id: InstanceId,
    pub rule_id: RuleId,
    pub survey_id: SurveyId,
    pub task_id: Option<TaskId>,
    pub fired_at: Millis,
    pub cause: FireCause,
    #[serde(flatten)]
    pub state: InstanceState,
}

impl FiredTrigger {
    pub fn is_pending(&self) -> bool {
        self.state == InstanceState::Pending
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TriggerError {
    #[error("unknown popup instance {0}")]
    UnknownInstance(InstanceId),
    #[error("popup instance {0} was already answered")]
    AlreadyAnswered(InstanceId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct RuleProgress {
    count: u64,
    last_boundary: u64,
    submitted: BTreeSet<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ActiveTask {
    task_id: TaskId,
    anchor: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Counter {
    Prompts,
    Responses,
    Queries,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerState {
    rules: Vec<TriggerRule>,
    progress: Vec<RuleProgress>,
    instances: Vec<FiredTrigger>,
    active_task: Option<ActiveTask>,
    instance_prefix: String,
}

impl TriggerState {
    /// `instance_prefix` namespaces generated instance ids, normally the
    /// session id.
    pub fn new(rules: Vec<TriggerRule>, instance_prefix: impl Into<String>) -> Self {
        let progress = vec![RuleProgress::default(); rules.len()];
        Self {
            rules,
            progress,
            instances: Vec::new(),
            active_task: None,
            instance_prefix: instance_prefix.into(),
        }
    }

    pub fn rules(&self) -> &[TriggerRule] {
        &self.rules
    }

    pub fn instances(&self) -> &[FiredTrigger] {
        &self.instances
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&FiredTrigger> {
        self.instances.iter().find(|i| &i.instance_id == id)
    }

    /// Pending popups in firing order.
    pub fn pending(&self) -> Vec<FiredTrigger> {
        self.instances.iter().filter(|i| i.is_pending()).cloned().collect()
    }

    /// Feeds one input; returns the popups it fired in rule-declaration order.
    pub fn observe(&mut self, input: &TriggerInput) -> Vec<FiredTrigger> {
        match input {
            TriggerInput::Prompt { task_id, event_id, at } => {
                self.count(Counter::Prompts, task_id, event_id, *at)
            }
            TriggerInput::Response { task_id, event_id, at } => {
                self.count(Counter::Responses, task_id, event_id, *at)
            }
            TriggerInput::Query { task_id, event_id, at } => {
                self.count(Counter::Queries, task_id, event_id, *at)
            }
            TriggerInput::TaskStarted { task_id, at } => {
                self.active_task = Some(ActiveTask { task_id: task_id.clone(), anchor: *at });
                for p in &mut self.progress {
                    p.last_boundary = 0;
                }
                Vec::new()
            }
            TriggerInput::TaskEnded { task_id } => {
                if self.active_task.as_ref().is_some_and(|a| &a.task_id == task_id) {
                    self.active_task = None;
                }
                Vec::new()
            }
            TriggerInput::Tick { at } => self.tick(*at),
        }
    }

    fn count(&mut self, counter: Counter, task_id: &TaskId, event_id: &EventId, at: Millis) -> Vec<FiredTrigger> {
        let mut fired = Vec::new();
        for idx in 0..self.rules.len() {
            let rule = &self.rules[idx];
            let (n, matches) = match (rule.condition, counter) {
                (TriggerCondition::AfterNPrompts { n }, Counter::Prompts)
                | (TriggerCondition::AfterNResponses { n }, Counter::Responses)
                | (TriggerCondition::AfterNQueries { n }, Counter::Queries) => (u64::from(n.max(1)), true),
                _ => (1, false),
            };
            if !matches || !rule.applies_to(task_id) {
                continue;
            }
            let progress = &mut self.progress[idx];
            progress.count += 1;
            let hit = match rule.repeat {
                Repeat::Once => progress.count == n,
                Repeat::EveryMultiple => progress.count % n == 0,
            };
            if hit {
                let cause = FireCause::Event { event_id: event_id.clone() };
                fired.push(self.fire(idx, Some(task_id.clone()), at, cause));
            }
        }
        fired
    }

    fn tick(&mut self, at: Millis) -> Vec<FiredTrigger> {
        let Some(active) = self.active_task.clone() else {
            return Vec::new();
        };
        let mut fired = Vec::new();
        for idx in 0..self.rules.len() {
            let rule = &self.rules[idx];
            let TriggerCondition::Periodic { interval_s } = rule.condition else {
                continue;
            };
            if !rule.applies_to(&active.task_id) {
                continue;
            }
            let k = boundary_index(active.anchor, at, interval_s);
            if k <= self.progress[idx].last_boundary {
                continue;
            }
            self.progress[idx].last_boundary = k;
            if !self.has_pending(idx) {
                fired.push(self.fire(idx, Some(active.task_id.clone()), at, FireCause::Tick { at }));
            }
        }
        fired
    }

    /// Marks a pending popup as answered. For periodic rules the boundaries
    /// that passed while it was open are not back-filled.
    pub fn acknowledge(
        &mut self,
        instance_id: &InstanceId,
        response_id: ResponseId,
        at: Millis,
    ) -> Result<FiredTrigger, TriggerError> {
        let pos = self
            .instances
            .iter()
            .position(|i| &i.instance_id == instance_id)
            .ok_or_else(|| TriggerError::UnknownInstance(instance_id.clone()))?;
        if !self.instances[pos].is_pending() {
            return Err(TriggerError::AlreadyAnswered(instance_id.clone()));
        }
        self.instances[pos].state = InstanceState::Answered { response_id };

        let rule_id = self.instances[pos].rule_id.clone();
        if let (Some(idx), Some(active)) = (self.rules.iter().position(|r| r.rule_id == rule_id), &self.active_task) {
            if let TriggerCondition::Periodic { interval_s } = self.rules[idx].condition {
                if self.rules[idx].applies_to(&active.task_id) {
                    let k = boundary_index(active.anchor, at, interval_s);
                    let progress = &mut self.progress[idx];
                    progress.last_boundary = progress.last_boundary.max(k);
                }
            }
        }
        Ok(self.instances[pos].clone())
    }

    /// Called when the participant tries to submit `task_id`: materializes
    /// every before-submission rule that has not fired for this task yet and
    /// returns all pending popups. Calling it again without answering adds
    /// nothing.
    pub fn pending_before_submission(&mut self, task_id: &TaskId, at: Millis) -> Vec<FiredTrigger> {
        for idx in 0..self.rules.len() {
            let rule = &self.rules[idx];
            if rule.condition != TriggerCondition::BeforeSubmission || !rule.applies_to(task_id) {
                continue;
            }
            if self.progress[idx].submitted.insert(task_id.clone()) {
                let cause = FireCause::Submission { task_id: task_id.clone() };
                self.fire(idx, Some(task_id.clone()), at, cause);
            }
        }
        self.pending()
    }

    fn has_pending(&self, rule_idx: usize) -> bool {
        let rule_id = &self.rules[rule_idx].rule_id;
        self.instances.iter().any(|i| &i.rule_id == rule_id && i.is_pending())
    }

    fn fire(&mut self, rule_idx: usize, task_id: Option<TaskId>, at: Millis, cause: FireCause) -> FiredTrigger {
        let rule = &self.rules[rule_idx];
        let instance = FiredTrigger {
            instance_id: InstanceId::new(format!("{}-p{}", self.instance_prefix, self.instances.len() + 1)),
            rule_id: rule.rule_id.clone(),
            survey_id: rule.survey_id.clone(),
            task_id,
            fired_at: at,
            cause,
            state: InstanceState::Pending,
        };
        self.instances.push(instance.clone());
        instance
    }
}

fn boundary_index(anchor: Millis, at: Millis, interval_s: u32) -> u64 {
    let interval_ms = i64::from(interval_s.max(1)) * 1000;
    if at <= anchor {
        0
    } else {
        ((at - anchor) / interval_ms) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: &str, condition: TriggerCondition, repeat: Repeat) -> TriggerRule {
        TriggerRule {
            rule_id: RuleId::new(id),
            survey_id: SurveyId::new("pop"),
            condition,
            repeat,
            scope: TriggerScope::AllTasks,
        }
    }

    fn task() -> TaskId {
        TaskId::new("t1")
    }

    fn prompt(i: usize) -> TriggerInput {
        TriggerInput::Prompt { task_id: task(), event_id: EventId::new(format!("e{i}")), at: i as i64 }
    }

    fn query(i: usize) -> TriggerInput {
        TriggerInput::Query { task_id: task(), event_id: EventId::new(format!("e{i}")), at: i as i64 }
    }

    #[test]
    fn after_two_prompts_once_fires_at_second() {
        let mut st = TriggerState::new(vec![rule("r", TriggerCondition::AfterNPrompts { n: 2 }, Repeat::Once)], "s");
        let fired: Vec<usize> = (1..=3).filter(|&i| !st.observe(&prompt(i)).is_empty()).collect();
        assert_eq!(fired, vec![2]);
        assert_eq!(st.instances()[0].cause, FireCause::Event { event_id: EventId::new("e2") });
    }

    #[test]
    fn every_query_fires_when_n_is_one() {
        let mut st = TriggerState::new(vec![rule("r", TriggerCondition::AfterNQueries { n: 1 }, Repeat::EveryMultiple)], "s");
        let total: usize = (1..=3).map(|i| st.observe(&query(i)).len()).sum();
        assert_eq!(total, 3);
        // counting rules queue even while earlier instances are pending
        assert_eq!(st.pending().len(), 3);
    }

    #[test]
    fn no_rules_never_fire() {
        let mut st = TriggerState::new(Vec::new(), "s");
        assert!(st.observe(&prompt(1)).is_empty());
        assert!(st.observe(&TriggerInput::Tick { at: 1_000_000 }).is_empty());
        assert!(st.pending_before_submission(&task(), 5).is_empty());
    }

    #[test]
    fn simultaneous_firings_follow_declaration_order() {
        let mut st = TriggerState::new(
            vec![
                rule("b", TriggerCondition::AfterNPrompts { n: 1 }, Repeat::Once),
                rule("a", TriggerCondition::AfterNPrompts { n: 1 }, Repeat::Once),
            ],
            "s",
        );
        let fired = st.observe(&prompt(1));
        let ids: Vec<&str> = fired.iter().map(|f| f.rule_id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
    }

    #[test]
    fn acknowledge_lifecycle() {
        let mut st = TriggerState::new(vec![rule("r", TriggerCondition::AfterNPrompts { n: 1 }, Repeat::Once)], "s");
        let inst = st.observe(&prompt(1)).remove(0);
        let answered = st.acknowledge(&inst.instance_id, ResponseId::new("resp"), 5).unwrap();
        assert_eq!(answered.state, InstanceState::Answered { response_id: ResponseId::new("resp") });
        assert_eq!(
            st.acknowledge(&inst.instance_id, ResponseId::new("again"), 6),
            Err(TriggerError::AlreadyAnswered(inst.instance_id.clone()))
        );
        assert_eq!(
            st.acknowledge(&InstanceId::new("nope"), ResponseId::new("x"), 6),
            Err(TriggerError::UnknownInstance(InstanceId::new("nope")))
        );
    }

    #[test]
    fn periodic_does_not_backfill_after_late_answer() {
        let mut st = TriggerState::new(vec![rule("p", TriggerCondition::Periodic { interval_s: 60 }, Repeat::EveryMultiple)], "s");
        st.observe(&TriggerInput::TaskStarted { task_id: task(), at: 0 });
        let mut fired_at = Vec::new();
        for sec in 1..=200 {
            let at = sec * 1000;
            let fired = st.observe(&TriggerInput::Tick { at });
            fired_at.extend(fired.iter().map(|f| f.fired_at / 1000));
            if sec == 130 {
                let id = st.pending()[0].instance_id.clone();
                st.acknowledge(&id, ResponseId::new("r1"), at).unwrap();
            }
        }
        assert_eq!(fired_at, vec![60, 180]);
    }

    #[test]
    fn periodic_is_silent_outside_tasks() {
        let mut st = TriggerState::new(vec![rule("p", TriggerCondition::Periodic { interval_s: 1 }, Repeat::EveryMultiple)], "s");
        assert!(st.observe(&TriggerInput::Tick { at: 10_000 }).is_empty());
        st.observe(&TriggerInput::TaskStarted { task_id: task(), at: 10_000 });
        assert_eq!(st.observe(&TriggerInput::Tick { at: 12_500 }).len(), 1);
        st.observe(&TriggerInput::TaskEnded { task_id: task() });
        assert!(st.observe(&TriggerInput::Tick { at: 20_000 }).is_empty());
    }

    #[test]
    fn before_submission_is_idempotent() {
        let mut st = TriggerState::new(vec![rule("b", TriggerCondition::BeforeSubmission, Repeat::Once)], "s");
        let first = st.pending_before_submission(&task(), 10);
        assert_eq!(first.len(), 1);
        let second = st.pending_before_submission(&task(), 20);
        assert_eq!(second, first);
        assert_eq!(st.instances().len(), 1);

        st.acknowledge(&first[0].instance_id, ResponseId::new("r"), 30).unwrap();
        assert!(st.pending_before_submission(&task(), 40).is_empty());
    }

    #[test]
    fn scoped_rules_ignore_other_tasks() {
        let mut r = rule("r", TriggerCondition::AfterNPrompts { n: 1 }, Repeat::EveryMultiple);
        r.scope = TriggerScope::Task { task_id: TaskId::new("other") };
        let mut st = TriggerState::new(vec![r], "s");
        assert!(st.observe(&prompt(1)).is_empty());
    }

    #[test]
    fn state_serializes_round_trip() {
        let mut st = TriggerState::new(vec![rule("r", TriggerCondition::AfterNPrompts { n: 1 }, Repeat::Once)], "s");
        st.observe(&prompt(1));
        let json = serde_json::to_string(&st).unwrap();
        let back: TriggerState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, st);
    }
}
