// Randomized trigger scenarios and a brute-force reference: every decision is
// made by re-scanning the whole prefix of the scenario from the start.

use echo_core::ids::{EventId, InstanceId, Millis, ResponseId, RuleId, SurveyId, TaskId};
use echo_core::trigger::{Repeat, TriggerCondition, TriggerInput, TriggerRule, TriggerScope, TriggerState};
use proptest::prelude::*;

pub const TASKS: [&str; 2] = ["t1", "t2"];

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Prompt(usize),
    Response(usize),
    Query(usize),
    Start(usize),
    End(usize),
    Tick,
    /// Answer the pending popup at this position (modulo the pending count).
    Ack(usize),
    Submit(usize),
}

#[derive(Debug, Clone)]
pub struct Case {
    pub rules: Vec<TriggerRule>,
    /// Each step with its absolute time; times never decrease.
    pub steps: Vec<(Step, Millis)>,
}

/// (step index, rule id) for every firing.
pub type Firings = Vec<(usize, RuleId)>;

fn task(i: usize) -> TaskId {
    TaskId::new(TASKS[i])
}

fn condition() -> impl Strategy<Value = TriggerCondition> {
    prop_oneof![
        (1u32..6).prop_map(|n| TriggerCondition::AfterNPrompts { n }),
        (1u32..6).prop_map(|n| TriggerCondition::AfterNResponses { n }),
        (1u32..6).prop_map(|n| TriggerCondition::AfterNQueries { n }),
        (1u32..90).prop_map(|interval_s| TriggerCondition::Periodic { interval_s }),
        Just(TriggerCondition::BeforeSubmission),
    ]
}

fn rules() -> impl Strategy<Value = Vec<TriggerRule>> {
    let scope = prop_oneof![
        2 => Just(TriggerScope::AllTasks),
        1 => (0..TASKS.len()).prop_map(|i| TriggerScope::Task { task_id: task(i) }),
    ];
    prop::collection::vec((condition(), any::<bool>(), scope), 0..=5).prop_map(|specs| {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (condition, every, scope))| TriggerRule {
                rule_id: RuleId::new(format!("r{i}")),
                survey_id: SurveyId::new("in_situ"),
                condition,
                repeat: if every && condition != TriggerCondition::BeforeSubmission {
                    Repeat::EveryMultiple
                } else {
                    Repeat::Once
                },
                scope,
            })
            .collect()
    })
}

fn step() -> impl Strategy<Value = Step> {
    let t = 0..TASKS.len();
    prop_oneof![
        4 => t.clone().prop_map(Step::Prompt),
        3 => t.clone().prop_map(Step::Response),
        3 => t.clone().prop_map(Step::Query),
        1 => t.clone().prop_map(Step::Start),
        1 => t.clone().prop_map(Step::End),
        4 => Just(Step::Tick),
        3 => (0usize..4).prop_map(Step::Ack),
        1 => t.prop_map(Step::Submit),
    ]
}

pub fn case(max_steps: usize) -> impl Strategy<Value = Case> {
    let timed = prop::collection::vec((step(), 0i64..45_000), 0..=max_steps);
    (rules(), timed).prop_map(|(rules, timed)| {
        let mut now = 1_000_000;
        let steps = timed
            .into_iter()
            .map(|(s, dt)| {
                now += dt;
                (s, now)
            })
            .collect();
        Case { rules, steps }
    })
}

/// Drives the engine through the scenario.
pub fn run_engine(case: &Case) -> Firings {
    let mut engine = TriggerState::new(case.rules.clone(), "s");
    let mut fired = Firings::new();
    for (i, (step, at)) in case.steps.iter().enumerate() {
        let at = *at;
        let event_id = EventId::new(format!("e{i}"));
        let before = engine.instances().len();
        match step {
            Step::Prompt(t) => {
                engine.observe(&TriggerInput::Prompt { task_id: task(*t), event_id, at });
            }
            Step::Response(t) => {
                engine.observe(&TriggerInput::Response { task_id: task(*t), event_id, at });
            }
            Step::Query(t) => {
                engine.observe(&TriggerInput::Query { task_id: task(*t), event_id, at });
            }
            Step::Start(t) => {
                engine.observe(&TriggerInput::TaskStarted { task_id: task(*t), at });
            }
            Step::End(t) => {
                engine.observe(&TriggerInput::TaskEnded { task_id: task(*t) });
            }
            Step::Tick => {
                engine.observe(&TriggerInput::Tick { at });
            }
            Step::Ack(j) => {
                let pending = engine.pending();
                if !pending.is_empty() {
                    let id: InstanceId = pending[j % pending.len()].instance_id.clone();
                    engine.acknowledge(&id, ResponseId::new(format!("a{i}")), at).expect("pending instance");
                }
            }
            Step::Submit(t) => {
                engine.pending_before_submission(&task(*t), at);
            }
        }
        for inst in &engine.instances()[before..] {
            fired.push((i, inst.rule_id.clone()));
        }
    }
    fired
}

struct Fired {
    step: usize,
    rule: usize,
    /// Step at which it was answered.
    acked: Option<usize>,
}

fn applies(rule: &TriggerRule, t: usize) -> bool {
    match &rule.scope {
        TriggerScope::AllTasks => true,
        TriggerScope::Task { task_id } => task_id.as_str() == TASKS[t],
    }
}

/// Active task and its entry time just before step `i`.
fn active_before(case: &Case, i: usize) -> Option<(usize, usize, Millis)> {
    let mut active = None;
    for (j, (s, at)) in case.steps[..i].iter().enumerate() {
        match s {
            Step::Start(t) => active = Some((*t, j, *at)),
            Step::End(t) if active.is_some_and(|(a, _, _)| a == *t) => active = None,
            _ => {}
        }
    }
    active
}

fn boundary(anchor: Millis, at: Millis, interval_s: u32) -> i64 {
    (at - anchor).max(0) / (i64::from(interval_s) * 1000)
}

fn counting_hit(case: &Case, rule: &TriggerRule, i: usize) -> bool {
    let (n, kind): (u32, fn(&Step) -> Option<usize>) = match rule.condition {
        TriggerCondition::AfterNPrompts { n } => (n, |s| if let Step::Prompt(t) = s { Some(*t) } else { None }),
        TriggerCondition::AfterNResponses { n } => (n, |s| if let Step::Response(t) = s { Some(*t) } else { None }),
        TriggerCondition::AfterNQueries { n } => (n, |s| if let Step::Query(t) = s { Some(*t) } else { None }),
        _ => return false,
    };
    match kind(&case.steps[i].0) {
        Some(t) if applies(rule, t) => {}
        _ => return false,
    }
    let count = case.steps[..=i].iter().filter(|(s, _)| kind(s).is_some_and(|t| applies(rule, t))).count() as u32;
    match rule.repeat {
        Repeat::Once => count == n,
        Repeat::EveryMultiple => count % n == 0,
    }
}

fn periodic_hit(case: &Case, history: &[Fired], r: usize, i: usize) -> bool {
    let rule = &case.rules[r];
    let TriggerCondition::Periodic { interval_s } = rule.condition else { return false };
    let Some((t, started, anchor)) = active_before(case, i) else { return false };
    if !applies(rule, t) {
        return false;
    }
    let k = boundary(anchor, case.steps[i].1, interval_s);
    // boundaries already consumed in this activation: earlier ticks and answers
    let consumed = (started + 1..i)
        .filter(|&j| match case.steps[j].0 {
            Step::Tick => true,
            Step::Ack(_) => history.iter().any(|f| f.rule == r && f.acked == Some(j)),
            _ => false,
        })
        .map(|j| boundary(anchor, case.steps[j].1, interval_s))
        .max()
        .unwrap_or(0);
    let pending = history.iter().any(|f| f.rule == r && f.acked.is_none());
    k > consumed && !pending
}

/// Reference firings, each decided from the scenario prefix.
pub fn run_oracle(case: &Case) -> Firings {
    let mut history: Vec<Fired> = Vec::new();
    for (i, (step, _)) in case.steps.iter().enumerate() {
        match step {
            Step::Prompt(_) | Step::Response(_) | Step::Query(_) => {
                for (r, rule) in case.rules.iter().enumerate() {
                    if counting_hit(case, rule, i) {
                        history.push(Fired { step: i, rule: r, acked: None });
                    }
                }
            }
            Step::Tick => {
                for r in 0..case.rules.len() {
                    if periodic_hit(case, &history, r, i) {
                        history.push(Fired { step: i, rule: r, acked: None });
                    }
                }
            }
            Step::Submit(t) => {
                for (r, rule) in case.rules.iter().enumerate() {
                    let earlier = case.steps[..i].iter().any(|(s, _)| *s == Step::Submit(*t));
                    if rule.condition == TriggerCondition::BeforeSubmission && applies(rule, *t) && !earlier {
                        history.push(Fired { step: i, rule: r, acked: None });
                    }
                }
            }
            Step::Ack(j) => {
                let pending: Vec<usize> = (0..history.len()).filter(|&h| history[h].acked.is_none()).collect();
                if !pending.is_empty() {
                    history[pending[j % pending.len()]].acked = Some(i);
                }
            }
            Step::Start(_) | Step::End(_) => {}
        }
    }
    history.iter().map(|f| (f.step, case.rules[f.rule].rule_id.clone())).collect()
}

pub fn multiset(mut f: Firings) -> Firings {
    f.sort();
    f
}
