use std::collections::BTreeMap;
use std::sync::Arc;

use echo_core::flow::{SessionStep, StepState};
use echo_core::ids::{ParticipantId, QueryId, SessionId, StepId, StudyId, TaskId, TurnId};
use echo_core::log::{EventLog, EventPayload, InteractionEvent, ResponseOutcome, SessionView, TurnStatus};
use echo_core::model::StepKind;
use echo_core::provider::SearchResult;
use echo_core::store::{FileStore, Store};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Action {
    Turn { prompt: String, chunks: Vec<String>, fail: bool },
    Rate { pick: usize, rating: u8 },
    Query { text: String, results: u32 },
    Click { pick: usize, rank: u32 },
    Note(String),
    Trajectory(u8),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        3 => ("\\PC{0,12}", prop::collection::vec("\\PC{0,6}", 0..8), prop::bool::weighted(0.2))
            .prop_map(|(prompt, chunks, fail)| Action::Turn { prompt, chunks, fail }),
        2 => (any::<usize>(), 1u8..=5).prop_map(|(pick, rating)| Action::Rate { pick, rating }),
        2 => ("\\PC{1,12}", 0u32..6).prop_map(|(text, results)| Action::Query { text, results }),
        2 => (any::<usize>(), 1u32..8).prop_map(|(pick, rank)| Action::Click { pick, rank }),
        1 => "\\PC{0,20}".prop_map(Action::Note),
        1 => (1u8..=5).prop_map(Action::Trajectory),
    ]
}

fn task() -> TaskId {
    TaskId::new("t1")
}

fn serp(n: u32) -> Vec<SearchResult> {
    (1..=n)
        .map(|r| SearchResult {
            rank: r,
            title: format!("result {r}"),
            url: format!("https://r{r}.example/"),
            snippet: String::new(),
        })
        .collect()
}

fn open_log() -> (tempfile::TempDir, Arc<dyn Store>, EventLog) {
    let dir = tempfile::tempdir().unwrap();
    let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
    let log = EventLog::open(store.clone()).unwrap();
    (dir, store, log)
}

fn start(log: &EventLog, sid: &SessionId) {
    let steps = vec![SessionStep {
        step_id: StepId::new("main"),
        kind: StepKind::MainTask,
        task_id: Some(task()),
        survey_id: None,
        reminder_text: None,
        state: StepState::NotStarted,
    }];
    let started = EventPayload::SessionStarted {
        study_id: StudyId::new("study"),
        participant_id: ParticipantId::new(format!("p-{sid}")),
        external_label: None,
        steps,
        trigger_rules: Vec::new(),
    };
    log.append(sid, started, 0, 0).unwrap();
    let entered = EventPayload::StepEntered { step_id: StepId::new("main"), step_kind: StepKind::MainTask, task_id: Some(task()) };
    log.append(sid, entered, 0, 0).unwrap();
}

/// Appends the actions as valid events; actions that would be invalid in
/// the current state (rating an unfinished turn, clicking a missing rank)
/// are expected to be refused.
fn play(log: &EventLog, sid: &SessionId, actions: &[Action]) {
    let mut now = 1_000;
    let mut completed: Vec<TurnId> = Vec::new();
    let mut turns = 0;
    let mut queries: Vec<(QueryId, u32)> = Vec::new();
    for a in actions {
        now += 10;
        match a {
            Action::Turn { prompt, chunks, fail } => {
                turns += 1;
                let turn_id = TurnId::new(format!("turn{turns}"));
                let p = EventPayload::PromptSubmitted {
                    turn_id: turn_id.clone(),
                    task_id: task(),
                    text: prompt.clone(),
                    typing_start_ms: now - 5,
                    typing_end_ms: now - 1,
                };
                log.append(sid, p, now, now).unwrap();
                for (i, c) in chunks.iter().enumerate() {
                    let chunk = EventPayload::ResponseChunk { turn_id: turn_id.clone(), chunk_index: i as u32, text: c.clone() };
                    log.append(sid, chunk, now, now).unwrap();
                }
                let outcome =
                    if *fail { ResponseOutcome::Failed { message: "dropped".into() } } else { ResponseOutcome::Completed };
                let end = EventPayload::ResponseEnded { turn_id: turn_id.clone(), task_id: task(), outcome };
                log.append(sid, end, now, now).unwrap();
                if !fail {
                    completed.push(turn_id);
                }
            }
            Action::Rate { pick, rating } => {
                let turn_id = TurnId::new(format!("turn{}", 1 + pick % (turns.max(1))));
                let r = log.rate_turn(sid, &turn_id, *rating, now, now);
                assert_eq!(r.is_ok(), completed.contains(&turn_id), "{r:?}");
            }
            Action::Query { text, results } => {
                let query_id = QueryId::new(format!("q{}", queries.len() + 1));
                let q = EventPayload::QueryIssued {
                    query_id: query_id.clone(),
                    task_id: task(),
                    text: text.clone(),
                    typing_start_ms: now - 3,
                    typing_end_ms: now - 1,
                    result_count: *results,
                    serp: serp(*results),
                };
                log.append(sid, q, now, now).unwrap();
                queries.push((query_id, *results));
            }
            Action::Click { pick, rank } => {
                let Some((query_id, n)) = queries.get(pick % queries.len().max(1)).cloned() else { continue };
                let click = EventPayload::ResultClicked { query_id, rank: *rank, url: format!("https://r{rank}.example/") };
                assert_eq!(log.append(sid, click, now, now).is_ok(), *rank <= n);
            }
            Action::Note(text) => {
                log.append(sid, EventPayload::NoteSaved { task_id: task(), text: text.clone() }, now, now).unwrap();
            }
            Action::Trajectory(r) => {
                log.rate_trajectory(sid, &task(), *r, now, now).unwrap();
            }
        }
    }
}

#[derive(Debug, PartialEq)]
struct Summary {
    turns: Vec<(String, u32, String, String, Option<u8>)>,
    clicks: Vec<(String, Vec<(u32, String)>)>,
    notes: BTreeMap<String, String>,
    trajectory: BTreeMap<String, u8>,
}

/// Independent reading of the timeline.
fn oracle(events: &[InteractionEvent]) -> Summary {
    let mut turns: Vec<(String, u32, String, String, Option<u8>)> = Vec::new();
    let mut clicks: Vec<(String, Vec<(u32, String)>)> = Vec::new();
    let mut notes = BTreeMap::new();
    let mut trajectory = BTreeMap::new();
    for e in events {
        match &e.payload {
            EventPayload::PromptSubmitted { turn_id, .. } => {
                let index = turns.len() as u32 + 1;
                turns.push((turn_id.to_string(), index, String::new(), "streaming".into(), None));
            }
            EventPayload::ResponseChunk { turn_id, text, .. } => {
                turns.iter_mut().find(|t| t.0 == turn_id.as_str()).unwrap().2 += text;
            }
            EventPayload::ResponseEnded { turn_id, outcome, .. } => {
                turns.iter_mut().find(|t| t.0 == turn_id.as_str()).unwrap().3 = match outcome {
                    ResponseOutcome::Completed => "completed",
                    ResponseOutcome::Failed { .. } => "failed",
                    ResponseOutcome::Cancelled => "cancelled",
                }
                .into();
            }
            EventPayload::TurnRated { turn_id, rating } => {
                turns.iter_mut().find(|t| t.0 == turn_id.as_str()).unwrap().4 = Some(*rating);
            }
            EventPayload::QueryIssued { query_id, .. } => clicks.push((query_id.to_string(), Vec::new())),
            EventPayload::ResultClicked { query_id, rank, url } => {
                clicks.iter_mut().find(|q| q.0 == query_id.as_str()).unwrap().1.push((*rank, url.clone()));
            }
            EventPayload::NoteSaved { task_id, text } => {
                notes.insert(task_id.to_string(), text.clone());
            }
            EventPayload::TrajectoryRated { task_id, rating } => {
                trajectory.insert(task_id.to_string(), *rating);
            }
            _ => {}
        }
    }
    Summary { turns, clicks, notes, trajectory }
}

fn summarize(view: &SessionView) -> Summary {
    Summary {
        turns: view
            .turns
            .iter()
            .map(|t| {
                let status = match t.status {
                    TurnStatus::Streaming => "streaming",
                    TurnStatus::Completed => "completed",
                    TurnStatus::Failed => "failed",
                    TurnStatus::Cancelled => "cancelled",
                };
                (t.turn_id.to_string(), t.turn_index, t.response_text.clone(), status.to_string(), t.turn_rating)
            })
            .collect(),
        clicks: view
            .queries
            .iter()
            .map(|q| (q.query_id.to_string(), q.clicks.iter().map(|c| (c.rank, c.url.clone())).collect()))
            .collect(),
        notes: view.notes.iter().map(|(k, v)| (k.to_string(), v.text.clone())).collect(),
        trajectory: view.trajectory_ratings.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn views_equal_independent_fold(actions in prop::collection::vec(action(), 0..40)) {
        let (_dir, store, log) = open_log();
        let sid = SessionId::new("s1");
        start(&log, &sid);
        play(&log, &sid, &actions);

        let timeline = log.timeline(&sid).unwrap();
        for (i, e) in timeline.iter().enumerate() {
            prop_assert_eq!(e.seq, i as u64 + 1);
        }
        prop_assert!(timeline.windows(2).all(|w| w[0].server_ts <= w[1].server_ts));

        let view = log.view(&sid).unwrap();
        prop_assert_eq!(&SessionView::fold(&timeline), &view);
        prop_assert_eq!(summarize(&view), oracle(&timeline));

        let reopened = EventLog::open(store).unwrap();
        prop_assert_eq!(reopened.timeline(&sid).unwrap(), timeline);
    }
}

#[test]
fn concurrent_sessions_have_gap_free_sequences() {
    let (_dir, store, log) = open_log();
    let log = Arc::new(log);
    let sessions: Vec<SessionId> = (0..10).map(|i| SessionId::new(format!("s{i}"))).collect();
    for s in &sessions {
        start(&log, s);
    }
    let handles: Vec<_> = (0..100)
        .map(|i| {
            let log = log.clone();
            let sid = sessions[i % sessions.len()].clone();
            std::thread::spawn(move || {
                let note = EventPayload::NoteSaved { task_id: task(), text: format!("n{i}") };
                log.append(&sid, note, i as i64, i as i64).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let reopened = EventLog::open(store).unwrap();
    for s in &sessions {
        let seqs: Vec<u64> = reopened.timeline(s).unwrap().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, (1..=12).collect::<Vec<u64>>(), "{s}");
    }
}
