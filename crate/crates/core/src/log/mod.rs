//! Append-only, sequence-numbered interaction log.
//!
//! Every participant action is stored as an [`InteractionEvent`] in the
//! study's event stream. Sequence numbers are per session, start at 1 and
//! have no gaps. An event is durable before `append` returns.

mod view;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{SessionStep, StepCompletion};
use crate::ids::{
    EventId, InstanceId, Millis, ParticipantId, QueryId, QuestionId, ResponseId, SessionId, StepId, StudyId,
    SurveyId, TaskId, TurnId,
};
use crate::model::{AnswerValue, StepKind};
use crate::provider::SearchResult;
use crate::store::{Store, StoreError};
use crate::trigger::{FiredTrigger, TriggerRule};

pub use view::{
    ChatTurn, Click, NoteRecord, PopupAnswer, PopupRecord, SearchQueryRecord, SessionView, SurveySubmission,
    TurnStatus,
};

/// Turn and trajectory ratings use a 1..=5 scale.
pub const RATING_MAX: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ResponseOutcome {
    Completed,
    Failed { message: String },
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    SessionStarted {
        study_id: StudyId,
        participant_id: ParticipantId,
        #[serde(default)]
        external_label: Option<String>,
        /// The enabled steps this session runs through.
        steps: Vec<SessionStep>,
        trigger_rules: Vec<TriggerRule>,
    },
    StepEntered {
        step_id: StepId,
        step_kind: StepKind,
        #[serde(default)]
        task_id: Option<TaskId>,
    },
    StepCompleted {
        step_id: StepId,
        completion: StepCompletion,
        #[serde(default)]
        attention_failed: Vec<QuestionId>,
    },
    /// Attention checks failed on a submission that was refused.
    AttentionCheckFailed {
        step_id: StepId,
        question_ids: Vec<QuestionId>,
    },
    SessionCompleted,
    PromptSubmitted {
        turn_id: TurnId,
        task_id: TaskId,
        text: String,
        typing_start_ms: Millis,
        typing_end_ms: Millis,
    },
    ResponseChunk {
        turn_id: TurnId,
        chunk_index: u32,
        text: String,
    },
    ResponseEnded {
        turn_id: TurnId,
        task_id: TaskId,
        outcome: ResponseOutcome,
    },
    TurnRated {
        turn_id: TurnId,
        rating: u8,
    },
    TrajectoryRated {
        task_id: TaskId,
        rating: u8,
    },
    QueryIssued {
        query_id: QueryId,
        task_id: TaskId,
        text: String,
        typing_start_ms: Millis,
        typing_end_ms: Millis,
        result_count: u32,
        serp: Vec<SearchResult>,
    },
    ResultClicked {
        query_id: QueryId,
        rank: u32,
        url: String,
    },
    /// A click report that did not match the stored snapshot.
    ClickRejected {
        query_id: QueryId,
        rank: u32,
        url: String,
        reason: String,
    },
    NoteSaved {
        task_id: TaskId,
        text: String,
    },
    /// A clock tick that changed in-situ trigger state.
    ClockTick,
    SubmissionAttempted {
        task_id: TaskId,
    },
    PopupFired {
        instance: FiredTrigger,
    },
    PopupAnswered {
        instance_id: InstanceId,
        response_id: ResponseId,
        survey_id: SurveyId,
        answers: std::collections::BTreeMap<QuestionId, AnswerValue>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::SessionStarted { .. } => "session_started",
            EventPayload::StepEntered { .. } => "step_entered",
            EventPayload::StepCompleted { .. } => "step_completed",
            EventPayload::AttentionCheckFailed { .. } => "attention_check_failed",
            EventPayload::SessionCompleted => "session_completed",
            EventPayload::PromptSubmitted { .. } => "prompt_submitted",
            EventPayload::ResponseChunk { .. } => "response_chunk",
            EventPayload::ResponseEnded { .. } => "response_ended",
            EventPayload::TurnRated { .. } => "turn_rated",
            EventPayload::TrajectoryRated { .. } => "trajectory_rated",
            EventPayload::QueryIssued { .. } => "query_issued",
            EventPayload::ResultClicked { .. } => "result_clicked",
            EventPayload::ClickRejected { .. } => "click_rejected",
            EventPayload::NoteSaved { .. } => "note_saved",
            EventPayload::ClockTick => "clock_tick",
            EventPayload::SubmissionAttempted { .. } => "submission_attempted",
            EventPayload::PopupFired { .. } => "popup_fired",
            EventPayload::PopupAnswered { .. } => "popup_answered",
        }
    }
}

/// One line of a study's event file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub event_id: EventId,
    pub session_id: SessionId,
    pub seq: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
    pub client_ts: Millis,
    pub server_ts: Millis,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("invalid event payload: {0}")]
    PayloadInvalid(String),
    #[error("event out of order for turn {0}")]
    OutOfOrderTurn(TurnId),
    #[error("unknown turn {0}")]
    UnknownTurn(TurnId),
    #[error("response for turn {0} has not completed")]
    ResponseNotComplete(TurnId),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error("corrupt event record: {0}")]
    Corrupt(String),
}

struct SessionLog {
    study_id: StudyId,
    events: Vec<InteractionEvent>,
    view: SessionView,
    closed: bool,
}

impl SessionLog {
    fn next_seq(&self) -> u64 {
        self.events.len() as u64 + 1
    }

    fn last_server_ts(&self) -> Millis {
        self.events.last().map_or(Millis::MIN, |e| e.server_ts)
    }

    fn push(&mut self, event: InteractionEvent) {
        self.view.apply(&event);
        if event.payload == EventPayload::SessionCompleted {
            self.closed = true;
        }
        self.events.push(event);
    }
}

pub fn stream_key(study_id: &StudyId) -> String {
    format!("studies/{study_id}/events")
}

/// Sessions' event streams, cached in memory and written through to a
/// [`Store`].
pub struct EventLog {
    store: Arc<dyn Store>,
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<SessionLog>>>>,
}

impl EventLog {
    /// Loads every study's event stream from `store`.
    pub fn open(store: Arc<dyn Store>) -> Result<Self, LogError> {
        let mut sessions: HashMap<SessionId, SessionLog> = HashMap::new();
        for stream in store.streams()? {
            let Some(study) = stream.strip_prefix("studies/").and_then(|s| s.strip_suffix("/events")) else {
                continue;
            };
            for record in store.scan(&stream, 0)? {
                let event: InteractionEvent =
                    serde_json::from_slice(&record).map_err(|e| LogError::Corrupt(e.to_string()))?;
                let entry = sessions.entry(event.session_id.clone()).or_insert_with(|| SessionLog {
                    study_id: StudyId::new(study),
                    events: Vec::new(),
                    view: SessionView::default(),
                    closed: false,
                });
                if event.seq != entry.next_seq() {
                    return Err(LogError::Corrupt(format!(
                        "session {} jumps to seq {} after {}",
                        event.session_id,
                        event.seq,
                        entry.events.len()
                    )));
                }
                entry.push(event);
            }
        }
        Ok(Self {
            store,
            sessions: RwLock::new(sessions.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect()),
        })
    }

    fn session(&self, session_id: &SessionId) -> Result<Arc<Mutex<SessionLog>>, LogError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(session_id)
            .cloned()
            .ok_or_else(|| LogError::UnknownSession(session_id.clone()))
    }

    /// Appends one event. A `SessionStarted` payload opens a new session;
    /// everything else requires an open one. `now` is the server clock;
    /// stored server timestamps never decrease within a session.
    pub fn append(
        &self,
        session_id: &SessionId,
        payload: EventPayload,
        client_ts: Millis,
        now: Millis,
    ) -> Result<InteractionEvent, LogError> {
        if let EventPayload::SessionStarted { study_id, .. } = &payload {
            let mut table = self.sessions.write().expect("session table poisoned");
            if table.contains_key(session_id) {
                return Err(LogError::PayloadInvalid(format!("session {session_id} already started")));
            }
            let mut log = SessionLog {
                study_id: study_id.clone(),
                events: Vec::new(),
                view: SessionView::default(),
                closed: false,
            };
            let event = self.write(&mut log, session_id, payload, client_ts, now)?;
            table.insert(session_id.clone(), Arc::new(Mutex::new(log)));
            return Ok(event);
        }

        let handle = self.session(session_id)?;
        let mut log = handle.lock().expect("session log poisoned");
        if log.closed {
            return Err(LogError::SessionClosed(session_id.clone()));
        }
        log.view.validate(&payload)?;
        self.write(&mut log, session_id, payload, client_ts, now)
    }

    fn write(
        &self,
        log: &mut SessionLog,
        session_id: &SessionId,
        payload: EventPayload,
        client_ts: Millis,
        now: Millis,
    ) -> Result<InteractionEvent, LogError> {
        let seq = log.next_seq();
        let event = InteractionEvent {
            event_id: EventId::new(format!("{session_id}-{seq}")),
            session_id: session_id.clone(),
            seq,
            payload,
            client_ts,
            server_ts: now.max(log.last_server_ts()),
        };
        let record = serde_json::to_vec(&event).map_err(StoreError::from)?;
        self.store.append(&stream_key(&log.study_id), &record)?;
        log.push(event.clone());
        Ok(event)
    }

    /// Events of one session in seq order.
    pub fn timeline(&self, session_id: &SessionId) -> Result<Vec<InteractionEvent>, LogError> {
        Ok(self.session(session_id)?.lock().expect("session log poisoned").events.clone())
    }

    pub fn view(&self, session_id: &SessionId) -> Result<SessionView, LogError> {
        Ok(self.session(session_id)?.lock().expect("session log poisoned").view.clone())
    }

    pub fn contains(&self, session_id: &SessionId) -> bool {
        self.sessions.read().expect("session table poisoned").contains_key(session_id)
    }

    /// Every session id, sorted.
    pub fn sessions(&self) -> Vec<SessionId> {
        let mut ids: Vec<SessionId> = self.sessions.read().expect("session table poisoned").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Session ids of a study, sorted.
    pub fn sessions_of(&self, study_id: &StudyId) -> Vec<SessionId> {
        let table = self.sessions.read().expect("session table poisoned");
        let mut ids: Vec<SessionId> = table
            .iter()
            .filter(|(_, log)| &log.lock().expect("session log poisoned").study_id == study_id)
            .map(|(id, _)| id.clone())
            .collect();
        ids.sort();
        ids
    }

    /// Records a turn rating and returns the updated turn. Re-rating
    /// overwrites the materialized value; every rating stays in the log.
    pub fn rate_turn(
        &self,
        session_id: &SessionId,
        turn_id: &TurnId,
        rating: u8,
        client_ts: Millis,
        now: Millis,
    ) -> Result<ChatTurn, LogError> {
        let payload = EventPayload::TurnRated { turn_id: turn_id.clone(), rating };
        self.append(session_id, payload, client_ts, now)?;
        self.view(session_id)?.turn(turn_id).cloned().ok_or_else(|| LogError::UnknownTurn(turn_id.clone()))
    }

    /// One trajectory rating per task, last write wins.
    pub fn rate_trajectory(
        &self,
        session_id: &SessionId,
        task_id: &TaskId,
        rating: u8,
        client_ts: Millis,
        now: Millis,
    ) -> Result<u8, LogError> {
        let payload = EventPayload::TrajectoryRated { task_id: task_id.clone(), rating };
        self.append(session_id, payload, client_ts, now)?;
        Ok(rating)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{CompletionPayload, StepState};
    use crate::store::FileStore;

    fn log() -> (tempfile::TempDir, EventLog) {
        let dir = tempfile::tempdir().unwrap();
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        (dir, EventLog::open(store).unwrap())
    }

    fn start(log: &EventLog, session: &str) -> SessionId {
        let sid = SessionId::new(session);
        let steps = vec![SessionStep {
            step_id: StepId::new("main"),
            kind: StepKind::MainTask,
            task_id: Some(TaskId::new("t1")),
            survey_id: None,
            reminder_text: None,
            state: StepState::NotStarted,
        }];
        let payload = EventPayload::SessionStarted {
            study_id: StudyId::new("study"),
            participant_id: ParticipantId::new(format!("p-{session}")),
            external_label: None,
            steps,
            trigger_rules: Vec::new(),
        };
        log.append(&sid, payload, 0, 0).unwrap();
        log.append(
            &sid,
            EventPayload::StepEntered {
                step_id: StepId::new("main"),
                step_kind: StepKind::MainTask,
                task_id: Some(TaskId::new("t1")),
            },
            0,
            0,
        )
        .unwrap();
        sid
    }

    fn prompt(log: &EventLog, sid: &SessionId, turn: &str, text: &str) {
        let payload = EventPayload::PromptSubmitted {
            turn_id: TurnId::new(turn),
            task_id: TaskId::new("t1"),
            text: text.into(),
            typing_start_ms: 10,
            typing_end_ms: 20,
        };
        log.append(sid, payload, 30, 40).unwrap();
    }

    fn chunk(log: &EventLog, sid: &SessionId, turn: &str, i: u32, text: &str) -> Result<InteractionEvent, LogError> {
        let payload = EventPayload::ResponseChunk { turn_id: TurnId::new(turn), chunk_index: i, text: text.into() };
        log.append(sid, payload, 50, 50)
    }

    fn end(log: &EventLog, sid: &SessionId, turn: &str) {
        let payload = EventPayload::ResponseEnded {
            turn_id: TurnId::new(turn),
            task_id: TaskId::new("t1"),
            outcome: ResponseOutcome::Completed,
        };
        log.append(sid, payload, 60, 60).unwrap();
    }

    #[test]
    fn first_event_gets_seq_one() {
        let (_d, log) = log();
        let sid = SessionId::new("s");
        let event = log
            .append(
                &sid,
                EventPayload::SessionStarted {
                    study_id: StudyId::new("study"),
                    participant_id: ParticipantId::new("p"),
                    external_label: None,
                    steps: Vec::new(),
                    trigger_rules: Vec::new(),
                },
                0,
                0,
            )
            .unwrap();
        assert_eq!(event.seq, 1);
    }

    #[test]
    fn unknown_session_and_empty_timeline() {
        let (_d, log) = log();
        assert!(matches!(log.timeline(&SessionId::new("nope")), Err(LogError::UnknownSession(_))));
        assert!(matches!(
            log.append(&SessionId::new("nope"), EventPayload::ClockTick, 0, 0),
            Err(LogError::UnknownSession(_))
        ));
    }

    #[test]
    fn chunk_for_unopened_turn_is_out_of_order() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        assert!(matches!(chunk(&log, &sid, "ghost", 0, "x"), Err(LogError::OutOfOrderTurn(_))));
        prompt(&log, &sid, "t", "hi");
        assert!(matches!(chunk(&log, &sid, "t", 1, "x"), Err(LogError::OutOfOrderTurn(_))));
        chunk(&log, &sid, "t", 0, "x").unwrap();
        end(&log, &sid, "t");
        assert!(matches!(chunk(&log, &sid, "t", 1, "y"), Err(LogError::OutOfOrderTurn(_))));
    }

    #[test]
    fn prompt_with_chunks_materializes_one_turn() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        prompt(&log, &sid, "t", "hi");
        for (i, c) in ["ec", "ho: ", "hi"].iter().enumerate() {
            chunk(&log, &sid, "t", i as u32, c).unwrap();
        }
        end(&log, &sid, "t");
        let view = SessionView::fold(&log.timeline(&sid).unwrap());
        assert_eq!(view.turns.len(), 1);
        let turn = &view.turns[0];
        assert_eq!(turn.response_text, "echo: hi");
        assert_eq!(turn.turn_index, 1);
        assert_eq!((turn.typing_start_ms, turn.typing_end_ms, turn.submitted_ms), (10, 20, 30));
        assert_eq!(turn.status, TurnStatus::Completed);
        assert_eq!(view, log.view(&sid).unwrap());
    }

    #[test]
    fn rating_lifecycle_keeps_every_event() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        prompt(&log, &sid, "t", "hi");
        assert!(matches!(log.rate_turn(&sid, &TurnId::new("t"), 4, 0, 70), Err(LogError::ResponseNotComplete(_))));
        assert!(matches!(log.rate_turn(&sid, &TurnId::new("zz"), 4, 0, 70), Err(LogError::UnknownTurn(_))));
        chunk(&log, &sid, "t", 0, "ok").unwrap();
        end(&log, &sid, "t");
        assert_eq!(log.rate_turn(&sid, &TurnId::new("t"), 4, 0, 70).unwrap().turn_rating, Some(4));
        log.rate_turn(&sid, &TurnId::new("t"), 3, 0, 71).unwrap();
        let turn = log.rate_turn(&sid, &TurnId::new("t"), 5, 0, 72).unwrap();
        assert_eq!(turn.turn_rating, Some(5));
        let rating_events = log
            .timeline(&sid)
            .unwrap()
            .iter()
            .filter(|e| matches!(e.payload, EventPayload::TurnRated { .. }))
            .count();
        assert_eq!(rating_events, 3);
        assert!(matches!(log.rate_turn(&sid, &TurnId::new("t"), 6, 0, 73), Err(LogError::PayloadInvalid(_))));
    }

    #[test]
    fn trajectory_rating_overwrites() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        log.rate_trajectory(&sid, &TaskId::new("t1"), 2, 0, 1).unwrap();
        log.rate_trajectory(&sid, &TaskId::new("t1"), 4, 0, 2).unwrap();
        assert_eq!(log.view(&sid).unwrap().trajectory_ratings[&TaskId::new("t1")], 4);
        assert!(matches!(log.rate_trajectory(&sid, &TaskId::new("other"), 4, 0, 3), Err(LogError::UnknownTask(_))));
    }

    #[test]
    fn clicks_must_match_snapshot() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        let serp = vec![
            SearchResult { rank: 1, title: "A".into(), url: "https://a.example/".into(), snippet: String::new() },
            SearchResult { rank: 2, title: "B".into(), url: "https://b.example/".into(), snippet: String::new() },
        ];
        let q = EventPayload::QueryIssued {
            query_id: QueryId::new("q"),
            task_id: TaskId::new("t1"),
            text: "lisbon".into(),
            typing_start_ms: 1,
            typing_end_ms: 2,
            result_count: 2,
            serp,
        };
        log.append(&sid, q, 3, 3).unwrap();
        let click = |rank, url: &str| EventPayload::ResultClicked { query_id: QueryId::new("q"), rank, url: url.into() };
        log.append(&sid, click(2, "https://b.example/"), 4, 4).unwrap();
        assert!(matches!(log.append(&sid, click(3, "https://b.example/"), 5, 5), Err(LogError::PayloadInvalid(_))));
        assert!(matches!(log.append(&sid, click(1, "https://b.example/"), 5, 5), Err(LogError::PayloadInvalid(_))));
        let view = log.view(&sid).unwrap();
        assert_eq!(view.queries[0].clicks.len(), 1);
        assert_eq!(view.queries[0].clicks[0].rank, 2);
    }

    #[test]
    fn completed_session_is_closed() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        let done = EventPayload::StepCompleted {
            step_id: StepId::new("main"),
            completion: StepCompletion {
                step_kind: StepKind::MainTask,
                payload: CompletionPayload::TaskSubmit { final_note: None },
            },
            attention_failed: Vec::new(),
        };
        log.append(&sid, done, 1, 1).unwrap();
        log.append(&sid, EventPayload::SessionCompleted, 1, 1).unwrap();
        assert!(matches!(log.append(&sid, EventPayload::ClockTick, 2, 2), Err(LogError::SessionClosed(_))));
    }

    #[test]
    fn server_time_never_decreases() {
        let (_d, log) = log();
        let sid = start(&log, "s");
        log.append(&sid, EventPayload::ClockTick, 0, 500).unwrap();
        let e = log.append(&sid, EventPayload::ClockTick, 0, 100).unwrap();
        assert_eq!(e.server_ts, 500);
    }

    #[test]
    fn reopen_rebuilds_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        let before = {
            let log = EventLog::open(store.clone()).unwrap();
            let sid = start(&log, "s");
            prompt(&log, &sid, "t", "hello");
            chunk(&log, &sid, "t", 0, "partial").unwrap();
            log.timeline(&sid).unwrap()
        };
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path()).unwrap());
        let log = EventLog::open(store).unwrap();
        let sid = SessionId::new("s");
        assert_eq!(log.timeline(&sid).unwrap(), before);
        assert_eq!(log.sessions_of(&StudyId::new("study")), [sid.clone()]);
        // the streaming turn can continue after restart
        chunk(&log, &sid, "t", 1, " more").unwrap();
    }

    #[test]
    fn event_lines_are_self_describing() {
        let (d, log) = log();
        let sid = start(&log, "s");
        prompt(&log, &sid, "t", "hi");
        let text = std::fs::read_to_string(d.path().join("studies/study/events.log")).unwrap();
        let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
        for field in ["event_id", "session_id", "seq", "kind", "payload", "client_ts", "server_ts"] {
            assert!(last.get(field).is_some(), "missing {field}");
        }
        assert_eq!(last["kind"], "prompt_submitted");
        let completed = serde_json::to_value(InteractionEvent {
            event_id: EventId::new("e"),
            session_id: sid,
            seq: 9,
            payload: EventPayload::SessionCompleted,
            client_ts: 0,
            server_ts: 0,
        })
        .unwrap();
        let back: InteractionEvent = serde_json::from_value(completed).unwrap();
        assert_eq!(back.payload, EventPayload::SessionCompleted);
    }
}
