//! Study data as CSV datasets.
//!
//! Every file has a header row. Rows are ordered by session id, then by the
//! sequence number of the event that produced them. Each timestamp column
//! `*_ms` (epoch milliseconds) has an `*_iso` companion (ISO-8601 UTC),
//! appended after the fixed columns.

mod csv;

use std::collections::BTreeMap;
use std::io::{Cursor, Write};

pub use self::csv::{csv_encode, WidthMismatch};

use crate::ids::{Millis, QuestionId};
use crate::log::{SessionView, TurnStatus};
use crate::model::{AnswerValue, StepKind, StudyConfig};

pub const REGISTRATION: &str = "registration.csv";
pub const DEMOGRAPHICS: &str = "demographics.csv";
pub const PRE_TASK: &str = "pre_task.csv";
pub const POST_TASK: &str = "post_task.csv";
pub const CHAT_HISTORY: &str = "chat_history.csv";
pub const SEARCH_LOG: &str = "search_log.csv";
pub const IN_SITU: &str = "in_situ.csv";
pub const NOTES: &str = "notes.csv";

pub const FILE_NAMES: [&str; 8] =
    [REGISTRATION, DEMOGRAPHICS, PRE_TASK, POST_TASK, CHAT_HISTORY, SEARCH_LOG, IN_SITU, NOTES];

pub const REGISTRATION_COLUMNS: &[&str] = &[
    "participant_id",
    "session_id",
    "study_id",
    "external_label",
    "started_ms",
    "consented_ms",
    "completed_ms",
    "started_iso",
    "consented_iso",
    "completed_iso",
];

pub const SURVEY_COLUMNS: &[&str] = &[
    "participant_id",
    "session_id",
    "step_id",
    "survey_kind",
    "survey_id",
    "question_id",
    "answer",
    "attention_check_failed",
    "submitted_ms",
    "submitted_iso",
];

pub const CHAT_COLUMNS: &[&str] = &[
    "participant_id",
    "session_id",
    "task_id",
    "turn_id",
    "turn_index",
    "prompt_text",
    "typing_start_ms",
    "typing_end_ms",
    "submitted_ms",
    "response_text",
    "response_completed_ms",
    "turn_rating",
    "trajectory_rating",
    "response_status",
    "typing_start_iso",
    "typing_end_iso",
    "submitted_iso",
    "response_completed_iso",
];

pub const SEARCH_COLUMNS: &[&str] = &[
    "participant_id",
    "session_id",
    "task_id",
    "query_id",
    "query_text",
    "typing_start_ms",
    "typing_end_ms",
    "issued_ms",
    "result_count",
    "clicked_url",
    "clicked_rank",
    "clicked_ms",
    "typing_start_iso",
    "typing_end_iso",
    "issued_iso",
    "clicked_iso",
];

pub const IN_SITU_COLUMNS: &[&str] = &[
    "participant_id",
    "session_id",
    "task_id",
    "instance_id",
    "rule_id",
    "survey_id",
    "response_id",
    "question_id",
    "answer",
    "fired_ms",
    "answered_ms",
    "fired_iso",
    "answered_iso",
];

pub const NOTES_COLUMNS: &[&str] =
    &["participant_id", "session_id", "task_id", "note_text", "updated_ms", "updated_iso"];

/// Which survey file a step kind's answers go to.
pub fn survey_file(kind: StepKind) -> Option<&'static str> {
    match kind {
        StepKind::BackgroundSurvey => Some(DEMOGRAPHICS),
        StepKind::PreTask => Some(PRE_TASK),
        StepKind::PostTask | StepKind::ExperienceSurvey | StepKind::EndSurvey | StepKind::CustomSurvey => {
            Some(POST_TASK)
        }
        StepKind::Consent | StepKind::MainTask => None,
    }
}

pub fn iso(ms: Millis) -> String {
    chrono::DateTime::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_default()
}

fn opt_ms(ms: Option<Millis>) -> (String, String) {
    ms.map_or((String::new(), String::new()), |m| (m.to_string(), iso(m)))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExportBundle {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl ExportBundle {
    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    /// ZIP archive of the files. Entries carry a fixed timestamp so equal
    /// bundles produce equal archives.
    pub fn to_zip(&self) -> std::io::Result<Vec<u8>> {
        use zip::write::SimpleFileOptions;
        let options = SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated)
            .last_modified_time(zip::DateTime::default())
            .unix_permissions(0o644);
        let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
        for name in FILE_NAMES {
            zip.start_file(name, options).map_err(std::io::Error::other)?;
            zip.write_all(self.files.get(name).map_or(&[][..], Vec::as_slice))?;
        }
        Ok(zip.finish().map_err(std::io::Error::other)?.into_inner())
    }
}

fn encode(header: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    csv_encode(header, &rows).expect("export rows match their header")
}

/// Builds the eight datasets from the sessions' materialized views.
pub fn build_bundle(config: &StudyConfig, sessions: &[SessionView]) -> ExportBundle {
    let mut sessions: Vec<&SessionView> = sessions.iter().collect();
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));

    let mut registration = Vec::new();
    let mut surveys: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    let mut chat = Vec::new();
    let mut search = Vec::new();
    let mut in_situ: Vec<(u64, Vec<Vec<String>>)> = Vec::new();
    let mut notes = Vec::new();

    for s in sessions {
        let pid = s.participant_id.to_string();
        let sid = s.session_id.to_string();
        let (consented, consented_iso) = opt_ms(s.consented_ms);
        let (completed, completed_iso) = opt_ms(s.completed_ms);
        registration.push(vec![
            pid.clone(),
            sid.clone(),
            s.study_id.to_string(),
            s.external_label.clone().unwrap_or_default(),
            s.started_ms.to_string(),
            consented,
            completed,
            iso(s.started_ms),
            consented_iso,
            completed_iso,
        ]);

        for sub in &s.surveys {
            let Some(file) = survey_file(sub.step_kind) else { continue };
            let rows = surveys.entry(file).or_default();
            for (qid, answer) in &sub.answers {
                rows.push(vec![
                    pid.clone(),
                    sid.clone(),
                    sub.step_id.to_string(),
                    sub.step_kind.as_str().to_string(),
                    sub.survey_id.as_ref().map(ToString::to_string).unwrap_or_default(),
                    qid.to_string(),
                    answer.to_export_string(),
                    sub.attention_failed.contains(qid).to_string(),
                    sub.submitted_ms.to_string(),
                    iso(sub.submitted_ms),
                ]);
            }
        }

        for t in &s.turns {
            let (done, done_iso) = opt_ms(t.response_completed_ms);
            chat.push(vec![
                pid.clone(),
                sid.clone(),
                t.task_id.to_string(),
                t.turn_id.to_string(),
                t.turn_index.to_string(),
                t.prompt_text.clone(),
                t.typing_start_ms.to_string(),
                t.typing_end_ms.to_string(),
                t.submitted_ms.to_string(),
                t.response_text.clone(),
                done,
                t.turn_rating.map(|r| r.to_string()).unwrap_or_default(),
                s.trajectory_ratings.get(&t.task_id).map(|r| r.to_string()).unwrap_or_default(),
                match t.status {
                    TurnStatus::Streaming => "streaming",
                    TurnStatus::Completed => "completed",
                    TurnStatus::Failed => "failed",
                    TurnStatus::Cancelled => "cancelled",
                }
                .to_string(),
                iso(t.typing_start_ms),
                iso(t.typing_end_ms),
                iso(t.submitted_ms),
                done_iso,
            ]);
        }

        for q in &s.queries {
            let base = |url: String, rank: String, clicked: String, clicked_iso: String| {
                vec![
                    pid.clone(),
                    sid.clone(),
                    q.task_id.to_string(),
                    q.query_id.to_string(),
                    q.query_text.clone(),
                    q.typing_start_ms.to_string(),
                    q.typing_end_ms.to_string(),
                    q.issued_ms.to_string(),
                    q.result_count.to_string(),
                    url,
                    rank,
                    clicked,
                    iso(q.typing_start_ms),
                    iso(q.typing_end_ms),
                    iso(q.issued_ms),
                    clicked_iso,
                ]
            };
            if q.clicks.is_empty() {
                search.push(base(String::new(), String::new(), String::new(), String::new()));
            }
            for c in &q.clicks {
                search.push(base(c.url.clone(), c.rank.to_string(), c.clicked_ms.to_string(), iso(c.clicked_ms)));
            }
        }

        let mut answered: Vec<_> = s.popups.iter().filter_map(|p| p.answer.as_ref().map(|a| (p, a))).collect();
        answered.sort_by_key(|(_, a)| a.seq);
        for (p, a) in answered {
            let question_ids: Vec<QuestionId> = match config.survey(&p.fired.survey_id) {
                Some(inst) => {
                    let mut ids: Vec<QuestionId> = inst.questions.iter().map(|q| q.question_id.clone()).collect();
                    ids.extend(a.answers.keys().filter(|k| !ids.contains(k)).cloned().collect::<Vec<_>>());
                    ids
                }
                None => a.answers.keys().cloned().collect(),
            };
            let rows = question_ids
                .iter()
                .map(|qid| {
                    vec![
                        pid.clone(),
                        sid.clone(),
                        p.fired.task_id.as_ref().map(ToString::to_string).unwrap_or_default(),
                        p.fired.instance_id.to_string(),
                        p.fired.rule_id.to_string(),
                        p.fired.survey_id.to_string(),
                        a.response_id.to_string(),
                        qid.to_string(),
                        a.answers.get(qid).map(AnswerValue::to_export_string).unwrap_or_default(),
                        p.fired.fired_at.to_string(),
                        a.answered_ms.to_string(),
                        iso(p.fired.fired_at),
                        iso(a.answered_ms),
                    ]
                })
                .collect();
            in_situ.push((a.seq, rows));
        }

        for n in s.notes.values() {
            notes.push(vec![pid.clone(), sid.clone(), n.task_id.to_string(), n.text.clone(), n.updated_ms.to_string(), iso(n.updated_ms)]);
        }
    }

    let mut files = BTreeMap::new();
    files.insert(REGISTRATION.to_string(), encode(REGISTRATION_COLUMNS, registration));
    for name in [DEMOGRAPHICS, PRE_TASK, POST_TASK] {
        files.insert(name.to_string(), encode(SURVEY_COLUMNS, surveys.remove(name).unwrap_or_default()));
    }
    files.insert(CHAT_HISTORY.to_string(), encode(CHAT_COLUMNS, chat));
    files.insert(SEARCH_LOG.to_string(), encode(SEARCH_COLUMNS, search));
    files.insert(IN_SITU.to_string(), encode(IN_SITU_COLUMNS, in_situ.into_iter().flat_map(|(_, r)| r).collect()));
    files.insert(NOTES.to_string(), encode(NOTES_COLUMNS, notes));
    ExportBundle { files }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_study, Modality};

    #[test]
    fn no_sessions_gives_eight_header_only_files() {
        let cfg = default_study("s", Modality::Chat);
        let bundle = build_bundle(&cfg, &[]);
        assert_eq!(bundle.files.len(), 8);
        for name in FILE_NAMES {
            let text = String::from_utf8(bundle.files[name].clone()).unwrap();
            assert_eq!(text.matches("\r\n").count(), 1, "{name}");
        }
        assert!(String::from_utf8_lossy(&bundle.files[CHAT_HISTORY]).starts_with(
            "participant_id,session_id,task_id,turn_id,turn_index,prompt_text,typing_start_ms,typing_end_ms,\
             submitted_ms,response_text,response_completed_ms,turn_rating,trajectory_rating,"
        ));
        assert!(String::from_utf8_lossy(&bundle.files[SEARCH_LOG]).starts_with(
            "participant_id,session_id,task_id,query_id,query_text,typing_start_ms,typing_end_ms,issued_ms,\
             result_count,clicked_url,clicked_rank,clicked_ms,"
        ));
    }

    #[test]
    fn iso_is_utc_with_millis() {
        assert_eq!(iso(0), "1970-01-01T00:00:00.000Z");
        assert_eq!(iso(1_700_000_000_123), "2023-11-14T22:13:20.123Z");
    }

    #[test]
    fn zip_is_deterministic() {
        let cfg = default_study("s", Modality::Chat);
        let bundle = build_bundle(&cfg, &[]);
        assert_eq!(bundle.to_zip().unwrap(), bundle.to_zip().unwrap());
    }
}
