//! Agreement between a transcript and the study export.

use std::collections::{BTreeMap, BTreeSet};

use echo_core::export::{CHAT_HISTORY, IN_SITU, REGISTRATION, SEARCH_LOG};
use serde::{Deserialize, Serialize};

use crate::client::{Client, ServiceError};
use crate::runner::SessionTranscript;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportDiff {
    /// Rows belonging to the session, per file.
    pub rows: BTreeMap<String, usize>,
    pub mismatches: Vec<String>,
}

/// Rows of `file` whose session_id is `session`, as column-name maps.
pub fn session_rows(file: &[u8], session: &str) -> Result<Vec<BTreeMap<String, String>>, csv::Error> {
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let row: BTreeMap<String, String> =
            headers.iter().zip(record?.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect();
        if row.get("session_id").map(String::as_str) == Some(session) {
            out.push(row);
        }
    }
    Ok(out)
}

fn distinct(rows: &[BTreeMap<String, String>], column: &str, keep: impl Fn(&BTreeMap<String, String>) -> bool) -> usize {
    rows.iter().filter(|r| keep(r)).filter_map(|r| r.get(column)).collect::<BTreeSet<_>>().len()
}

fn nonempty(column: &'static str) -> impl Fn(&BTreeMap<String, String>) -> bool {
    move |r| r.get(column).is_some_and(|v| !v.is_empty())
}

/// Compares transcript counts with the export files given by name.
pub fn diff_files(files: &BTreeMap<String, Vec<u8>>, transcript: &SessionTranscript) -> ExportDiff {
    let mut diff = ExportDiff::default();
    let session = transcript.session_id.as_str();
    let mut rows = |name: &str| -> Vec<BTreeMap<String, String>> {
        let parsed = match files.get(name).map(|f| session_rows(f, session)) {
            Some(Ok(r)) => r,
            Some(Err(e)) => {
                diff.mismatches.push(format!("{name} does not parse: {e}"));
                Vec::new()
            }
            None => {
                diff.mismatches.push(format!("{name} is missing"));
                Vec::new()
            }
        };
        diff.rows.insert(name.to_string(), parsed.len());
        parsed
    };
    let registration = rows(REGISTRATION);
    let chat = rows(CHAT_HISTORY);
    let search = rows(SEARCH_LOG);
    let in_situ = rows(IN_SITU);

    let c = &transcript.counts;
    let mut check = |what: &str, exported: usize, expected: usize| {
        if exported != expected {
            diff.mismatches.push(format!("{what}: export has {exported}, transcript has {expected}"));
        }
    };
    check("registration rows", registration.len(), 1);
    check("completed sessions", distinct(&registration, "session_id", nonempty("completed_ms")), usize::from(transcript.completed));
    check("chat turns", chat.len(), c.turns);
    check("queries", distinct(&search, "query_id", |_| true), c.queries);
    check("clicks", search.iter().filter(|r| nonempty("clicked_url")(r)).count(), c.clicks);
    check("popups fired", distinct(&in_situ, "instance_id", |_| true), c.popups_fired);
    check("popups answered", distinct(&in_situ, "instance_id", nonempty("response_id")), c.popups_answered);
    diff
}

/// Downloads the export of the transcript's study and compares it.
pub async fn compare_export(client: &Client, admin_token: &str, transcript: &SessionTranscript) -> Result<ExportDiff, ServiceError> {
    let mut files = BTreeMap::new();
    for name in [REGISTRATION, CHAT_HISTORY, SEARCH_LOG, IN_SITU] {
        let path = format!("/api/admin/studies/{}/export/{name}", transcript.study_id);
        files.insert(name.to_string(), client.bytes(&path, admin_token).await?);
    }
    Ok(diff_files(&files, transcript))
}
