//! JSON import/export of survey instruments and question reordering.

use thiserror::Error;

use super::{validate_instrument, SurveyInstrument};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SurveyError {
    #[error("malformed survey document: {0}")]
    Parse(String),
    #[error("survey document violates the schema: {0}")]
    Schema(String),
    #[error("not a permutation of the current positions")]
    BadPermutation,
}

/// Parses a survey document and checks instrument invariants.
pub fn import_survey_json(text: &[u8]) -> Result<SurveyInstrument, SurveyError> {
    let value: serde_json::Value =
        serde_json::from_slice(text).map_err(|e| SurveyError::Parse(e.to_string()))?;
    let instrument: SurveyInstrument =
        serde_json::from_value(value).map_err(|e| SurveyError::Schema(e.to_string()))?;
    let report = validate_instrument(&instrument, "");
    if let Some(first) = report.issues.first() {
        return Err(SurveyError::Schema(first.to_string()));
    }
    Ok(instrument)
}

pub fn export_survey_json(instrument: &SurveyInstrument) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(instrument).expect("instrument serializes");
    out.push(b'\n');
    out
}

/// Returns a copy whose question `i` is the original question `permutation[i]`.
pub fn reorder_questions(
    instrument: &SurveyInstrument,
    permutation: &[usize],
) -> Result<SurveyInstrument, SurveyError> {
    let n = instrument.questions.len();
    let mut seen = vec![false; n];
    if permutation.len() != n {
        return Err(SurveyError::BadPermutation);
    }
    for &p in permutation {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(SurveyError::BadPermutation);
        }
    }
    Ok(SurveyInstrument {
        survey_id: instrument.survey_id.clone(),
        title: instrument.title.clone(),
        questions: permutation.iter().map(|&p| instrument.questions[p].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnswerType, AnswerValue};

    const ONE_LIKERT: &str = r#"{
        "survey_id": "exp",
        "title": "Experience",
        "questions": [
            {"question_id": "q1", "prompt": "How satisfied were you?",
             "answer_type": {"kind": "likert", "points": 5, "low_anchor": "Not at all", "high_anchor": "Very"},
             "required": true}
        ]
    }"#;

    fn three() -> SurveyInstrument {
        let doc = r#"{"survey_id":"s","title":"","questions":[
            {"question_id":"q1","prompt":"a","answer_type":{"kind":"open_ended"}},
            {"question_id":"q2","prompt":"b","answer_type":{"kind":"open_ended"}},
            {"question_id":"q3","prompt":"c","answer_type":{"kind":"open_ended"}}]}"#;
        import_survey_json(doc.as_bytes()).unwrap()
    }

    fn ids(i: &SurveyInstrument) -> Vec<&str> {
        i.questions.iter().map(|q| q.question_id.as_str()).collect()
    }

    #[test]
    fn imports_one_likert_question() {
        let inst = import_survey_json(ONE_LIKERT.as_bytes()).unwrap();
        assert_eq!(inst.questions.len(), 1);
        assert!(matches!(inst.questions[0].answer_type, AnswerType::Likert { points: 5, .. }));
        assert!(inst.questions[0].required);
    }

    #[test]
    fn export_contains_question_fields() {
        let inst = import_survey_json(ONE_LIKERT.as_bytes()).unwrap();
        let text = String::from_utf8(export_survey_json(&inst)).unwrap();
        assert!(text.contains("\"q1\""));
        assert!(text.contains("How satisfied were you?"));
        assert!(text.contains("\"likert\""));
    }

    #[test]
    fn empty_title_round_trips_as_empty_string() {
        let inst = three();
        let text = String::from_utf8(export_survey_json(&inst)).unwrap();
        assert!(text.contains("\"title\": \"\""));
        assert_eq!(import_survey_json(text.as_bytes()).unwrap(), inst);
    }

    #[test]
    fn export_of_import_is_semantically_equal() {
        let original: serde_json::Value = serde_json::from_str(ONE_LIKERT).unwrap();
        let once = export_survey_json(&import_survey_json(ONE_LIKERT.as_bytes()).unwrap());
        let reparsed: serde_json::Value = serde_json::from_slice(&once).unwrap();
        assert_eq!(original, reparsed);
        // canonical form is a fixed point
        let twice = export_survey_json(&import_survey_json(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn duplicate_ids_are_schema_errors() {
        let doc = r#"{"survey_id":"s","questions":[
            {"question_id":"q1","prompt":"a","answer_type":{"kind":"open_ended"}},
            {"question_id":"q1","prompt":"b","answer_type":{"kind":"open_ended"}}]}"#;
        assert!(matches!(import_survey_json(doc.as_bytes()), Err(SurveyError::Schema(_))));
    }

    #[test]
    fn unknown_answer_type_is_schema_error_and_garbage_is_parse_error() {
        let doc = r#"{"survey_id":"s","questions":[
            {"question_id":"q1","prompt":"a","answer_type":{"kind":"slider"}}]}"#;
        assert!(matches!(import_survey_json(doc.as_bytes()), Err(SurveyError::Schema(_))));
        assert!(matches!(import_survey_json(b"{\"survey_id\":"), Err(SurveyError::Parse(_))));
        let extra = r#"{"survey_id":"s","colour":"red","questions":[
            {"question_id":"q1","prompt":"a","answer_type":{"kind":"open_ended"}}]}"#;
        assert!(matches!(import_survey_json(extra.as_bytes()), Err(SurveyError::Schema(_))));
    }

    #[test]
    fn attention_check_expected_answer_survives() {
        let doc = r#"{"survey_id":"s","questions":[
            {"question_id":"att","prompt":"Pick blue","required":true,
             "answer_type":{"kind":"multiple_choice","options":["red","blue"]},
             "attention_check":{"expected_answer":"blue"}}]}"#;
        let inst = import_survey_json(doc.as_bytes()).unwrap();
        assert_eq!(
            inst.questions[0].attention_check.as_ref().unwrap().expected_answer,
            AnswerValue::Text("blue".into())
        );
    }

    #[test]
    fn reorder_applies_permutation() {
        let inst = three();
        assert_eq!(ids(&reorder_questions(&inst, &[2, 0, 1]).unwrap()), ["q3", "q1", "q2"]);
        assert_eq!(reorder_questions(&inst, &[0, 1, 2]).unwrap(), inst);
        assert_eq!(reorder_questions(&inst, &[0, 0, 1]), Err(SurveyError::BadPermutation));
        assert_eq!(reorder_questions(&inst, &[0, 1]), Err(SurveyError::BadPermutation));
        assert_eq!(reorder_questions(&inst, &[0, 1, 3]), Err(SurveyError::BadPermutation));
    }
}
