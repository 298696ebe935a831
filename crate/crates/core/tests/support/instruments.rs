// Random valid survey instruments and a hand-built canonical JSON form.

use echo_core::ids::{QuestionId, SurveyId};
use echo_core::model::{AnswerType, AnswerValue, AttentionCheck, Question, SurveyInstrument};
use proptest::prelude::*;
use serde_json::{json, Map, Value};

fn text() -> impl Strategy<Value = String> {
    "\\PC{0,24}"
}

fn answer_type() -> impl Strategy<Value = AnswerType> {
    prop_oneof![
        (2u8..=11, text(), text()).prop_map(|(points, low_anchor, high_anchor)| AnswerType::Likert {
            points,
            low_anchor,
            high_anchor
        }),
        (prop::collection::btree_set("\\PC{1,12}", 2..6), any::<bool>()).prop_map(|(options, allow_multiple)| {
            AnswerType::MultipleChoice { options: options.into_iter().collect(), allow_multiple }
        }),
        prop::option::of(1u32..500).prop_map(|max_length| AnswerType::OpenEnded { max_length }),
    ]
}

/// An expected answer that is valid for `ty`, picked by `seed`.
fn expected_for(ty: &AnswerType, seed: usize) -> AnswerValue {
    match ty {
        AnswerType::Likert { points, .. } => AnswerValue::Number(1 + (seed % usize::from(*points)) as i64),
        AnswerType::MultipleChoice { options, allow_multiple: false } => {
            AnswerValue::Text(options[seed % options.len()].clone())
        }
        AnswerType::MultipleChoice { options, allow_multiple: true } => {
            let k = 1 + seed % options.len();
            AnswerValue::Choices(options[..k].to_vec())
        }
        AnswerType::OpenEnded { max_length } => {
            let len = max_length.map_or(5, |m| (m as usize).min(5));
            AnswerValue::Text("x".repeat(len))
        }
    }
}

fn question() -> impl Strategy<Value = (String, AnswerType, bool, Option<usize>)> {
    (text(), answer_type(), any::<bool>(), prop::option::weighted(0.3, any::<usize>()))
}

pub fn instrument() -> impl Strategy<Value = SurveyInstrument> {
    ("[a-z][a-z0-9_]{0,10}", text(), prop::collection::vec(question(), 1..12)).prop_map(|(id, title, qs)| {
        let questions = qs
            .into_iter()
            .enumerate()
            .map(|(i, (prompt, answer_type, required, check))| {
                let attention_check =
                    check.map(|seed| AttentionCheck { expected_answer: expected_for(&answer_type, seed) });
                Question { question_id: QuestionId::new(format!("q{i}")), prompt, answer_type, required, attention_check }
            })
            .collect();
        SurveyInstrument { survey_id: SurveyId::new(id), title, questions }
    })
}

fn answer_json(v: &AnswerValue) -> Value {
    match v {
        AnswerValue::Number(n) => json!(n),
        AnswerValue::Text(t) => json!(t),
        AnswerValue::Choices(c) => json!(c),
    }
}

/// The documented survey JSON layout, built field by field.
pub fn canonical(inst: &SurveyInstrument) -> Value {
    let questions: Vec<Value> = inst
        .questions
        .iter()
        .map(|q| {
            let answer_type = match &q.answer_type {
                AnswerType::Likert { points, low_anchor, high_anchor } => {
                    json!({"kind": "likert", "points": points, "low_anchor": low_anchor, "high_anchor": high_anchor})
                }
                AnswerType::MultipleChoice { options, allow_multiple } => {
                    json!({"kind": "multiple_choice", "options": options, "allow_multiple": allow_multiple})
                }
                AnswerType::OpenEnded { max_length } => {
                    let mut m = Map::new();
                    m.insert("kind".into(), json!("open_ended"));
                    if let Some(n) = max_length {
                        m.insert("max_length".into(), json!(n));
                    }
                    Value::Object(m)
                }
            };
            let mut m = Map::new();
            m.insert("question_id".into(), json!(q.question_id.as_str()));
            m.insert("prompt".into(), json!(q.prompt));
            m.insert("answer_type".into(), answer_type);
            m.insert("required".into(), json!(q.required));
            if let Some(check) = &q.attention_check {
                m.insert("attention_check".into(), json!({"expected_answer": answer_json(&check.expected_answer)}));
            }
            Value::Object(m)
        })
        .collect();
    json!({"survey_id": inst.survey_id.as_str(), "title": inst.title, "questions": questions})
}
