use std::collections::BTreeMap;

use super::{
    AnswerType, AttentionCheck, AnswerValue, FlowStep, IntentionTypology, Modality, Question,
    StepKind, StudyConfig, StudySettings, SurveyInstrument, TaskDef,
};
use crate::ids::{QuestionId, StepId, StudyId, SurveyId, TaskId};

fn likert(id: &str, prompt: &str) -> Question {
    Question {
        question_id: QuestionId::new(id),
        prompt: prompt.into(),
        answer_type: AnswerType::Likert {
            points: 5,
            low_anchor: "Strongly disagree".into(),
            high_anchor: "Strongly agree".into(),
        },
        required: true,
        attention_check: None,
    }
}

fn survey(id: &str, title: &str, questions: Vec<Question>) -> (SurveyId, SurveyInstrument) {
    (
        SurveyId::new(id),
        SurveyInstrument { survey_id: SurveyId::new(id), title: title.into(), questions },
    )
}

/// A ready-to-run study with consent followed by the six default steps
/// (background, pre-task, main task, post-task, experience, end of study)
/// and a single task of the given modality.
pub fn default_study(study_id: &str, modality: Modality) -> StudyConfig {
    let task_id = TaskId::new("task1");
    let steps = [
        ("consent", StepKind::Consent, None),
        ("background", StepKind::BackgroundSurvey, Some("background")),
        ("pre_task", StepKind::PreTask, Some("pre_task")),
        ("main_task", StepKind::MainTask, None),
        ("post_task", StepKind::PostTask, Some("post_task")),
        ("experience", StepKind::ExperienceSurvey, Some("experience")),
        ("end", StepKind::EndSurvey, Some("end")),
    ];
    let flow = steps
        .iter()
        .enumerate()
        .map(|(order, (id, kind, survey))| FlowStep {
            step_id: StepId::new(*id),
            kind: *kind,
            enabled: true,
            order,
            reminder_text: None,
            survey_id: survey.map(SurveyId::new),
            task_id: (*kind == StepKind::MainTask).then(|| task_id.clone()),
        })
        .collect();

    let background = vec![
        Question {
            question_id: QuestionId::new("age"),
            prompt: "What is your age?".into(),
            answer_type: AnswerType::OpenEnded { max_length: Some(3) },
            required: true,
            attention_check: None,
        },
        Question {
            question_id: QuestionId::new("education"),
            prompt: "Highest completed education".into(),
            answer_type: AnswerType::MultipleChoice {
                options: vec!["Secondary".into(), "Bachelor".into(), "Master".into(), "Doctorate".into()],
                allow_multiple: false,
            },
            required: true,
            attention_check: None,
        },
    ];
    let mut attention = likert("attention", "To show you are reading, select 2.");
    attention.attention_check = Some(AttentionCheck { expected_answer: AnswerValue::Number(2) });

    let surveys: BTreeMap<_, _> = [
        survey("background", "Background", background),
        survey("pre_task", "Before the task", vec![likert("expectation", "I expect this tool to help me.")]),
        survey("post_task", "After the task", vec![likert("fulfilled", "The tool met my expectations.")]),
        survey(
            "experience",
            "Your experience",
            vec![likert("satisfaction", "Overall I was satisfied."), attention],
        ),
        survey(
            "end",
            "End of study",
            vec![Question {
                question_id: QuestionId::new("comments"),
                prompt: "Any other comments?".into(),
                answer_type: AnswerType::OpenEnded { max_length: None },
                required: false,
                attention_check: None,
            }],
        ),
        survey("in_situ", "Quick check-in", vec![likert("helpful_now", "The last answer was helpful.")]),
    ]
    .into_iter()
    .collect();

    let (title, description) = match modality {
        Modality::Chat => ("Chat task", "Use the assistant to plan a three-day trip to Lisbon."),
        Modality::Search => ("Search task", "Use the search engine to plan a three-day trip to Lisbon."),
    };

    StudyConfig {
        study_id: StudyId::new(study_id),
        title: "Information seeking study".into(),
        settings: StudySettings {
            task_order: vec![task_id.clone()],
            notes_enabled: true,
            min_interactions: 0,
            ..StudySettings::default()
        },
        flow,
        tasks: vec![TaskDef {
            task_id,
            modality,
            title: title.into(),
            description_markdown: description.into(),
        }],
        surveys,
        typology: IntentionTypology::default(),
        trigger_rules: Vec::new(),
        provider_config_ref: "default".into(),
        consent_text: "You are invited to take part in a research study.".into(),
        consent_checkboxes: vec![
            "I have read the information above.".into(),
            "I agree to take part.".into(),
        ],
    }
}
