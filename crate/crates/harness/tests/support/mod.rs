#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use echo_core::model::{default_study, Modality, StudyConfig};
use echo_harness::{BehaviorScript, Client};
use echo_server::api::{CreateStudy, StudyDoc};
use echo_server::{serve, ServiceConfig, StudyService};
use tokio::sync::oneshot;

pub const ADMIN_USER: &str = "root";
pub const ADMIN_PASSWORD: &str = "correct horse";

/// A test-mode service running inside this process.
pub struct Served {
    pub client: Client,
    pub admin: String,
    pub service: Arc<StudyService>,
    stop: oneshot::Sender<()>,
    task: tokio::task::JoinHandle<()>,
}

pub async fn serve_in_process(root: &Path) -> Served {
    let mut config = ServiceConfig::new(root, "acceptance secret");
    config.test_mode = true;
    let service = Arc::new(StudyService::open(&config).expect("service opens"));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
    let client = Client::new(format!("http://{}", listener.local_addr().unwrap()));
    let (stop, stopped) = oneshot::channel::<()>();
    let served = service.clone();
    let task = tokio::spawn(async move {
        let _ = serve(listener, served, async {
            let _ = stopped.await;
        })
        .await;
    });
    let admin = client.admin_token(ADMIN_USER, ADMIN_PASSWORD).await.expect("admin account");
    Served { client, admin, service, stop, task }
}

impl Served {
    pub async fn shutdown(self) {
        let _ = self.stop.send(());
        let _ = self.task.await;
    }

    pub async fn seed(&self, config: &StudyConfig) {
        let body = CreateStudy { config: Some(config.clone()), study_id: None, template: None };
        let _: StudyDoc = self.client.post("/api/admin/studies", Some(&self.admin), &body).await.expect("study created");
    }
}

pub fn study(id: &str, modality: Modality, min_interactions: u32) -> StudyConfig {
    let mut config = default_study(id, modality);
    config.settings.min_interactions = min_interactions;
    config
}

pub const CONSENT_AND_PRE_TASK: &str = r#"
{"action": "advance"}
{"action": "answer_survey", "answers": {"age": "34", "education": "Master"}}
{"action": "answer_survey", "answers": {"expectation": 4}}
"#;

pub const POST_TASK: &str = r#"
{"action": "answer_survey", "answers": {"fulfilled": 4}}
{"action": "answer_survey", "answers": {"satisfaction": 5, "attention": 2}}
{"action": "answer_survey", "answers": {"comments": "Thanks, \"great\" study,\nreally"}}
"#;

/// Consent, surveys and `task` in between.
pub fn full_script(task: &str) -> BehaviorScript {
    BehaviorScript::parse(&format!("{CONSENT_AND_PRE_TASK}{task}{POST_TASK}")).expect("script parses")
}
