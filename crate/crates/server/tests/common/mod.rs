#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use echo_core::model::{default_study, Modality, StudyConfig};
use echo_core::provider::SseDecoder;
use echo_server::api::ChatFrame;
use echo_server::{serve, ServiceConfig, StudyService};
use reqwest::{Method, StatusCode};
use serde_json::{json, Value};
use tokio::sync::oneshot;

pub struct TestServer {
    pub base: String,
    pub http: reqwest::Client,
    pub service: Arc<StudyService>,
    stop: Option<oneshot::Sender<()>>,
    task: Option<tokio::task::JoinHandle<()>>,
}

pub async fn start(root: &Path, test_mode: bool) -> TestServer {
    let mut config = ServiceConfig::new(root, "test secret");
    config.test_mode = test_mode;
    let service = Arc::new(StudyService::open(&config).expect("service opens"));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (stop, stopped) = oneshot::channel::<()>();
    let served = service.clone();
    let task = tokio::spawn(async move {
        let _ = serve(listener, served, async {
            let _ = stopped.await;
        })
        .await;
    });
    TestServer { base, http: reqwest::Client::new(), service, stop: Some(stop), task: Some(task) }
}

impl TestServer {
    pub async fn stop(mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.task.take() {
            let _ = t.await;
        }
    }

    pub async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().await.expect("request sent");
        let status = resp.status();
        let bytes = resp.bytes().await.unwrap();
        let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, value)
    }

    pub async fn get(&self, path: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }

    /// Runs first-time setup and returns an admin token.
    pub async fn admin(&self) -> String {
        let (status, body) =
            self.call(Method::POST, "/api/setup", None, Some(json!({"username": "root", "password": "hunter22!"}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["token"].as_str().unwrap().to_string()
    }

    pub async fn create_study(&self, admin: &str, config: &StudyConfig) {
        let (status, body) = self.post("/api/admin/studies", admin, json!({ "config": config })).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
    }

    /// Registers a participant and returns their token.
    pub async fn register(&self, study_id: &str) -> String {
        let (status, body) =
            self.call(Method::POST, "/api/participant/register", None, Some(json!({"study_id": study_id}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["token"].as_str().unwrap().to_string()
    }

    /// Sends a prompt and collects every frame of the reply.
    pub async fn chat(&self, token: &str, prompt: &str) -> Result<Vec<ChatFrame>, (StatusCode, Value)> {
        let resp = self
            .http
            .post(format!("{}/api/session/chat", self.base))
            .bearer_auth(token)
            .json(&json!({"prompt": prompt, "typing_start_ms": 0, "typing_end_ms": 10}))
            .send()
            .await
            .unwrap();
        let status = resp.status();
        let bytes = resp.bytes().await.unwrap();
        if status != StatusCode::OK {
            return Err((status, serde_json::from_slice(&bytes).unwrap_or(Value::Null)));
        }
        let mut decoder = SseDecoder::default();
        let mut data = decoder.feed(&bytes);
        data.extend(decoder.finish());
        Ok(data.iter().map(|d| serde_json::from_str(d).expect("frame parses")).collect())
    }

    /// Walks consent and the surveys before the main task.
    pub async fn reach_task(&self, token: &str) {
        let steps = [
            ("/api/session/consent", json!({"checked": [true, true]})),
            ("/api/session/survey", json!({"answers": {"age": "30", "education": "Bachelor"}})),
            ("/api/session/survey", json!({"answers": {"expectation": 4}})),
        ];
        for (path, body) in steps {
            let (status, resp) = self.post(path, token, body).await;
            assert_eq!(status, StatusCode::OK, "{path}: {resp}");
        }
    }

    /// Answers every survey after the main task.
    pub async fn finish_surveys(&self, token: &str) {
        for answers in [json!({"fulfilled": 4}), json!({"satisfaction": 5, "attention": 2}), json!({})] {
            let (status, resp) = self.post("/api/session/survey", token, json!({ "answers": answers })).await;
            assert_eq!(status, StatusCode::OK, "{resp}");
        }
    }
}

pub fn chat_study(id: &str, min_interactions: u32) -> StudyConfig {
    let mut config = default_study(id, Modality::Chat);
    config.settings.min_interactions = min_interactions;
    config
}
