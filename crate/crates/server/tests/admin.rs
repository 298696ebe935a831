mod common;

use echo_core::model::{default_study, Modality};
use reqwest::{Method, StatusCode};
use serde_json::json;

#[tokio::test(flavor = "multi_thread")]
async fn setup_is_allowed_once_and_login_works() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(dir.path(), false).await;
    let (s, health) = server.call(Method::GET, "/api/health", None, None).await;
    assert_eq!((s, health["status"].as_str()), (StatusCode::OK, Some("ready")));
    let (_, status) = server.call(Method::GET, "/api/setup", None, None).await;
    assert_eq!(status["setup_required"], json!(true));

    let token = server.admin().await;
    let (_, status) = server.call(Method::GET, "/api/setup", None, None).await;
    assert_eq!(status["setup_required"], json!(false));
    let again = json!({"username": "other", "password": "password123"});
    let (s, body) = server.call(Method::POST, "/api/setup", None, Some(again)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{body}");

    let bad = json!({"username": "root", "password": "nope nope"});
    assert_eq!(server.call(Method::POST, "/api/admin/login", None, Some(bad)).await.0, StatusCode::UNAUTHORIZED);
    let good = json!({"username": "root", "password": "hunter22!"});
    let (s, body) = server.call(Method::POST, "/api/admin/login", None, Some(good)).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(body["token"].as_str().unwrap(), token);

    // production mode refuses clock control
    let (s, _) = server.post("/api/admin/clock", &token, json!({"advance_ms": 1000})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    server.stop().await;

    // accounts survive a restart; tokens do not
    let server = common::start(dir.path(), false).await;
    assert_eq!(server.get("/api/admin/studies", &token).await.0, StatusCode::UNAUTHORIZED);
    let (_, status) = server.call(Method::GET, "/api/setup", None, None).await;
    assert_eq!(status["setup_required"], json!(false));
}

#[tokio::test(flavor = "multi_thread")]
async fn study_crud_and_config_edits() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(dir.path(), false).await;
    let admin = server.admin().await;

    let (s, created) = server.post("/api/admin/studies", &admin, json!({"study_id": "s1", "template": "search"})).await;
    assert_eq!(s, StatusCode::CREATED, "{created}");
    assert_eq!(created["config"]["tasks"][0]["modality"], json!("search"));
    let (s, _) = server.post("/api/admin/studies", &admin, json!({"study_id": "s1"})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let mut broken = default_study("bad", Modality::Chat);
    broken.flow[1].survey_id = Some(echo_core::ids::SurveyId::new("missing"));
    let (s, body) = server.post("/api/admin/studies", &admin, json!({"config": broken})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!body["issues"].as_array().unwrap().is_empty());

    // stale version is a conflict
    let (_, doc) = server.get("/api/admin/studies/s1", &admin).await;
    let version = doc["version"].as_u64().unwrap();
    let mut config = doc["config"].clone();
    config["title"] = json!("Renamed");
    let put = json!({"version": version, "config": config});
    assert_eq!(server.call(Method::PUT, "/api/admin/studies/s1", Some(&admin), Some(put.clone())).await.0, StatusCode::OK);
    assert_eq!(server.call(Method::PUT, "/api/admin/studies/s1", Some(&admin), Some(put)).await.0, StatusCode::CONFLICT);

    // flow reorder and toggle
    let order = json!({"step_ids": ["consent", "pre_task", "background", "main_task", "post_task", "experience", "end"]});
    let (s, doc) = server.post("/api/admin/studies/s1/flow/reorder", &admin, order).await;
    assert_eq!(s, StatusCode::OK, "{doc}");
    let patch = json!({"enabled": false, "reminder_text": "Take your time"});
    let (s, doc) = server.call(Method::PATCH, "/api/admin/studies/s1/flow/experience", Some(&admin), Some(patch)).await;
    assert_eq!(s, StatusCode::OK, "{doc}");
    let experience = doc["config"]["flow"].as_array().unwrap().iter().find(|s| s["step_id"] == "experience").unwrap();
    assert_eq!((experience["enabled"].clone(), experience["reminder_text"].clone()), (json!(false), json!("Take your time")));

    // survey export, import, reorder, delete
    let exported = server
        .http
        .get(format!("{}/api/admin/studies/s1/surveys/background/export", server.base))
        .bearer_auth(&admin)
        .send()
        .await
        .unwrap()
        .text()
        .await
        .unwrap();
    let mut survey: serde_json::Value = serde_json::from_str(&exported).unwrap();
    survey["survey_id"] = json!("background_copy");
    let resp = server
        .http
        .post(format!("{}/api/admin/studies/s1/surveys/import", server.base))
        .bearer_auth(&admin)
        .body(survey.to_string())
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let (s, doc) = server.post("/api/admin/studies/s1/surveys/background_copy/reorder", &admin, json!({"permutation": [1, 0]})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(doc["config"]["surveys"]["background_copy"]["questions"][0]["question_id"], json!("education"));
    let (s, _) = server.post("/api/admin/studies/s1/surveys/background_copy/reorder", &admin, json!({"permutation": [0, 0]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let resp = server
        .http
        .post(format!("{}/api/admin/studies/s1/surveys/import", server.base))
        .bearer_auth(&admin)
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = server.call(Method::DELETE, "/api/admin/studies/s1/surveys/background_copy", Some(&admin), None).await;
    assert_eq!(s, StatusCode::OK);
    // a survey the flow still uses cannot go
    let (s, _) = server.call(Method::DELETE, "/api/admin/studies/s1/surveys/background", Some(&admin), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    // typology and trigger rules
    let typology = json!({"categories": [{"category_id": "learn", "label": "Learning", "description": ""}]});
    let (s, body) = server.call(Method::PUT, "/api/admin/studies/s1/typology", Some(&admin), Some(typology)).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let rule = json!({"rule_id": "r1", "survey_id": "in_situ", "condition": {"kind": "after_n_queries", "n": 3}});
    assert_eq!(server.post("/api/admin/studies/s1/trigger-rules", &admin, rule.clone()).await.0, StatusCode::OK);
    assert_eq!(server.post("/api/admin/studies/s1/trigger-rules", &admin, rule).await.0, StatusCode::CONFLICT);
    let (_, rules) = server.get("/api/admin/studies/s1/trigger-rules", &admin).await;
    assert_eq!(rules.as_array().unwrap().len(), 1);
    let (s, _) = server.call(Method::DELETE, "/api/admin/studies/s1/trigger-rules/r1", Some(&admin), None).await;
    assert_eq!(s, StatusCode::OK);

    // a study with sessions cannot be deleted
    server.register("s1").await;
    let (s, _) = server.call(Method::DELETE, "/api/admin/studies/s1", Some(&admin), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, list) = server.get("/api/admin/studies", &admin).await;
    assert_eq!(list[0]["sessions"], json!(1));
}

#[tokio::test(flavor = "multi_thread")]
async fn providers_and_credentials() {
    let dir = tempfile::tempdir().unwrap();
    let server = common::start(dir.path(), false).await;
    let admin = server.admin().await;

    let (s, config) = server.get("/api/admin/providers/default", &admin).await;
    assert_eq!(s, StatusCode::OK);
    let (s, report) = server.post("/api/admin/providers/default/verify", &admin, json!({})).await;
    assert_eq!(s, StatusCode::OK, "{report}");
    assert_eq!(report["llm"]["status"], json!("ok"), "{report}");
    let (s, _) = server.call(Method::PUT, "/api/admin/providers/default", Some(&admin), Some(config)).await;
    assert_eq!(s, StatusCode::OK);

    let key = "sk-plaintext-marker-0123456789";
    let (s, _) = server.call(Method::PUT, "/api/admin/credentials/openai", Some(&admin), Some(json!({"api_key": key}))).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (_, refs) = server.get("/api/admin/credentials", &admin).await;
    assert_eq!(refs, json!(["openai"]));
    assert!(!tree_contains(dir.path(), key.as_bytes()), "api key stored in plain text");
    let (s, _) = server.call(Method::DELETE, "/api/admin/credentials/openai", Some(&admin), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = server.call(Method::DELETE, "/api/admin/credentials/openai", Some(&admin), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

fn tree_contains(dir: &std::path::Path, needle: &[u8]) -> bool {
    std::fs::read_dir(dir).unwrap().flatten().any(|entry| {
        let path = entry.path();
        if path.is_dir() {
            tree_contains(&path, needle)
        } else {
            std::fs::read(&path).unwrap().windows(needle.len()).any(|w| w == needle)
        }
    })
}
