//! HTTP routing. Every handler resolves its principal first; admin routes
//! refuse participant tokens and participant routes refuse admin tokens.

mod admin;
mod participant;

use std::sync::Arc;

use axum::extract::State;
use axum::http::header::AUTHORIZATION;
use axum::http::HeaderMap;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use crate::api::{Credentials, SetupStatus, TokenResponse};
use crate::auth::Principal;
use crate::error::ApiError;
use crate::service::StudyService;

pub type Svc = State<Arc<StudyService>>;

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers.get(AUTHORIZATION)?.to_str().ok()?.strip_prefix("Bearer ").map(str::trim)
}

pub(crate) fn admin(svc: &StudyService, headers: &HeaderMap) -> Result<String, ApiError> {
    match svc.authenticate(bearer(headers))? {
        Principal::Admin { username } => Ok(username),
        Principal::Participant { .. } => Err(ApiError::forbidden()),
    }
}

pub(crate) fn participant(svc: &StudyService, headers: &HeaderMap) -> Result<Principal, ApiError> {
    match svc.authenticate(bearer(headers))? {
        p @ Principal::Participant { .. } => Ok(p),
        Principal::Admin { .. } => Err(ApiError::forbidden()),
    }
}

async fn health(State(svc): Svc) -> Json<Value> {
    Json(json!({ "status": "ready", "test_mode": svc.is_test_mode() }))
}

async fn setup_status(State(svc): Svc) -> Result<Json<SetupStatus>, ApiError> {
    Ok(Json(SetupStatus { setup_required: svc.setup_required()? }))
}

async fn setup(State(svc): Svc, Json(body): Json<Credentials>) -> Result<Json<TokenResponse>, ApiError> {
    Ok(Json(svc.setup(&body).await?))
}

async fn login(State(svc): Svc, Json(body): Json<Credentials>) -> Result<Json<TokenResponse>, ApiError> {
    Ok(Json(svc.admin_login(&body)?))
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/setup", get(setup_status).post(setup))
        .route("/api/admin/login", post(login))
        .merge(admin::routes())
        .merge(participant::routes())
        .with_state(service)
}
