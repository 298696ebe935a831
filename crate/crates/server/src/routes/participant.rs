use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::HeaderMap;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};

use super::{participant, Svc};
use crate::api::*;
use crate::error::ApiError;
use crate::service::StudyService;

type Out<T> = Result<Json<T>, ApiError>;

async fn register(State(svc): Svc, Json(body): Json<RegisterRequest>) -> Out<RegisterResponse> {
    Ok(Json(svc.register(&body).await?))
}

async fn login(State(svc): Svc, Json(body): Json<LoginRequest>) -> Out<RegisterResponse> {
    Ok(Json(svc.participant_login(&body)?))
}

async fn state(State(svc): Svc, h: HeaderMap) -> Out<ParticipantState> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.state(&p).await?))
}

async fn consent(State(svc): Svc, h: HeaderMap, Json(body): Json<ConsentRequest>) -> Out<AdvanceResponse> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.submit_consent(&p, body).await?))
}

async fn survey(State(svc): Svc, h: HeaderMap, Json(body): Json<SurveyRequest>) -> Out<AdvanceResponse> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.submit_survey(&p, body).await?))
}

async fn submit_task(State(svc): Svc, h: HeaderMap, body: Option<Json<SubmitTaskRequest>>) -> Out<AdvanceResponse> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.submit_task(&p, body.map(|b| b.0).unwrap_or_default()).await?))
}

/// Streams the reply as server-sent events named after the frame kind.
async fn chat(State(svc): Svc, h: HeaderMap, Json(body): Json<ChatRequest>) -> Result<impl IntoResponse, ApiError> {
    let p = participant(&svc, &h)?;
    let rx = svc.chat(&p, body).await?;
    let frames = futures::stream::unfold(rx, |mut rx| async move {
        let frame = rx.recv().await?;
        let event = Event::default().event(frame.name()).json_data(&frame).expect("frames serialize");
        Some((Ok::<_, Infallible>(event), rx))
    });
    Ok(Sse::new(frames).keep_alive(KeepAlive::default()))
}

async fn rate_turn(State(svc): Svc, h: HeaderMap, Path(turn_id): Path<String>, Json(body): Json<RatingRequest>) -> Out<Ack> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.rate_turn(&p, &turn_id, body).await?))
}

async fn rate_trajectory(State(svc): Svc, h: HeaderMap, Json(body): Json<TrajectoryRequest>) -> Out<Ack> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.rate_trajectory(&p, body).await?))
}

async fn search(State(svc): Svc, h: HeaderMap, Json(body): Json<SearchRequest>) -> Out<SearchResponse> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.search(&p, body).await?))
}

async fn click(State(svc): Svc, h: HeaderMap, Json(body): Json<ClickRequest>) -> Out<Ack> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.click(&p, body).await?))
}

async fn note(State(svc): Svc, h: HeaderMap, Json(body): Json<NoteRequest>) -> Out<Ack> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.save_note(&p, body).await?))
}

async fn answer_popup(
    State(svc): Svc,
    h: HeaderMap,
    Path(instance_id): Path<String>,
    Json(body): Json<PopupAnswerRequest>,
) -> Out<PopupAnswerResponse> {
    let p = participant(&svc, &h)?;
    Ok(Json(svc.answer_popup(&p, &instance_id, body).await?))
}

pub(super) fn routes() -> Router<Arc<StudyService>> {
    Router::new()
        .route("/api/participant/register", post(register))
        .route("/api/participant/login", post(login))
        .route("/api/session/state", get(state))
        .route("/api/session/consent", post(consent))
        .route("/api/session/survey", post(survey))
        .route("/api/session/submit-task", post(submit_task))
        .route("/api/session/chat", post(chat))
        .route("/api/session/turns/{turn_id}/rating", post(rate_turn))
        .route("/api/session/trajectory-rating", post(rate_trajectory))
        .route("/api/session/search", post(search))
        .route("/api/session/click", post(click))
        .route("/api/session/note", post(note))
        .route("/api/session/popups/{instance_id}", post(answer_popup))
}
