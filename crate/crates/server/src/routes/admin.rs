use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use echo_core::export::FILE_NAMES;
use echo_core::ids::{RuleId, StepId, SurveyId};
use echo_core::log::{InteractionEvent, SessionView};
use echo_core::model::{export_survey_json, import_survey_json, reorder_questions, StudyConfig, SurveyInstrument};
use echo_core::provider::{ProviderConfig, VerifyReport};
use echo_core::trigger::TriggerRule;

use super::{admin, Svc};
use crate::api::*;
use crate::error::ApiError;
use crate::service::StudyService;

type Out<T> = Result<Json<T>, ApiError>;

fn survey_error(e: echo_core::model::SurveyError) -> ApiError {
    ApiError::invalid(e.to_string())
}

async fn list_studies(State(svc): Svc, h: HeaderMap) -> Out<Vec<StudySummary>> {
    admin(&svc, &h)?;
    Ok(Json(svc.list_studies()?))
}

async fn create_study(State(svc): Svc, h: HeaderMap, Json(body): Json<CreateStudy>) -> Result<Response, ApiError> {
    admin(&svc, &h)?;
    Ok((StatusCode::CREATED, Json(svc.create_study(body)?)).into_response())
}

async fn get_study(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.study(&id)?))
}

async fn put_study(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, Json(body): Json<PutStudy>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.put_study(&id, body)?))
}

async fn delete_study(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    admin(&svc, &h)?;
    svc.delete_study(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn put_settings(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, Json(body): Json<SettingsBody>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        c.settings = body;
        Ok(())
    })?))
}

async fn reorder_flow(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, Json(body): Json<ReorderFlow>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| c.reorder_flow(&body.step_ids).map_err(survey_error))?))
}

async fn patch_step(
    State(svc): Svc,
    h: HeaderMap,
    Path((id, step_id)): Path<(String, String)>,
    Json(body): Json<PatchStep>,
) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        let step_id = StepId::new(step_id);
        let step = c
            .flow
            .iter_mut()
            .find(|s| s.step_id == step_id)
            .ok_or_else(|| ApiError::not_found(format!("step {step_id}")))?;
        if let Some(enabled) = body.enabled {
            step.enabled = enabled;
        }
        if let Some(text) = body.reminder_text {
            step.reminder_text = Some(text).filter(|t| !t.is_empty());
        }
        Ok(())
    })?))
}

async fn list_surveys(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Out<Vec<SurveyInstrument>> {
    admin(&svc, &h)?;
    Ok(Json(svc.study(&id)?.config.surveys.into_values().collect()))
}

fn put_instrument(svc: &StudyService, id: &str, instrument: SurveyInstrument) -> Out<StudyDoc> {
    Ok(Json(svc.update_study(id, |c| {
        c.surveys.insert(instrument.survey_id.clone(), instrument);
        Ok(())
    })?))
}

async fn put_survey(
    State(svc): Svc,
    h: HeaderMap,
    Path((id, survey_id)): Path<(String, String)>,
    body: Bytes,
) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    let instrument = import_survey_json(&body).map_err(survey_error)?;
    if instrument.survey_id.as_str() != survey_id {
        return Err(ApiError::invalid("survey_id in the body does not match the path"));
    }
    put_instrument(&svc, &id, instrument)
}

async fn import_survey(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, body: Bytes) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    put_instrument(&svc, &id, import_survey_json(&body).map_err(survey_error)?)
}

fn find_survey(config: &StudyConfig, survey_id: &str) -> Result<SurveyInstrument, ApiError> {
    config.survey(&SurveyId::new(survey_id)).cloned().ok_or_else(|| ApiError::not_found(format!("survey {survey_id}")))
}

async fn export_survey(State(svc): Svc, h: HeaderMap, Path((id, survey_id)): Path<(String, String)>) -> Result<Response, ApiError> {
    admin(&svc, &h)?;
    let instrument = find_survey(&svc.study(&id)?.config, &survey_id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], export_survey_json(&instrument)).into_response())
}

async fn delete_survey(State(svc): Svc, h: HeaderMap, Path((id, survey_id)): Path<(String, String)>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        c.surveys
            .remove(&SurveyId::new(&survey_id))
            .map(|_| ())
            .ok_or_else(|| ApiError::not_found(format!("survey {survey_id}")))
    })?))
}

async fn reorder_survey(
    State(svc): Svc,
    h: HeaderMap,
    Path((id, survey_id)): Path<(String, String)>,
    Json(body): Json<ReorderQuestions>,
) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        let reordered = reorder_questions(&find_survey(c, &survey_id)?, &body.permutation).map_err(survey_error)?;
        c.surveys.insert(reordered.survey_id.clone(), reordered);
        Ok(())
    })?))
}

async fn get_typology(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Out<TypologyBody> {
    admin(&svc, &h)?;
    Ok(Json(svc.study(&id)?.config.typology))
}

async fn put_typology(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, Json(body): Json<TypologyBody>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        c.typology = body;
        Ok(())
    })?))
}

async fn get_rules(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Out<TriggerRules> {
    admin(&svc, &h)?;
    Ok(Json(svc.study(&id)?.config.trigger_rules))
}

async fn put_rules(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, Json(body): Json<TriggerRules>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        c.trigger_rules = body;
        Ok(())
    })?))
}

async fn add_rule(State(svc): Svc, h: HeaderMap, Path(id): Path<String>, Json(rule): Json<TriggerRule>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        if c.trigger_rules.iter().any(|r| r.rule_id == rule.rule_id) {
            return Err(ApiError::conflict(format!("rule {} already exists", rule.rule_id)));
        }
        c.trigger_rules.push(rule);
        Ok(())
    })?))
}

async fn delete_rule(State(svc): Svc, h: HeaderMap, Path((id, rule_id)): Path<(String, String)>) -> Out<StudyDoc> {
    admin(&svc, &h)?;
    Ok(Json(svc.update_study(&id, |c| {
        let rule_id = RuleId::new(rule_id);
        let before = c.trigger_rules.len();
        c.trigger_rules.retain(|r| r.rule_id != rule_id);
        if c.trigger_rules.len() == before {
            return Err(ApiError::not_found(format!("rule {rule_id}")));
        }
        Ok(())
    })?))
}

async fn get_provider(State(svc): Svc, h: HeaderMap, Path(key_ref): Path<String>) -> Out<ProviderConfig> {
    admin(&svc, &h)?;
    Ok(Json(svc.provider_config(&key_ref)?))
}

async fn put_provider(
    State(svc): Svc,
    h: HeaderMap,
    Path(key_ref): Path<String>,
    Json(body): Json<ProviderConfig>,
) -> Out<ProviderConfig> {
    admin(&svc, &h)?;
    svc.put_provider_config(&key_ref, &body)?;
    Ok(Json(body))
}

async fn verify_provider(State(svc): Svc, h: HeaderMap, Path(key_ref): Path<String>) -> Out<VerifyReport> {
    admin(&svc, &h)?;
    Ok(Json(svc.verify_provider(&key_ref).await?))
}

async fn list_credentials(State(svc): Svc, h: HeaderMap) -> Out<Vec<String>> {
    admin(&svc, &h)?;
    Ok(Json(svc.credentials().refs()?))
}

async fn put_credential(
    State(svc): Svc,
    h: HeaderMap,
    Path(key_ref): Path<String>,
    Json(body): Json<SetCredential>,
) -> Result<StatusCode, ApiError> {
    admin(&svc, &h)?;
    if body.api_key.trim().is_empty() {
        return Err(ApiError::invalid("api_key is empty"));
    }
    svc.credentials().set(&key_ref, &body.api_key)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn delete_credential(State(svc): Svc, h: HeaderMap, Path(key_ref): Path<String>) -> Result<StatusCode, ApiError> {
    admin(&svc, &h)?;
    if svc.credentials().delete(&key_ref)? {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("credential {key_ref}")))
    }
}

async fn list_sessions(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Out<Vec<SessionSummary>> {
    admin(&svc, &h)?;
    Ok(Json(svc.session_summaries(&id)?))
}

async fn get_session(State(svc): Svc, h: HeaderMap, Path((id, sid)): Path<(String, String)>) -> Out<SessionView> {
    admin(&svc, &h)?;
    Ok(Json(svc.session_view(&id, &sid)?))
}

async fn get_timeline(
    State(svc): Svc,
    h: HeaderMap,
    Path((id, sid)): Path<(String, String)>,
) -> Out<Vec<InteractionEvent>> {
    admin(&svc, &h)?;
    Ok(Json(svc.session_timeline(&id, &sid)?))
}

async fn export_zip(State(svc): Svc, h: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    admin(&svc, &h)?;
    let zip = svc.export(&id)?.to_zip().map_err(|e| ApiError::internal(e.to_string()))?;
    let disposition = format!("attachment; filename=\"{id}-export.zip\"");
    Ok(([(header::CONTENT_TYPE, "application/zip".to_string()), (header::CONTENT_DISPOSITION, disposition)], zip)
        .into_response())
}

async fn export_file(State(svc): Svc, h: HeaderMap, Path((id, file)): Path<(String, String)>) -> Result<Response, ApiError> {
    admin(&svc, &h)?;
    if !FILE_NAMES.contains(&file.as_str()) {
        return Err(ApiError::not_found(format!("export file {file}")));
    }
    let bundle = svc.export(&id)?;
    let bytes = bundle.file(&file).unwrap_or_default().to_vec();
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], bytes).into_response())
}

async fn clock(State(svc): Svc, h: HeaderMap, Json(body): Json<ClockRequest>) -> Out<ClockResponse> {
    admin(&svc, &h)?;
    Ok(Json(svc.move_clock(&body).await?))
}

pub(super) fn routes() -> Router<Arc<StudyService>> {
    let study = "/api/admin/studies/{id}";
    Router::new()
        .route("/api/admin/studies", get(list_studies).post(create_study))
        .route(study, get(get_study).put(put_study).delete(delete_study))
        .route(&format!("{study}/settings"), put(put_settings))
        .route(&format!("{study}/flow/reorder"), post(reorder_flow))
        .route(&format!("{study}/flow/{{step_id}}"), axum::routing::patch(patch_step))
        .route(&format!("{study}/surveys"), get(list_surveys))
        .route(&format!("{study}/surveys/import"), post(import_survey))
        .route(&format!("{study}/surveys/{{survey_id}}"), put(put_survey).delete(delete_survey))
        .route(&format!("{study}/surveys/{{survey_id}}/export"), get(export_survey))
        .route(&format!("{study}/surveys/{{survey_id}}/reorder"), post(reorder_survey))
        .route(&format!("{study}/typology"), get(get_typology).put(put_typology))
        .route(&format!("{study}/trigger-rules"), get(get_rules).put(put_rules).post(add_rule))
        .route(&format!("{study}/trigger-rules/{{rule_id}}"), axum::routing::delete(delete_rule))
        .route(&format!("{study}/sessions"), get(list_sessions))
        .route(&format!("{study}/sessions/{{sid}}"), get(get_session))
        .route(&format!("{study}/sessions/{{sid}}/timeline"), get(get_timeline))
        .route(&format!("{study}/export"), get(export_zip))
        .route(&format!("{study}/export/{{file}}"), get(export_file))
        .route("/api/admin/providers/{key_ref}", get(get_provider).put(put_provider))
        .route("/api/admin/providers/{key_ref}/verify", post(verify_provider))
        .route("/api/admin/credentials", get(list_credentials))
        .route("/api/admin/credentials/{key_ref}", put(put_credential).delete(delete_credential))
        .route("/api/admin/clock", post(clock))
}
