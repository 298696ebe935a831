//! The study service: everything the HTTP routes do, without HTTP.
//!
//! Every session has a runtime behind an async mutex. A request locks it,
//! lets due clock ticks fire, validates, appends its events to the log and
//! folds each stored event into the runtime. Nothing is answered before the
//! events it depends on are durable.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use echo_core::clock::{Clock, SystemClock, VirtualClock};
use echo_core::export::{build_bundle, ExportBundle};
use echo_core::flow::{
    attention_failures, check_answers, effective_instrument, enabled_sequence, CompletionPayload, FlowError,
    GateContext, GateReason, SessionStep, StepCompletion,
};
use echo_core::ids::{
    InstanceId, Millis, ParticipantId, QueryId, ResponseId, SessionId, StepId, StudyId, TaskId, TurnId,
};
use echo_core::log::{EventLog, EventPayload, InteractionEvent, LogError, ResponseOutcome, SessionView, TurnStatus};
use echo_core::model::{default_study, validate_study_config, Modality, StepKind, StudyConfig};
use echo_core::provider::{
    build_chat, build_search, chat_complete, verify_credentials, ChatMessage, ChatProvider, CredentialStore,
    ProviderConfig, SearchProvider, Timeouts, VerifyReport,
};
use echo_core::store::{is_valid_key_component, Collection, DocumentRef, FileStore, Store, StoreError, StoreExt};
use echo_core::trigger::FiredTrigger;
use futures::StreamExt;
use serde_json::json;
use tokio::sync::{mpsc, Mutex};

use crate::api::*;
use crate::auth::{AdminAccount, Principal, Tokens};
use crate::error::ApiError;
use crate::runtime::SessionRuntime;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub storage_root: PathBuf,
    /// Secret the stored API keys are encrypted under.
    pub secret: String,
    /// Enables the virtual clock and its control endpoint.
    pub test_mode: bool,
    pub token_ttl: Duration,
    pub request_cap: u64,
    pub timeouts: Timeouts,
}

impl ServiceConfig {
    pub fn new(storage_root: impl Into<PathBuf>, secret: impl Into<String>) -> Self {
        Self {
            storage_root: storage_root.into(),
            secret: secret.into(),
            test_mode: false,
            token_ttl: Duration::from_secs(12 * 3600),
            request_cap: 100_000,
            timeouts: Timeouts::default(),
        }
    }
}

type Handle = Arc<Mutex<SessionRuntime>>;

pub struct StudyService {
    store: Arc<dyn Store>,
    log: EventLog,
    creds: CredentialStore,
    clock: Arc<dyn Clock>,
    virtual_clock: Option<Arc<VirtualClock>>,
    pub tokens: Tokens,
    sessions: RwLock<HashMap<SessionId, Handle>>,
    participants: RwLock<HashMap<(StudyId, ParticipantId), SessionId>>,
    setup_lock: Mutex<()>,
    timeouts: Timeouts,
}

/// Virtual time starts here so exported timestamps look like real dates.
pub const VIRTUAL_EPOCH_MS: Millis = 1_767_225_600_000;

fn new_id(prefix: &str) -> String {
    format!("{prefix}{}", uuid::Uuid::new_v4().simple())
}

impl StudyService {
    /// Opens storage, replays every session and repairs popups whose firing
    /// was not yet logged when the process stopped.
    pub fn open(config: &ServiceConfig) -> Result<Self, LogError> {
        let store: Arc<dyn Store> = Arc::new(FileStore::open(&config.storage_root)?);
        let (clock, virtual_clock): (Arc<dyn Clock>, _) = if config.test_mode {
            let vc = Arc::new(VirtualClock::new(VIRTUAL_EPOCH_MS));
            (vc.clone(), Some(vc))
        } else {
            (Arc::new(SystemClock), None)
        };
        let log = EventLog::open(store.clone())?;
        let service = Self {
            creds: CredentialStore::new(store.clone(), &config.secret),
            store,
            log,
            clock,
            virtual_clock,
            tokens: Tokens::new(config.token_ttl, config.request_cap),
            sessions: RwLock::new(HashMap::new()),
            participants: RwLock::new(HashMap::new()),
            setup_lock: Mutex::new(()),
            timeouts: config.timeouts,
        };
        for sid in service.log.sessions() {
            let timeline = service.log.timeline(&sid)?;
            let Some(mut rt) = SessionRuntime::replay(&timeline) else {
                return Err(LogError::Corrupt(format!("session {sid} does not start with session_started")));
            };
            let view = service.log.view(&sid)?;
            let unlogged: Vec<FiredTrigger> =
                rt.triggers.instances().iter().filter(|i| view.popup(&i.instance_id).is_none()).cloned().collect();
            for instance in unlogged {
                let now = service.now();
                if let Ok(e) = service.log.append(&sid, EventPayload::PopupFired { instance }, now, now) {
                    rt.apply(&e);
                }
            }
            let key = (rt.flow.study_id.clone(), rt.flow.participant_id.clone());
            service.participants.write().expect("participant table poisoned").insert(key, sid.clone());
            service.sessions.write().expect("session table poisoned").insert(sid, Arc::new(Mutex::new(rt)));
        }
        Ok(service)
    }

    pub fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn is_test_mode(&self) -> bool {
        self.virtual_clock.is_some()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    // ---- authentication -------------------------------------------------

    pub fn authenticate(&self, token: Option<&str>) -> Result<Principal, ApiError> {
        self.tokens.check(token.ok_or_else(ApiError::unauthorized)?)
    }

    pub fn setup_required(&self) -> Result<bool, ApiError> {
        Ok(self.store.list(Collection::AdminAccounts, None)?.is_empty())
    }

    /// Creates the first administrator. Refused once any account exists.
    pub async fn setup(&self, body: &Credentials) -> Result<TokenResponse, ApiError> {
        let _guard = self.setup_lock.lock().await;
        if !self.setup_required()? {
            return Err(ApiError::conflict("an administrator account already exists"));
        }
        if !is_valid_key_component(&body.username) {
            return Err(ApiError::invalid("username may use letters, digits, '-', '_' and '.'"));
        }
        if body.password.chars().count() < 8 {
            return Err(ApiError::invalid("password must have at least 8 characters"));
        }
        let account = AdminAccount::new(&body.username, &body.password)?;
        self.store.put_json(&DocumentRef::new(Collection::AdminAccounts, &body.username), &account, 0)?;
        Ok(TokenResponse { token: self.tokens.issue(Principal::Admin { username: body.username.clone() }) })
    }

    pub fn admin_login(&self, body: &Credentials) -> Result<TokenResponse, ApiError> {
        let denied = || ApiError::new(axum::http::StatusCode::UNAUTHORIZED, "bad_credentials", "unknown user or wrong password");
        if !is_valid_key_component(&body.username) {
            return Err(denied());
        }
        let doc = DocumentRef::new(Collection::AdminAccounts, &body.username);
        let account = self.store.get_json::<AdminAccount>(&doc)?.ok_or_else(denied)?.value;
        if !account.verify(&body.password) {
            return Err(denied());
        }
        Ok(TokenResponse { token: self.tokens.issue(Principal::Admin { username: account.username }) })
    }

    // ---- studies --------------------------------------------------------

    fn study_doc(study_id: &str) -> Result<DocumentRef, ApiError> {
        if !is_valid_key_component(study_id) {
            return Err(ApiError::not_found(format!("study {study_id}")));
        }
        Ok(DocumentRef::new(Collection::Studies, study_id))
    }

    pub fn study(&self, study_id: &str) -> Result<StudyDoc, ApiError> {
        let doc = self
            .store
            .get_json::<StudyConfig>(&Self::study_doc(study_id)?)?
            .ok_or_else(|| ApiError::not_found(format!("study {study_id}")))?;
        Ok(StudyDoc { version: doc.version, config: doc.value })
    }

    pub fn list_studies(&self) -> Result<Vec<StudySummary>, ApiError> {
        let mut out = Vec::new();
        for id in self.store.list(Collection::Studies, None)? {
            let doc = self.study(&id)?;
            out.push(StudySummary {
                sessions: self.log.sessions_of(&doc.config.study_id).len(),
                study_id: doc.config.study_id,
                title: doc.config.title,
            });
        }
        Ok(out)
    }

    pub fn create_study(&self, body: CreateStudy) -> Result<StudyDoc, ApiError> {
        let config = match (body.config, body.study_id, body.template) {
            (Some(c), _, _) => c,
            (None, Some(id), template) => default_study(id.as_str(), template.unwrap_or(Modality::Chat)),
            (None, None, _) => return Err(ApiError::bad_request("give either a config or a study_id")),
        };
        let report = validate_study_config(&config);
        if !report.is_empty() {
            return Err(ApiError::validation(&report));
        }
        let version = match self.store.put_json(&Self::study_doc(config.study_id.as_str())?, &config, 0) {
            Err(StoreError::VersionConflict { .. }) => {
                return Err(ApiError::conflict(format!("study {} already exists", config.study_id)))
            }
            other => other?,
        };
        Ok(StudyDoc { version, config })
    }

    pub fn put_study(&self, study_id: &str, body: PutStudy) -> Result<StudyDoc, ApiError> {
        let current = self.study(study_id)?;
        if body.config.study_id.as_str() != study_id {
            return Err(ApiError::invalid("study_id cannot be changed"));
        }
        let report = validate_study_config(&body.config);
        if !report.is_empty() {
            return Err(ApiError::validation(&report));
        }
        let expected = body.version.unwrap_or(current.version);
        let version = self.store.put_json(&Self::study_doc(study_id)?, &body.config, expected)?;
        Ok(StudyDoc { version, config: body.config })
    }

    /// Read-modify-write of a study with validation of the result.
    pub fn update_study<F>(&self, study_id: &str, edit: F) -> Result<StudyDoc, ApiError>
    where
        F: FnOnce(&mut StudyConfig) -> Result<(), ApiError>,
    {
        let StudyDoc { version, mut config } = self.study(study_id)?;
        edit(&mut config)?;
        self.put_study(study_id, PutStudy { version: Some(version), config })
    }

    pub fn delete_study(&self, study_id: &str) -> Result<(), ApiError> {
        let current = self.study(study_id)?;
        if !self.log.sessions_of(&current.config.study_id).is_empty() {
            return Err(ApiError::conflict("study has participant sessions; its data must be kept"));
        }
        self.store.delete(&Self::study_doc(study_id)?, current.version)?;
        Ok(())
    }

    // ---- providers ------------------------------------------------------

    fn provider_doc(key_ref: &str) -> Result<DocumentRef, ApiError> {
        if !is_valid_key_component(key_ref) {
            return Err(ApiError::bad_request(format!("invalid provider reference {key_ref:?}")));
        }
        Ok(DocumentRef::new(Collection::ProviderConfigs, key_ref))
    }

    /// Provider settings under `key_ref`; the mock providers when none are
    /// stored.
    pub fn provider_config(&self, key_ref: &str) -> Result<ProviderConfig, ApiError> {
        Ok(self
            .store
            .get_json::<ProviderConfig>(&Self::provider_doc(key_ref)?)?
            .map_or_else(ProviderConfig::mock, |v| v.value))
    }

    pub fn put_provider_config(&self, key_ref: &str, config: &ProviderConfig) -> Result<(), ApiError> {
        config.check().map_err(ApiError::invalid)?;
        let doc = Self::provider_doc(key_ref)?;
        let version = self.store.get(&doc)?.map_or(0, |v| v.version);
        self.store.put_json(&doc, config, version)?;
        Ok(())
    }

    pub async fn verify_provider(&self, key_ref: &str) -> Result<VerifyReport, ApiError> {
        let config = self.provider_config(key_ref)?;
        Ok(verify_credentials(&config, &self.creds, &self.timeouts).await)
    }

    pub fn credentials(&self) -> &CredentialStore {
        &self.creds
    }

    fn chat_provider(&self, config: &StudyConfig) -> Result<Arc<dyn ChatProvider>, ApiError> {
        let providers = self.provider_config(&config.provider_config_ref)?;
        Ok(build_chat(&providers.llm, &self.creds, &self.timeouts)?)
    }

    fn search_provider(&self, config: &StudyConfig) -> Result<Arc<dyn SearchProvider>, ApiError> {
        let providers = self.provider_config(&config.provider_config_ref)?;
        Ok(build_search(&providers.search, &self.creds, &self.timeouts)?)
    }

    // ---- responses and export ------------------------------------------

    fn study_session(&self, study_id: &str, session_id: &str) -> Result<SessionId, ApiError> {
        let sid = SessionId::new(session_id);
        if self.log.sessions_of(&StudyId::new(study_id)).contains(&sid) {
            Ok(sid)
        } else {
            Err(ApiError::not_found(format!("session {session_id} in study {study_id}")))
        }
    }

    pub fn session_summaries(&self, study_id: &str) -> Result<Vec<SessionSummary>, ApiError> {
        self.study(study_id)?;
        let mut out = Vec::new();
        for sid in self.log.sessions_of(&StudyId::new(study_id)) {
            let view = self.log.view(&sid)?;
            let step_index = self.completed_steps(&sid)?;
            out.push(SessionSummary {
                session_id: sid,
                participant_id: view.participant_id.clone(),
                external_label: view.external_label.clone(),
                started_ms: view.started_ms,
                completed_ms: view.completed_ms,
                step_index,
                step_count: view.steps.len(),
                turns: view.turns.len(),
                queries: view.queries.len(),
                popups_answered: view.popups.iter().filter(|p| p.answer.is_some()).count(),
            });
        }
        Ok(out)
    }

    fn completed_steps(&self, sid: &SessionId) -> Result<usize, ApiError> {
        Ok(self.log.timeline(sid)?.iter().filter(|e| matches!(e.payload, EventPayload::StepCompleted { .. })).count())
    }

    pub fn session_view(&self, study_id: &str, session_id: &str) -> Result<SessionView, ApiError> {
        Ok(self.log.view(&self.study_session(study_id, session_id)?)?)
    }

    pub fn session_timeline(&self, study_id: &str, session_id: &str) -> Result<Vec<InteractionEvent>, ApiError> {
        Ok(self.log.timeline(&self.study_session(study_id, session_id)?)?)
    }

    pub fn export(&self, study_id: &str) -> Result<ExportBundle, ApiError> {
        let doc = self.study(study_id)?;
        let mut views = Vec::new();
        for sid in self.log.sessions_of(&doc.config.study_id) {
            views.push(self.log.view(&sid)?);
        }
        Ok(build_bundle(&doc.config, &views))
    }

    // ---- clock ----------------------------------------------------------

    /// Moves the virtual clock and lets every session see the new time.
    pub async fn move_clock(&self, req: &ClockRequest) -> Result<ClockResponse, ApiError> {
        let clock = self.virtual_clock.as_ref().ok_or_else(|| ApiError::not_found("clock control is test-mode only"))?;
        if let Some(at) = req.set_ms {
            clock.set(at);
        }
        if let Some(ms) = req.advance_ms {
            if ms < 0 {
                return Err(ApiError::invalid("the clock only moves forward"));
            }
            clock.advance(ms);
        }
        self.tick_all().await?;
        Ok(ClockResponse { now_ms: self.now() })
    }

    /// Gives every open session a clock tick.
    pub async fn tick_all(&self) -> Result<(), ApiError> {
        let handles: Vec<(SessionId, Handle)> =
            self.sessions.read().expect("session table poisoned").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (sid, handle) in handles {
            let mut rt = handle.lock().await;
            self.tick(&mut rt, &sid)?;
        }
        Ok(())
    }

    // ---- participant session plumbing -----------------------------------

    fn handle(&self, sid: &SessionId) -> Result<Handle, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(sid)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {sid}")))
    }

    /// Appends one event, folds it into the runtime and logs the popups it
    /// fired. Returns the stored event and those popups.
    fn commit(
        &self,
        rt: &mut SessionRuntime,
        sid: &SessionId,
        payload: EventPayload,
        client_ts: Millis,
    ) -> Result<(InteractionEvent, Vec<FiredTrigger>), ApiError> {
        let event = self.log.append(sid, payload, client_ts, self.now())?;
        let fired = rt.apply(&event);
        for instance in &fired {
            let e = self.log.append(sid, EventPayload::PopupFired { instance: instance.clone() }, client_ts, self.now())?;
            rt.apply(&e);
        }
        Ok((event, fired))
    }

    /// Logs a clock tick when it changes trigger state.
    fn tick(&self, rt: &mut SessionRuntime, sid: &SessionId) -> Result<Vec<FiredTrigger>, ApiError> {
        let now = self.now();
        if rt.flow.is_complete() || !rt.tick_changes_state(now) {
            return Ok(Vec::new());
        }
        Ok(self.commit(rt, sid, EventPayload::ClockTick, now)?.1)
    }

    fn participant(principal: &Principal) -> Result<(StudyId, SessionId), ApiError> {
        match principal {
            Principal::Participant { study_id, session_id } => Ok((study_id.clone(), session_id.clone())),
            Principal::Admin { .. } => Err(ApiError::forbidden()),
        }
    }

    fn check_invite(config: &StudyConfig, code: Option<&str>) -> Result<(), ApiError> {
        match &config.settings.invite_code {
            Some(expected) if Some(expected.as_str()) != code => Err(ApiError::new(
                axum::http::StatusCode::FORBIDDEN,
                "bad_invite",
                "invite code missing or wrong",
            )),
            _ => Ok(()),
        }
    }

    pub async fn register(&self, req: &RegisterRequest) -> Result<RegisterResponse, ApiError> {
        let config = self.study(req.study_id.as_str())?.config;
        Self::check_invite(&config, req.invite_code.as_deref())?;
        let report = validate_study_config(&config);
        if !report.is_empty() {
            return Err(ApiError::conflict("study configuration is not valid; ask the researcher"));
        }
        let participant_id = ParticipantId::new(new_id("p"));
        let sid = SessionId::new(new_id("s"));
        let steps: Vec<SessionStep> = enabled_sequence(&config).iter().map(SessionStep::from).collect();
        let started = EventPayload::SessionStarted {
            study_id: config.study_id.clone(),
            participant_id: participant_id.clone(),
            external_label: req.external_label.clone().filter(|l| !l.trim().is_empty()),
            steps,
            trigger_rules: config.trigger_rules.clone(),
        };
        let now = self.now();
        let first = self.log.append(&sid, started, now, now)?;
        let mut rt = SessionRuntime::start(&first).expect("first event starts the session");
        self.enter_current(&mut rt, &sid, now)?;

        self.participants
            .write()
            .expect("participant table poisoned")
            .insert((config.study_id.clone(), participant_id.clone()), sid.clone());
        self.sessions.write().expect("session table poisoned").insert(sid.clone(), Arc::new(Mutex::new(rt)));
        let token = self.tokens.issue(Principal::Participant { study_id: config.study_id, session_id: sid.clone() });
        Ok(RegisterResponse { participant_id, session_id: sid, token })
    }

    pub fn participant_login(&self, req: &LoginRequest) -> Result<RegisterResponse, ApiError> {
        let config = self.study(req.study_id.as_str())?.config;
        Self::check_invite(&config, req.invite_code.as_deref())?;
        let sid = self
            .participants
            .read()
            .expect("participant table poisoned")
            .get(&(req.study_id.clone(), req.participant_id.clone()))
            .cloned()
            .ok_or_else(|| ApiError::not_found("no session for this participant"))?;
        let token = self.tokens.issue(Principal::Participant { study_id: req.study_id.clone(), session_id: sid.clone() });
        Ok(RegisterResponse { participant_id: req.participant_id.clone(), session_id: sid, token })
    }

    /// Logs entry into the step at the cursor, or the end of the session.
    fn enter_current(&self, rt: &mut SessionRuntime, sid: &SessionId, client_ts: Millis) -> Result<Vec<FiredTrigger>, ApiError> {
        let payload = match rt.flow.current() {
            Some(step) => EventPayload::StepEntered {
                step_id: step.step_id.clone(),
                step_kind: step.kind,
                task_id: step.task_id.clone(),
            },
            None => EventPayload::SessionCompleted,
        };
        Ok(self.commit(rt, sid, payload, client_ts)?.1)
    }

    /// Locks the caller's session and lets due ticks fire.
    async fn enter(
        &self,
        principal: &Principal,
    ) -> Result<(StudyConfig, SessionId, tokio::sync::OwnedMutexGuard<SessionRuntime>), ApiError> {
        let (study_id, sid) = Self::participant(principal)?;
        let config = self.study(study_id.as_str())?.config;
        let handle = self.handle(&sid)?;
        let mut rt = handle.lock_owned().await;
        self.tick(&mut rt, &sid)?;
        Ok((config, sid, rt))
    }

    fn popups(config: &StudyConfig, fired: &[FiredTrigger]) -> Vec<PopupDescriptor> {
        fired.iter().map(|f| PopupDescriptor::new(f, config)).collect()
    }

    pub async fn state(&self, principal: &Principal) -> Result<ParticipantState, ApiError> {
        let (config, sid, rt) = self.enter(principal).await?;
        let flow = &rt.flow;
        let step = match flow.current() {
            None => None,
            Some(s) => {
                let task = s.task_id.as_ref().and_then(|t| config.task(t)).cloned();
                let counts = s.task_id.as_ref().map(|t| flow.counts_for(t)).unwrap_or_default();
                Some(StepView {
                    step_id: s.step_id.clone(),
                    kind: s.kind,
                    reminder_text: s.reminder_text.clone(),
                    consent_text: (s.kind == StepKind::Consent).then(|| config.consent_text.clone()),
                    consent_checkboxes: if s.kind == StepKind::Consent { config.consent_checkboxes.clone() } else { Vec::new() },
                    survey: if s.kind.binds_survey() { Some(effective_instrument(&config, flow, s)?) } else { None },
                    task,
                    min_interactions: config.settings.min_interactions,
                    counts,
                })
            }
        };
        let view = self.log.view(&sid)?;
        let note = flow.current_task().and_then(|t| view.notes.get(t)).map(|n| n.text.clone());
        Ok(ParticipantState {
            session_id: sid,
            participant_id: flow.participant_id.clone(),
            study_id: flow.study_id.clone(),
            study_title: config.title.clone(),
            step_index: flow.cursor,
            step_count: flow.steps.len(),
            step,
            completed: flow.is_complete(),
            notes_enabled: config.settings.notes_enabled,
            note,
            pending_popups: Self::popups(&config, &rt.triggers.pending()),
        })
    }

    /// Runs the gates for `completion` and, if they pass, logs it and moves
    /// to the next step.
    fn advance(
        &self,
        config: &StudyConfig,
        rt: &mut SessionRuntime,
        sid: &SessionId,
        completion: StepCompletion,
        client_ts: Millis,
    ) -> Result<AdvanceResponse, ApiError> {
        let step = rt.flow.current().cloned().ok_or(FlowError::SessionComplete)?;
        let now = self.now();
        let attention_failed = match &completion.payload {
            CompletionPayload::SurveyAnswers { answers } if step.kind == completion.step_kind => {
                attention_failures(&effective_instrument(config, &rt.flow, &step)?, answers)
            }
            _ => Vec::new(),
        };
        if let Err(e) = rt.flow.advance(&completion, GateContext { config, now, pending_popups: 0 }) {
            if let FlowError::Gate { reason: GateReason::AttentionFailed, .. } = e {
                let failed = EventPayload::AttentionCheckFailed { step_id: step.step_id.clone(), question_ids: attention_failed };
                self.commit(rt, sid, failed, client_ts)?;
            }
            return Err(e.into());
        }
        if let CompletionPayload::TaskSubmit { final_note } = &completion.payload {
            let task_id = step.task_id.clone().ok_or(FlowError::SessionComplete)?;
            if rt.submission_fires(now) {
                self.commit(rt, sid, EventPayload::SubmissionAttempted { task_id: task_id.clone() }, client_ts)?;
            }
            let pending = rt.triggers.pending();
            if !pending.is_empty() {
                let err: ApiError = FlowError::Gate {
                    reason: GateReason::PendingTrigger,
                    detail: format!("{} popup(s) must be answered first", pending.len()),
                }
                .into();
                let detail = json!({
                    "reason": GateReason::PendingTrigger.as_str(),
                    "popups": Self::popups(config, &pending),
                });
                return Err(err.with_detail(detail));
            }
            if let Some(note) = final_note.as_ref().filter(|n| !n.trim().is_empty()) {
                self.commit(rt, sid, EventPayload::NoteSaved { task_id, text: note.clone() }, client_ts)?;
            }
        }
        let completed = EventPayload::StepCompleted {
            step_id: step.step_id.clone(),
            completion,
            attention_failed: attention_failed.clone(),
        };
        self.commit(rt, sid, completed, client_ts)?;
        self.enter_current(rt, sid, client_ts)?;
        Ok(AdvanceResponse { step_index: rt.flow.cursor, completed: rt.flow.is_complete(), attention_failed })
    }

    pub async fn submit_consent(&self, principal: &Principal, req: ConsentRequest) -> Result<AdvanceResponse, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        let completion = StepCompletion { step_kind: StepKind::Consent, payload: CompletionPayload::ConsentAck { checked: req.checked } };
        let now = self.now();
        self.advance(&config, &mut rt, &sid, completion, now)
    }

    pub async fn submit_survey(&self, principal: &Principal, req: SurveyRequest) -> Result<AdvanceResponse, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        let step = rt.flow.current().cloned().ok_or(FlowError::SessionComplete)?;
        if req.step_id.as_ref().is_some_and(|s| s != &step.step_id) || !step.kind.binds_survey() {
            return Err(ApiError::wrong_step(format!("current step is {} ({})", step.step_id, step.kind.as_str())));
        }
        let completion = StepCompletion { step_kind: step.kind, payload: CompletionPayload::SurveyAnswers { answers: req.answers } };
        let now = self.now();
        self.advance(&config, &mut rt, &sid, completion, now)
    }

    pub async fn submit_task(&self, principal: &Principal, req: SubmitTaskRequest) -> Result<AdvanceResponse, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        let completion = StepCompletion {
            step_kind: StepKind::MainTask,
            payload: CompletionPayload::TaskSubmit { final_note: req.final_note },
        };
        let now = self.now();
        self.advance(&config, &mut rt, &sid, completion, now)
    }

    fn current_task_of(config: &StudyConfig, rt: &SessionRuntime, modality: Modality) -> Result<TaskId, ApiError> {
        let wrong = || {
            let here = rt.flow.current().map_or("the end of the study", |s| s.kind.as_str());
            ApiError::wrong_step(format!("no {modality:?} task is active (at {here})").to_lowercase())
        };
        let task_id = rt.flow.current_task().ok_or_else(wrong)?;
        match config.task(task_id) {
            Some(t) if t.modality == modality => Ok(task_id.clone()),
            _ => Err(wrong()),
        }
    }

    /// Logs the prompt and streams the reply as frames. The reply is
    /// produced by a background task that logs every chunk before sending
    /// it; if the receiver goes away the turn is logged as cancelled.
    pub async fn chat(self: &Arc<Self>, principal: &Principal, req: ChatRequest) -> Result<mpsc::Receiver<ChatFrame>, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        let task_id = Self::current_task_of(&config, &rt, Modality::Chat)?;
        if req.prompt.trim().is_empty() {
            return Err(ApiError::invalid("prompt is empty"));
        }
        let provider = self.chat_provider(&config)?;
        let view = self.log.view(&sid)?;
        let mut history = Vec::new();
        for t in view.turns_for(&task_id).filter(|t| t.status == TurnStatus::Completed) {
            history.push(ChatMessage::user(t.prompt_text.clone()));
            history.push(ChatMessage::assistant(t.response_text.clone()));
        }
        history.push(ChatMessage::user(req.prompt.clone()));
        let turn_id = TurnId::new(format!("{sid}-t{}", view.turns.len() + 1));
        let client_ts = req.client_ts.unwrap_or_else(|| self.now());
        let prompt = EventPayload::PromptSubmitted {
            turn_id: turn_id.clone(),
            task_id: task_id.clone(),
            text: req.prompt,
            typing_start_ms: req.typing_start_ms,
            typing_end_ms: req.typing_end_ms,
        };
        let (_, fired) = self.commit(&mut rt, &sid, prompt, client_ts)?;
        drop(rt);

        let (tx, rx) = mpsc::channel(32);
        let service = self.clone();
        let handle = self.handle(&sid)?;
        let popups = Self::popups(&config, &fired);
        tokio::spawn(async move {
            service.relay(provider, handle, sid, task_id, turn_id, history, config, popups, tx).await;
        });
        Ok(rx)
    }

    #[allow(clippy::too_many_arguments)]
    async fn relay(
        &self,
        provider: Arc<dyn ChatProvider>,
        handle: Handle,
        sid: SessionId,
        task_id: TaskId,
        turn_id: TurnId,
        history: Vec<ChatMessage>,
        config: StudyConfig,
        mut popups: Vec<PopupDescriptor>,
        tx: mpsc::Sender<ChatFrame>,
    ) {
        let end = |outcome: ResponseOutcome| EventPayload::ResponseEnded { turn_id: turn_id.clone(), task_id: task_id.clone(), outcome };
        let mut text = String::new();
        let _ = tx.send(ChatFrame::Start { turn_id: turn_id.clone() }).await;
        let mut stream = match chat_complete(provider, turn_id.clone(), history).await {
            Ok(s) => s,
            Err(e) => {
                let mut rt = handle.lock().await;
                let _ = self.commit(&mut rt, &sid, end(ResponseOutcome::Failed { message: e.to_string() }), self.now());
                let frame = ChatFrame::Error { turn_id, message: e.to_string(), partial_text: text, popups };
                let _ = tx.send(frame).await;
                return;
            }
        };
        while let Some(item) = stream.next().await {
            match item {
                Ok(chunk) => {
                    {
                        let mut rt = handle.lock().await;
                        let payload = EventPayload::ResponseChunk {
                            turn_id: turn_id.clone(),
                            chunk_index: chunk.chunk_index,
                            text: chunk.text.clone(),
                        };
                        if self.commit(&mut rt, &sid, payload, self.now()).is_err() {
                            return;
                        }
                    }
                    text.push_str(&chunk.text);
                    let frame = ChatFrame::Chunk { turn_id: turn_id.clone(), chunk_index: chunk.chunk_index, text: chunk.text };
                    if tx.send(frame).await.is_err() {
                        let mut rt = handle.lock().await;
                        let _ = self.commit(&mut rt, &sid, end(ResponseOutcome::Cancelled), self.now());
                        return;
                    }
                    if chunk.is_final {
                        break;
                    }
                }
                Err(e) => {
                    let mut rt = handle.lock().await;
                    let _ = self.commit(&mut rt, &sid, end(ResponseOutcome::Failed { message: e.to_string() }), self.now());
                    let frame = ChatFrame::Error { turn_id, message: e.to_string(), partial_text: text, popups };
                    let _ = tx.send(frame).await;
                    return;
                }
            }
        }
        let fired = {
            let mut rt = handle.lock().await;
            match self.commit(&mut rt, &sid, end(ResponseOutcome::Completed), self.now()) {
                Ok((_, fired)) => fired,
                Err(_) => return,
            }
        };
        popups.extend(Self::popups(&config, &fired));
        let _ = tx.send(ChatFrame::Final { turn_id, response_text: text, popups }).await;
    }

    pub async fn rate_turn(&self, principal: &Principal, turn_id: &str, req: RatingRequest) -> Result<Ack, ApiError> {
        let (_, sid, mut rt) = self.enter(principal).await?;
        let now = self.now();
        let payload = EventPayload::TurnRated { turn_id: TurnId::new(turn_id), rating: req.rating };
        Ok(Ack { seq: self.commit(&mut rt, &sid, payload, now)?.0.seq })
    }

    pub async fn rate_trajectory(&self, principal: &Principal, req: TrajectoryRequest) -> Result<Ack, ApiError> {
        let (_, sid, mut rt) = self.enter(principal).await?;
        let task_id = match req.task_id.or_else(|| rt.flow.current_task().cloned()) {
            Some(t) => t,
            None => return Err(ApiError::invalid("no task given and none is active")),
        };
        let now = self.now();
        let payload = EventPayload::TrajectoryRated { task_id, rating: req.rating };
        Ok(Ack { seq: self.commit(&mut rt, &sid, payload, now)?.0.seq })
    }

    /// Runs the query, logs it with its result snapshot, then answers.
    pub async fn search(&self, principal: &Principal, req: SearchRequest) -> Result<SearchResponse, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        let task_id = Self::current_task_of(&config, &rt, Modality::Search)?;
        if req.query.trim().is_empty() {
            return Err(ApiError::invalid("query is empty"));
        }
        let provider = self.search_provider(&config)?;
        let page = provider.search(&req.query).await?;
        let results: Vec<_> = page
            .results
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.rank = i as u32 + 1;
                r
            })
            .collect();
        let view = self.log.view(&sid)?;
        let query_id = QueryId::new(format!("{sid}-q{}", view.queries.len() + 1));
        let client_ts = req.client_ts.unwrap_or_else(|| self.now());
        let payload = EventPayload::QueryIssued {
            query_id: query_id.clone(),
            task_id,
            text: req.query,
            typing_start_ms: req.typing_start_ms,
            typing_end_ms: req.typing_end_ms,
            result_count: results.len() as u32,
            serp: results.clone(),
        };
        let (_, fired) = self.commit(&mut rt, &sid, payload, client_ts)?;
        Ok(SearchResponse { query_id, results, popups: Self::popups(&config, &fired) })
    }

    /// Logs a click that matches the stored snapshot; anything else is
    /// logged as a rejected click and refused.
    pub async fn click(&self, principal: &Principal, req: ClickRequest) -> Result<Ack, ApiError> {
        let (_, sid, mut rt) = self.enter(principal).await?;
        let client_ts = req.client_ts.unwrap_or_else(|| self.now());
        let view = self.log.view(&sid)?;
        let reason = match view.query(&req.query_id) {
            None => Some(format!("unknown query {}", req.query_id)),
            Some(q) if !q.serp.iter().any(|r| r.rank == req.rank && r.url == req.url) => {
                Some(format!("rank {} with this url is not in the snapshot", req.rank))
            }
            Some(_) => None,
        };
        match reason {
            None => {
                let payload = EventPayload::ResultClicked { query_id: req.query_id, rank: req.rank, url: req.url };
                Ok(Ack { seq: self.commit(&mut rt, &sid, payload, client_ts)?.0.seq })
            }
            Some(reason) => {
                let payload =
                    EventPayload::ClickRejected { query_id: req.query_id, rank: req.rank, url: req.url, reason: reason.clone() };
                self.commit(&mut rt, &sid, payload, client_ts)?;
                Err(ApiError::new(axum::http::StatusCode::UNPROCESSABLE_ENTITY, "click_rejected", reason))
            }
        }
    }

    pub async fn save_note(&self, principal: &Principal, req: NoteRequest) -> Result<Ack, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        if !config.settings.notes_enabled {
            return Err(ApiError::conflict("notes are disabled for this study"));
        }
        let task_id = match req.task_id.or_else(|| rt.flow.current_task().cloned()) {
            Some(t) if rt.flow.task_started(&t) => t,
            _ => return Err(ApiError::wrong_step("notes belong to a task that has started")),
        };
        let now = self.now();
        Ok(Ack { seq: self.commit(&mut rt, &sid, EventPayload::NoteSaved { task_id, text: req.text }, now)?.0.seq })
    }

    pub async fn answer_popup(
        &self,
        principal: &Principal,
        instance_id: &str,
        req: PopupAnswerRequest,
    ) -> Result<PopupAnswerResponse, ApiError> {
        let (config, sid, mut rt) = self.enter(principal).await?;
        let instance_id = InstanceId::new(instance_id);
        let fired = rt
            .triggers
            .instance(&instance_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("popup {instance_id}")))?;
        if !fired.is_pending() {
            return Err(ApiError::conflict(format!("popup {instance_id} was already answered")));
        }
        let survey = config
            .survey(&fired.survey_id)
            .ok_or_else(|| ApiError::internal(format!("survey {} no longer exists", fired.survey_id)))?;
        check_answers(survey, &req.answers)?;
        let answered = rt.triggers.instances().iter().filter(|i| !i.is_pending()).count();
        let response_id = ResponseId::new(format!("{sid}-r{}", answered + 1));
        let payload = EventPayload::PopupAnswered {
            instance_id,
            response_id: response_id.clone(),
            survey_id: fired.survey_id,
            answers: req.answers,
        };
        let now = self.now();
        self.commit(&mut rt, &sid, payload, now)?;
        Ok(PopupAnswerResponse { response_id, pending_popups: Self::popups(&config, &rt.triggers.pending()) })
    }

    /// The step at the cursor, for callers that need it outside a request.
    pub async fn current_step(&self, sid: &SessionId) -> Result<Option<StepId>, ApiError> {
        Ok(self.handle(sid)?.lock().await.current_step_id())
    }
}
