//! Chat and search provider gateway.
//!
//! Two interfaces, [`ChatProvider`] and [`SearchProvider`], with HTTP
//! adapters for the common vendor APIs and deterministic mocks.

mod credentials;
mod http;
mod mock;
mod sse;

use std::pin::Pin;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use credentials::{CredentialError, CredentialStore};
pub use http::{ClaudeChat, GeminiChat, GenericSearch, OpenAiChat};
pub use mock::{parse_corpus, CorpusDoc, MockCorpus, MockEcho, DEFAULT_CORPUS};
pub use sse::SseDecoder;

use crate::ids::TurnId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub rank: u32,
    pub title: String,
    pub url: String,
    #[serde(default)]
    pub snippet: String,
}

/// Results for one query. An empty `results` list is the "no results"
/// signal; it is not an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultPage {
    pub query_text: String,
    pub results: Vec<SearchResult>,
}

impl ResultPage {
    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
}

impl ChatMessage {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: ChatRole::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseChunk {
    pub turn_id: TurnId,
    pub chunk_index: u32,
    pub text: String,
    pub is_final: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider refused the request: {0}")]
    Content(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_))
    }
}

pub type FragmentStream = Pin<Box<dyn Stream<Item = Result<String, ProviderError>> + Send>>;
pub type ChunkStream = Pin<Box<dyn Stream<Item = Result<ResponseChunk, ProviderError>> + Send>>;

#[async_trait]
pub trait ChatProvider: Send + Sync {
    /// Opens a stream of raw text fragments for the reply to `history`.
    async fn stream(&self, history: &[ChatMessage]) -> Result<FragmentStream, ProviderError>;

    /// Minimal request used to check credentials and reachability.
    async fn probe(&self) -> Result<(), ProviderError> {
        let mut s = self.stream(&[ChatMessage::user("ping")]).await?;
        match s.next().await {
            Some(Err(e)) => Err(e),
            _ => Ok(()),
        }
    }
}

#[async_trait]
pub trait SearchProvider: Send + Sync {
    async fn search(&self, query: &str) -> Result<ResultPage, ProviderError>;

    async fn probe(&self) -> Result<(), ProviderError> {
        self.search("test").await.map(|_| ())
    }
}

/// Streams the reply to `history` as numbered chunks. The last chunk has
/// `is_final` set; an empty reply yields a single empty final chunk. A
/// retryable failure before the first fragment is retried once.
pub async fn chat_complete(
    provider: Arc<dyn ChatProvider>,
    turn_id: TurnId,
    history: Vec<ChatMessage>,
) -> Result<ChunkStream, ProviderError> {
    match history.last() {
        Some(m) if m.role == ChatRole::User => {}
        _ => return Err(ProviderError::InvalidRequest("history must end with a user prompt".into())),
    }
    let (first, rest) = match open(&*provider, &history).await {
        Err(e) if e.is_retryable() => open(&*provider, &history).await?,
        other => other?,
    };

    struct State {
        turn_id: TurnId,
        rest: FragmentStream,
        held: Option<String>,
        pending_err: Option<ProviderError>,
        index: u32,
        done: bool,
    }
    let state = State { turn_id, rest, held: first, pending_err: None, index: 0, done: false };
    Ok(Box::pin(futures::stream::unfold(state, |mut st| async move {
        if st.done {
            return None;
        }
        if let Some(e) = st.pending_err.take() {
            st.done = true;
            return Some((Err(e), st));
        }
        let chunk = |st: &State, text: String, is_final: bool| ResponseChunk {
            turn_id: st.turn_id.clone(),
            chunk_index: st.index,
            text,
            is_final,
        };
        let Some(held) = st.held.take() else {
            st.done = true;
            return Some((Ok(chunk(&st, String::new(), true)), st));
        };
        // one fragment of lookahead decides whether `held` is the last
        let out = loop {
            match st.rest.next().await {
                Some(Ok(next)) if next.is_empty() => continue,
                Some(Ok(next)) => {
                    st.held = Some(next);
                    break chunk(&st, held, false);
                }
                Some(Err(e)) => {
                    st.pending_err = Some(e);
                    break chunk(&st, held, false);
                }
                None => {
                    st.done = true;
                    break chunk(&st, held, true);
                }
            }
        };
        st.index += 1;
        Some((Ok(out), st))
    })))
}

/// Opens a stream and pulls its first fragment, so that failures before
/// any output surface here.
async fn open(provider: &dyn ChatProvider, history: &[ChatMessage]) -> Result<(Option<String>, FragmentStream), ProviderError> {
    let mut s = provider.stream(history).await?;
    loop {
        match s.next().await {
            Some(Ok(f)) if f.is_empty() => continue,
            Some(Ok(f)) => return Ok((Some(f), s)),
            Some(Err(e)) => return Err(e),
            None => return Ok((None, s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LlmProviderKind {
    #[serde(rename = "openai-compatible")]
    OpenAiCompatible,
    #[serde(rename = "gemini-compatible")]
    GeminiCompatible,
    #[serde(rename = "claude-compatible")]
    ClaudeCompatible,
    #[serde(rename = "mock-echo")]
    MockEcho,
}

impl LlmProviderKind {
    pub fn is_mock(self) -> bool {
        self == LlmProviderKind::MockEcho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchProviderKind {
    #[serde(rename = "generic-search-api")]
    GenericSearchApi,
    #[serde(rename = "mock-corpus")]
    MockCorpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LlmParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub provider: LlmProviderKind,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub params: LlmParams,
    /// mock-echo: characters per chunk.
    #[serde(default = "default_chunk_chars")]
    pub chunk_chars: usize,
    /// mock-echo: fail the stream after this many chunks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_after_chunks: Option<usize>,
}

fn default_chunk_chars() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub provider: SearchProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default = "default_results_per_query")]
    pub results_per_query: u32,
    /// mock-corpus fixtures file; the built-in corpus when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<String>,
}

fn default_results_per_query() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub llm: LlmConfig,
    pub search: SearchConfig,
}

impl ProviderConfig {
    pub fn mock() -> Self {
        Self {
            llm: LlmConfig {
                provider: LlmProviderKind::MockEcho,
                model: "mock-echo".into(),
                api_key_ref: None,
                base_url: None,
                params: LlmParams::default(),
                chunk_chars: default_chunk_chars(),
                fail_after_chunks: None,
            },
            search: SearchConfig {
                provider: SearchProviderKind::MockCorpus,
                api_key_ref: None,
                base_url: None,
                results_per_query: default_results_per_query(),
                corpus_path: None,
            },
        }
    }

    /// Structural checks that need no credential lookups.
    pub fn check(&self) -> Result<(), String> {
        if !(1..=50).contains(&self.search.results_per_query) {
            return Err("search.results_per_query must be in 1..=50".into());
        }
        if self.llm.provider.is_mock() && self.llm.chunk_chars == 0 {
            return Err("llm.chunk_chars must be at least 1".into());
        }
        if !self.llm.provider.is_mock() && self.llm.model.trim().is_empty() {
            return Err("llm.model is required".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub connect: Duration,
    pub request: Duration,
    pub probe: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self { connect: Duration::from_secs(10), request: Duration::from_secs(120), probe: Duration::from_secs(10) }
    }
}

/// Looks up an API key by reference.
pub trait KeyResolver: Send + Sync {
    fn resolve(&self, key_ref: &str) -> Option<String>;
}

impl KeyResolver for std::collections::HashMap<String, String> {
    fn resolve(&self, key_ref: &str) -> Option<String> {
        self.get(key_ref).cloned()
    }
}

fn resolve_key(keys: &dyn KeyResolver, key_ref: &Option<String>, what: &str) -> Result<String, ProviderError> {
    let key_ref = key_ref.as_deref().ok_or_else(|| ProviderError::Auth(format!("{what}: no api_key_ref configured")))?;
    keys.resolve(key_ref).ok_or_else(|| ProviderError::Auth(format!("{what}: key {key_ref:?} not found")))
}

fn http_client(timeouts: &Timeouts) -> Result<reqwest::Client, ProviderError> {
    reqwest::Client::builder()
        .connect_timeout(timeouts.connect)
        .timeout(timeouts.request)
        .build()
        .map_err(|e| ProviderError::Unavailable(e.to_string()))
}

pub fn build_chat(
    config: &LlmConfig,
    keys: &dyn KeyResolver,
    timeouts: &Timeouts,
) -> Result<Arc<dyn ChatProvider>, ProviderError> {
    if config.provider == LlmProviderKind::MockEcho {
        return Ok(Arc::new(MockEcho { chunk_chars: config.chunk_chars.max(1), fail_after_chunks: config.fail_after_chunks }));
    }
    let key = resolve_key(keys, &config.api_key_ref, "llm")?;
    let client = http_client(timeouts)?;
    let base = config.base_url.clone();
    let model = config.model.clone();
    let params = config.params.clone();
    Ok(match config.provider {
        LlmProviderKind::OpenAiCompatible => Arc::new(OpenAiChat::new(client, base, key, model, params)),
        LlmProviderKind::ClaudeCompatible => Arc::new(ClaudeChat::new(client, base, key, model, params)),
        LlmProviderKind::GeminiCompatible => Arc::new(GeminiChat::new(client, base, key, model, params)),
        LlmProviderKind::MockEcho => unreachable!(),
    })
}

pub fn build_search(
    config: &SearchConfig,
    keys: &dyn KeyResolver,
    timeouts: &Timeouts,
) -> Result<Arc<dyn SearchProvider>, ProviderError> {
    let limit = config.results_per_query.clamp(1, 50) as usize;
    match config.provider {
        SearchProviderKind::MockCorpus => {
            let docs = match &config.corpus_path {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| ProviderError::Unavailable(format!("corpus {path}: {e}")))?;
                    parse_corpus(&text).map_err(ProviderError::InvalidRequest)?
                }
                None => parse_corpus(DEFAULT_CORPUS).expect("built-in corpus parses"),
            };
            Ok(Arc::new(MockCorpus::new(docs, limit)))
        }
        SearchProviderKind::GenericSearchApi => {
            let key = resolve_key(keys, &config.api_key_ref, "search")?;
            let base = config
                .base_url
                .clone()
                .ok_or_else(|| ProviderError::InvalidRequest("search.base_url is required".into()))?;
            Ok(Arc::new(GenericSearch::new(http_client(timeouts)?, base, key, limit)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProbeStatus {
    Ok,
    AuthFailed { detail: String },
    Unreachable { detail: String },
}

impl ProbeStatus {
    fn from_result(r: Result<(), ProviderError>) -> Self {
        match r {
            // a refusal still proves the key and the endpoint work
            Ok(()) | Err(ProviderError::Content(_)) => ProbeStatus::Ok,
            Err(ProviderError::Auth(d)) => ProbeStatus::AuthFailed { detail: d },
            Err(ProviderError::Unavailable(d)) | Err(ProviderError::InvalidRequest(d)) => {
                ProbeStatus::Unreachable { detail: d }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub llm: ProbeStatus,
    pub search: ProbeStatus,
}

/// Probes each configured provider. Never fails; problems are statuses.
pub async fn verify_credentials(config: &ProviderConfig, keys: &dyn KeyResolver, timeouts: &Timeouts) -> VerifyReport {
    let llm = match build_chat(&config.llm, keys, timeouts) {
        Ok(p) => probe_with_timeout(p.probe(), timeouts.probe).await,
        Err(e) => ProbeStatus::from_result(Err(e)),
    };
    let search = match build_search(&config.search, keys, timeouts) {
        Ok(p) => probe_with_timeout(p.probe(), timeouts.probe).await,
        Err(e) => ProbeStatus::from_result(Err(e)),
    };
    VerifyReport { llm, search }
}

async fn probe_with_timeout(
    fut: impl std::future::Future<Output = Result<(), ProviderError>>,
    limit: Duration,
) -> ProbeStatus {
    match tokio::time::timeout(limit, fut).await {
        Ok(r) => ProbeStatus::from_result(r),
        Err(_) => ProbeStatus::Unreachable { detail: format!("no answer within {} ms", limit.as_millis()) },
    }
}
