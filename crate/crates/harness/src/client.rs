//! Typed HTTP client for the study service.

use echo_core::provider::SseDecoder;
use echo_server::api::*;
use reqwest::Method;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// An error answer from the service, or a failure to reach it (status 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("{status} {code}: {message}")]
pub struct ServiceError {
    pub status: u16,
    pub code: String,
    /// Gate reason, for gate refusals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub message: String,
    #[serde(default)]
    pub body: Value,
}

impl ServiceError {
    fn transport(e: impl std::fmt::Display) -> Self {
        Self { status: 0, code: "transport".into(), reason: None, message: e.to_string(), body: Value::Null }
    }

    fn from_body(status: u16, body: Value) -> Self {
        let text = |k: &str| body.get(k).and_then(Value::as_str).map(str::to_string);
        Self {
            status,
            code: text("error").unwrap_or_else(|| "http".into()),
            reason: text("reason"),
            message: text("message").unwrap_or_default(),
            body,
        }
    }

    /// True when this error is `expected`, given as an error code or a
    /// gate reason.
    pub fn matches(&self, expected: &str) -> bool {
        self.code == expected || self.reason.as_deref() == Some(expected)
    }
}

#[derive(Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self { http: reqwest::Client::new(), base: base.into().trim_end_matches('/').to_string() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn raw(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<&(impl Serialize + ?Sized)>,
    ) -> Result<reqwest::Response, ServiceError> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await.map_err(ServiceError::transport)?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.map_err(ServiceError::transport)?;
        Err(ServiceError::from_body(status, serde_json::from_slice(&bytes).unwrap_or(Value::Null)))
    }

    pub async fn send<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<&(impl Serialize + ?Sized)>,
    ) -> Result<T, ServiceError> {
        let resp = self.raw(method, path, token, body).await?;
        resp.json().await.map_err(ServiceError::transport)
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str, token: &str) -> Result<T, ServiceError> {
        self.send(Method::GET, path, Some(token), None::<&Value>).await
    }

    pub async fn post<T: DeserializeOwned>(&self, path: &str, token: Option<&str>, body: &impl Serialize) -> Result<T, ServiceError> {
        self.send(Method::POST, path, token, Some(body)).await
    }

    pub async fn bytes(&self, path: &str, token: &str) -> Result<Vec<u8>, ServiceError> {
        let resp = self.raw(Method::GET, path, Some(token), None::<&Value>).await?;
        Ok(resp.bytes().await.map_err(ServiceError::transport)?.to_vec())
    }

    /// Logs in as `username`, creating the account first if the service
    /// has no administrator yet.
    pub async fn admin_token(&self, username: &str, password: &str) -> Result<String, ServiceError> {
        let creds = Credentials { username: username.into(), password: password.into() };
        let status: SetupStatus = self.send(Method::GET, "/api/setup", None, None::<&Value>).await?;
        let path = if status.setup_required { "/api/setup" } else { "/api/admin/login" };
        let token: TokenResponse = self.post(path, None, &creds).await?;
        Ok(token.token)
    }

    /// Sends a prompt and collects every frame of the streamed reply.
    pub async fn chat(&self, token: &str, req: &ChatRequest) -> Result<Vec<ChatFrame>, ServiceError> {
        let resp = self.raw(Method::POST, "/api/session/chat", Some(token), Some(req)).await?;
        let mut decoder = SseDecoder::default();
        let mut frames = Vec::new();
        let mut resp = resp;
        while let Some(bytes) = resp.chunk().await.map_err(ServiceError::transport)? {
            for data in decoder.feed(&bytes) {
                frames.push(serde_json::from_str(&data).map_err(ServiceError::transport)?);
            }
        }
        if let Some(data) = decoder.finish() {
            frames.push(serde_json::from_str(&data).map_err(ServiceError::transport)?);
        }
        Ok(frames)
    }
}
