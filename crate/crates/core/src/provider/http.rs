//! HTTP adapters for vendor chat and search APIs.

use async_trait::async_trait;
use futures::StreamExt;
use serde_json::{json, Value};

use super::sse;
use super::{
    ChatMessage, ChatProvider, ChatRole, FragmentStream, LlmParams, ProviderError, ResultPage, SearchProvider,
    SearchResult,
};

enum Decoded {
    Text(String),
    Skip,
    Done,
}

fn send_error(e: reqwest::Error) -> ProviderError {
    ProviderError::Unavailable(e.to_string())
}

async fn check_status(resp: reqwest::Response) -> Result<reqwest::Response, ProviderError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().await.unwrap_or_default();
    let detail = format!("HTTP {}: {}", status.as_u16(), body.chars().take(300).collect::<String>());
    Err(match status.as_u16() {
        401 | 403 => ProviderError::Auth(detail),
        408 | 429 | 500..=599 => ProviderError::Unavailable(detail),
        _ => ProviderError::Content(detail),
    })
}

fn fragments(resp: reqwest::Response, decode: fn(&str) -> Result<Decoded, ProviderError>) -> FragmentStream {
    let events = sse::events(Box::pin(resp.bytes_stream()));
    let s = events
        .map(move |r| r.and_then(|data| decode(&data)))
        .scan(false, |stopped, item| {
            let out = match item {
                _ if *stopped => None,
                Ok(Decoded::Done) => None,
                Ok(Decoded::Skip) => Some(None),
                Ok(Decoded::Text(t)) => Some(Some(Ok(t))),
                Err(e) => {
                    *stopped = true;
                    Some(Some(Err(e)))
                }
            };
            futures::future::ready(out)
        })
        .filter_map(futures::future::ready);
    Box::pin(s)
}

fn parse(data: &str) -> Result<Value, ProviderError> {
    serde_json::from_str(data).map_err(|e| ProviderError::Unavailable(format!("malformed stream event: {e}")))
}

fn trim_base(base: Option<String>, default: &str) -> String {
    base.unwrap_or_else(|| default.to_string()).trim_end_matches('/').to_string()
}

/// OpenAI chat-completions wire format (also served by many gateways).
pub struct OpenAiChat {
    client: reqwest::Client,
    base: String,
    key: String,
    model: String,
    params: LlmParams,
}

impl OpenAiChat {
    pub fn new(client: reqwest::Client, base: Option<String>, key: String, model: String, params: LlmParams) -> Self {
        Self { client, base: trim_base(base, "https://api.openai.com/v1"), key, model, params }
    }

    fn decode(data: &str) -> Result<Decoded, ProviderError> {
        if data.trim() == "[DONE]" {
            return Ok(Decoded::Done);
        }
        let v = parse(data)?;
        if let Some(err) = v.get("error") {
            return Err(ProviderError::Content(err.to_string()));
        }
        match v.pointer("/choices/0/delta/content").and_then(Value::as_str) {
            Some(t) => Ok(Decoded::Text(t.to_string())),
            None => Ok(Decoded::Skip),
        }
    }
}

#[async_trait]
impl ChatProvider for OpenAiChat {
    async fn stream(&self, history: &[ChatMessage]) -> Result<FragmentStream, ProviderError> {
        let messages: Vec<Value> = history
            .iter()
            .map(|m| {
                let role = match m.role {
                    ChatRole::System => "system",
                    ChatRole::User => "user",
                    ChatRole::Assistant => "assistant",
                };
                json!({"role": role, "content": m.text})
            })
            .collect();
        let mut body = json!({"model": self.model, "messages": messages, "stream": true});
        if let Some(t) = self.params.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(n) = self.params.max_tokens {
            body["max_tokens"] = json!(n);
        }
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.base))
            .bearer_auth(&self.key)
            .json(&body)
            .send()
            .await
            .map_err(send_error)?;
        Ok(fragments(check_status(resp).await?, Self::decode))
    }
}

/// Anthropic messages API.
pub struct ClaudeChat {
    client: reqwest::Client,
    base: String,
    key: String,
    model: String,
    params: LlmParams,
}

impl ClaudeChat {
    pub fn new(client: reqwest::Client, base: Option<String>, key: String, model: String, params: LlmParams) -> Self {
        Self { client, base: trim_base(base, "https://api.anthropic.com"), key, model, params }
    }

    fn decode(data: &str) -> Result<Decoded, ProviderError> {
        let v = parse(data)?;
        match v.get("type").and_then(Value::as_str) {
            Some("content_block_delta") => Ok(v
                .pointer("/delta/text")
                .and_then(Value::as_str)
                .map_or(Decoded::Skip, |t| Decoded::Text(t.to_string()))),
            Some("message_stop") => Ok(Decoded::Done),
            Some("error") => {
                let kind = v.pointer("/error/type").and_then(Value::as_str).unwrap_or("");
                let detail = v.get("error").map(Value::to_string).unwrap_or_default();
                Err(match kind {
                    "overloaded_error" | "api_error" => ProviderError::Unavailable(detail),
                    "authentication_error" | "permission_error" => ProviderError::Auth(detail),
                    _ => ProviderError::Content(detail),
                })
            }
            _ => Ok(Decoded::Skip),
        }
    }
}

#[async_trait]
impl ChatProvider for ClaudeChat {
    async fn stream(&self, history: &[ChatMessage]) -> Result<FragmentStream, ProviderError> {
        let system: Vec<&str> =
            history.iter().filter(|m| m.role == ChatRole::System).map(|m| m.text.as_str()).collect();
        let messages: Vec<Value> = history
            .iter()
            .filter(|m| m.role != ChatRole::System)
            .map(|m| {
                let role = if m.role == ChatRole::User { "user" } else { "assistant" };
                json!({"role": role, "content": m.text})
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "max_tokens": self.params.max_tokens.unwrap_or(1024),
            "messages": messages,
            "stream": true,
        });
        if !system.is_empty() {
            body["system"] = json!(system.join("\n\n"));
        }
        if let Some(t) = self.params.temperature {
            body["temperature"] = json!(t);
        }
        let resp = self
            .client
            .post(format!("{}/v1/messages", self.base))
            .header("x-api-key", &self.key)
            .header("anthropic-version", "2023-06-01")
            .json(&body)
            .send()
            .await
            .map_err(send_error)?;
        Ok(fragments(check_status(resp).await?, Self::decode))
    }
}

/// Google generative-language streamGenerateContent.
pub struct GeminiChat {
    client: reqwest::Client,
    base: String,
    key: String,
    model: String,
    params: LlmParams,
}

impl GeminiChat {
    pub fn new(client: reqwest::Client, base: Option<String>, key: String, model: String, params: LlmParams) -> Self {
        Self { client, base: trim_base(base, "https://generativelanguage.googleapis.com"), key, model, params }
    }

    fn decode(data: &str) -> Result<Decoded, ProviderError> {
        let v = parse(data)?;
        if let Some(reason) = v.pointer("/promptFeedback/blockReason") {
            return Err(ProviderError::Content(format!("blocked: {reason}")));
        }
        if let Some(err) = v.get("error") {
            return Err(ProviderError::Content(err.to_string()));
        }
        let text: String = v
            .pointer("/candidates/0/content/parts")
            .and_then(Value::as_array)
            .map(|parts| parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect())
            .unwrap_or_default();
        Ok(if text.is_empty() { Decoded::Skip } else { Decoded::Text(text) })
    }
}

#[async_trait]
impl ChatProvider for GeminiChat {
    async fn stream(&self, history: &[ChatMessage]) -> Result<FragmentStream, ProviderError> {
        let system: Vec<Value> = history
            .iter()
            .filter(|m| m.role == ChatRole::System)
            .map(|m| json!({"text": m.text}))
            .collect();
        let contents: Vec<Value> = history
            .iter()
            .filter(|m| m.role != ChatRole::System)
            .map(|m| {
                let role = if m.role == ChatRole::User { "user" } else { "model" };
                json!({"role": role, "parts": [{"text": m.text}]})
            })
            .collect();
        let mut body = json!({"contents": contents});
        if !system.is_empty() {
            body["systemInstruction"] = json!({"parts": system});
        }
        let mut gen = serde_json::Map::new();
        if let Some(t) = self.params.temperature {
            gen.insert("temperature".into(), json!(t));
        }
        if let Some(n) = self.params.max_tokens {
            gen.insert("maxOutputTokens".into(), json!(n));
        }
        if !gen.is_empty() {
            body["generationConfig"] = Value::Object(gen);
        }
        let resp = self
            .client
            .post(format!("{}/v1beta/models/{}:streamGenerateContent?alt=sse", self.base, self.model))
            .header("x-goog-api-key", &self.key)
            .json(&body)
            .send()
            .await
            .map_err(send_error)?;
        Ok(fragments(check_status(resp).await?, Self::decode))
    }
}

/// Web search over a JSON API in the common `web.results` / `results`
/// shape, authenticated with a subscription-token header.
pub struct GenericSearch {
    client: reqwest::Client,
    base: String,
    key: String,
    limit: usize,
}

impl GenericSearch {
    pub fn new(client: reqwest::Client, base: String, key: String, limit: usize) -> Self {
        Self { client, base, key, limit }
    }

    fn page(query: &str, v: &Value, limit: usize) -> ResultPage {
        let items = v
            .pointer("/web/results")
            .or_else(|| v.get("results"))
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default();
        let results = items
            .iter()
            .filter_map(|item| {
                let url = item.get("url").and_then(Value::as_str)?;
                url::Url::parse(url).ok()?;
                let title = item.get("title").and_then(Value::as_str).unwrap_or_default();
                let snippet = item
                    .get("description")
                    .or_else(|| item.get("snippet"))
                    .and_then(Value::as_str)
                    .unwrap_or_default();
                Some((title.to_string(), url.to_string(), snippet.to_string()))
            })
            .take(limit)
            .enumerate()
            .map(|(i, (title, url, snippet))| SearchResult { rank: i as u32 + 1, title, url, snippet })
            .collect();
        ResultPage { query_text: query.to_string(), results }
    }
}

#[async_trait]
impl SearchProvider for GenericSearch {
    async fn search(&self, query: &str) -> Result<ResultPage, ProviderError> {
        if query.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("empty query".into()));
        }
        let mut url = url::Url::parse(&self.base).map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        url.query_pairs_mut().append_pair("q", query).append_pair("count", &self.limit.to_string());
        let resp = self
            .client
            .get(url)
            .header("X-Subscription-Token", &self.key)
            .header("Accept", "application/json")
            .send()
            .await
            .map_err(send_error)?;
        let v: Value = check_status(resp).await?.json().await.map_err(send_error)?;
        Ok(Self::page(query, &v, self.limit))
    }
}
