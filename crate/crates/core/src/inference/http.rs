//! HTTP adapters for real backends.
//!
//! * [`OpenAiChatGenerator`]: any OpenAI-compatible `/v1/chat/completions`.
//! * [`HttpProvider`]: third-party provider, `POST /generate
//!   {"prompt","max_tokens"}` answering `{"text"}`.
//! * [`HttpConfidentialTransport`]: `POST /attest` (JSON) and
//!   `POST /sealed-infer` (sealed payload encoding both ways).

use std::io::Read;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::confidential::{ConfidentialTransport, EndpointAttestRequest};
use super::{AuxProvider, Generator, InferenceError, InferenceRequest, InferenceResponse, TokenCounts};
use crate::attestation::AttestationEvidence;

const MAX_SEALED_REPLY: u64 = 16 * 1024 * 1024;

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

fn is_timeout(e: &ureq::Transport) -> bool {
    let text = e.to_string().to_lowercase();
    text.contains("timed out") || text.contains("timeout") || text.contains("would block")
}

fn backend_error(e: ureq::Error) -> InferenceError {
    match e {
        ureq::Error::Status(code, _) => InferenceError::BackendUnavailable(format!("HTTP status {code}")),
        ureq::Error::Transport(t) if is_timeout(&t) => InferenceError::Timeout,
        ureq::Error::Transport(t) => InferenceError::BackendUnavailable(t.to_string()),
    }
}

fn endpoint_error(e: ureq::Error) -> InferenceError {
    match e {
        ureq::Error::Transport(t) if is_timeout(&t) => InferenceError::Timeout,
        other => InferenceError::EndpointUnreachable(other.to_string()),
    }
}

/// Local model server speaking the OpenAI chat-completions protocol.
pub struct OpenAiChatGenerator {
    base_url: String,
    model: String,
    api_key: Option<String>,
    backend_id: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u32,
    completion_tokens: u32,
}

impl OpenAiChatGenerator {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let model = model.into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            backend_id: format!("openai-compat:{model}"),
            model,
            api_key: None,
            agent: agent(timeout),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }
}

impl Generator for OpenAiChatGenerator {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn generate(&self, req: &InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        let mut call = self
            .agent
            .post(&format!("{}/v1/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        let resp: ChatResponse = call
            .send_json(body)
            .map_err(backend_error)?
            .into_json()
            .map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| InferenceError::BadResponse("no choices in response".into()))?;
        Ok(InferenceResponse {
            text: text.trim().to_string(),
            backend_id: self.backend_id.clone(),
            latency_ms: 0,
            token_counts: resp.usage.map(|u| TokenCounts {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            }),
        })
    }
}

#[derive(Serialize)]
struct ProviderRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ProviderResponse {
    text: String,
}

pub struct HttpProvider {
    url: String,
    provider_id: String,
    agent: ureq::Agent,
}

impl HttpProvider {
    /// `base_url` is the provider root; requests go to `{base_url}/generate`.
    pub fn new(base_url: impl Into<String>, provider_id: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: format!("{}/generate", base_url.into().trim_end_matches('/')),
            provider_id: provider_id.into(),
            agent: agent(timeout),
        }
    }
}

impl AuxProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn generate(&self, prompt: &str, max_tokens: u32) -> Result<String, InferenceError> {
        let resp: ProviderResponse = self
            .agent
            .post(&self.url)
            .send_json(ProviderRequest { prompt, max_tokens })
            .map_err(backend_error)?
            .into_json()
            .map_err(|e| InferenceError::BadResponse(e.to_string()))?;
        Ok(resp.text)
    }
}

/// Provider double that records every prompt it receives.
pub struct MockProvider {
    provider_id: String,
    reply: Result<String, InferenceError>,
    seen: Mutex<Vec<String>>,
}

impl MockProvider {
    /// Always answers with `text`.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            provider_id: "mock-provider".into(),
            reply: Ok(text.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Always fails as if the provider were down.
    pub fn unavailable() -> Self {
        Self {
            provider_id: "mock-provider".into(),
            reply: Err(InferenceError::BackendUnavailable("provider disabled".into())),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.seen.lock().expect("provider log lock").clone()
    }
}

impl AuxProvider for MockProvider {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn generate(&self, prompt: &str, _max_tokens: u32) -> Result<String, InferenceError> {
        self.seen.lock().expect("provider log lock").push(prompt.to_string());
        self.reply.clone()
    }
}

pub struct HttpConfidentialTransport {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpConfidentialTransport {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: agent(timeout),
        }
    }
}

impl ConfidentialTransport for HttpConfidentialTransport {
    fn attest(&self, req: &EndpointAttestRequest) -> Result<AttestationEvidence, InferenceError> {
        self.agent
            .post(&format!("{}/attest", self.base_url))
            .send_json(req)
            .map_err(endpoint_error)?
            .into_json()
            .map_err(|e| InferenceError::BadResponse(e.to_string()))
    }

    fn sealed_infer(&self, body: &[u8]) -> Result<Vec<u8>, InferenceError> {
        let resp = self
            .agent
            .post(&format!("{}/sealed-infer", self.base_url))
            .set("Content-Type", "application/octet-stream")
            .send_bytes(body)
            .map_err(endpoint_error)?;
        let mut out = Vec::new();
        resp.into_reader()
            .take(MAX_SEALED_REPLY)
            .read_to_end(&mut out)
            .map_err(|e| InferenceError::EndpointUnreachable(e.to_string()))?;
        Ok(out)
    }
}
