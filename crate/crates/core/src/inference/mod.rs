//! Answer generation over a fused context.
//!
//! Three modes share one prompt template:
//!
//! * **standalone**: the server's own generator answers from the documents;
//! * **cascading**: an untrusted third-party provider first answers from the
//!   question and options alone, and its answer is added to the prompt as
//!   extra context for the server's generator;
//! * **confidential**: context and question are sealed to an attested remote
//!   endpoint, which builds the prompt and generates inside its boundary.

pub mod confidential;
pub mod extract;
pub mod http;
pub mod prompt;
pub mod stub;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attestation::AttestationError;
use crate::clock::Clock;
use crate::fusion::FusedContext;

pub use confidential::{ConfidentialClient, ConfidentialTransport, MockConfidentialEndpoint};
pub use extract::{extract_answer, Extraction, ExtractionRule};
pub use prompt::{build_prompt, build_provider_prompt, PromptTemplate};
pub use stub::StubGenerator;

pub const DEFAULT_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InferenceError {
    #[error("fused context has no documents")]
    EmptyContext,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("generation timed out")]
    Timeout,
    #[error("confidential endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("confidential endpoint has not been attested")]
    HandshakeRequired,
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("endpoint attestation failed: {0}")]
    Attestation(#[from] AttestationError),
    #[error("mode {0} is not configured")]
    ModeNotConfigured(InferenceMode),
    #[error("bad backend response: {0}")]
    BadResponse(String),
}

impl InferenceError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyContext => "empty_context",
            Self::BackendUnavailable(_) => "backend_unavailable",
            Self::Timeout => "timeout",
            Self::EndpointUnreachable(_) => "endpoint_unreachable",
            Self::HandshakeRequired => "handshake_required",
            Self::AuthenticationFailure => "authentication_failure",
            Self::Attestation(_) => "attestation",
            Self::ModeNotConfigured(_) => "mode_not_configured",
            Self::BadResponse(_) => "bad_response",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Standalone,
    Cascading,
    Confidential,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [Self::Standalone, Self::Cascading, Self::Confidential];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Standalone => "standalone",
            Self::Cascading => "cascading",
            Self::Confidential => "confidential",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standalone" => Ok(Self::Standalone),
            "cascading" | "cascaded" => Ok(Self::Cascading),
            "confidential" => Ok(Self::Confidential),
            other => Err(format!("unknown inference mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

impl AnswerOption {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
        }
    }
}

/// A question with zero or more labelled options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub options: Vec<AnswerOption>,
}

impl Question {
    pub fn free_form(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            options: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f32,
}

impl InferenceRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<TokenCounts>,
}

/// Output of an untrusted provider. Context only, never the answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxiliaryAnswer {
    pub provider_id: String,
    pub answer_text: String,
    pub latency_ms: u64,
}

/// A text generator: local stub, local model server, and so on.
pub trait Generator: Send + Sync {
    fn backend_id(&self) -> &str;
    fn generate(&self, req: &InferenceRequest) -> Result<InferenceResponse, InferenceError>;
}

/// A non-confidential third-party model. Receives question-only prompts.
pub trait AuxProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn generate(&self, prompt: &str, max_tokens: u32) -> Result<String, InferenceError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOutcome {
    pub mode: InferenceMode,
    pub response: InferenceResponse,
    /// Cascading ran without an auxiliary answer because the provider failed.
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<AuxiliaryAnswer>,
}

/// Dispatches a fused context to the configured backend for a mode.
pub struct InferenceEngine {
    template: PromptTemplate,
    generator: Arc<dyn Generator>,
    provider: Option<Arc<dyn AuxProvider>>,
    confidential: Option<Arc<ConfidentialClient>>,
    clock: Arc<dyn Clock>,
    max_tokens: u32,
}

impl InferenceEngine {
    pub fn new(template: PromptTemplate, generator: Arc<dyn Generator>, clock: Arc<dyn Clock>) -> Self {
        Self {
            template,
            generator,
            provider: None,
            confidential: None,
            clock,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_provider(mut self, provider: Arc<dyn AuxProvider>) -> Self {
        self.provider = Some(provider);
        self
    }

    pub fn with_confidential(mut self, client: Arc<ConfidentialClient>) -> Self {
        self.confidential = Some(client);
        self
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn confidential(&self) -> Option<&Arc<ConfidentialClient>> {
        self.confidential.as_ref()
    }

    pub fn infer(
        &self,
        mode: InferenceMode,
        fused: &FusedContext,
        question: &Question,
    ) -> Result<InferenceOutcome, InferenceError> {
        match mode {
            InferenceMode::Standalone => {
                let prompt = build_prompt(&self.template, fused, question, None)?;
                let response = self.infer_standalone(&self.request(prompt))?;
                Ok(InferenceOutcome {
                    mode,
                    response,
                    degraded: false,
                    aux: None,
                })
            }
            InferenceMode::Cascading => self.infer_cascading(fused, question),
            InferenceMode::Confidential => {
                let client = self
                    .confidential
                    .as_ref()
                    .ok_or(InferenceError::ModeNotConfigured(mode))?;
                let response = client.infer(fused, question, &self.template)?;
                Ok(InferenceOutcome {
                    mode,
                    response,
                    degraded: false,
                    aux: None,
                })
            }
        }
    }

    fn request(&self, prompt: String) -> InferenceRequest {
        InferenceRequest {
            prompt,
            max_tokens: self.max_tokens,
            temperature: 0.0,
        }
    }

    pub fn infer_standalone(&self, req: &InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        let start = self.clock.now_ms();
        let mut response = self.generator.generate(req)?;
        response.latency_ms = self.clock.now_ms().saturating_sub(start).max(response.latency_ms);
        Ok(response)
    }

    /// Asks the provider first, then the local generator. A failing or
    /// missing provider degrades to the standalone prompt.
    pub fn infer_cascading(
        &self,
        fused: &FusedContext,
        question: &Question,
    ) -> Result<InferenceOutcome, InferenceError> {
        if fused.documents.is_empty() {
            return Err(InferenceError::EmptyContext);
        }
        let aux = match &self.provider {
            Some(provider) => {
                let start = self.clock.now_ms();
                let provider_prompt = build_provider_prompt(&self.template, question);
                match provider.generate(&provider_prompt, self.max_tokens) {
                    Ok(text) => Some(AuxiliaryAnswer {
                        provider_id: provider.provider_id().to_string(),
                        answer_text: text,
                        latency_ms: self.clock.now_ms().saturating_sub(start),
                    }),
                    Err(e) => {
                        tracing::warn!(provider = provider.provider_id(), error = %e, "auxiliary provider failed; degrading to standalone");
                        None
                    }
                }
            }
            None => None,
        };
        let prompt = build_prompt(&self.template, fused, question, aux.as_ref())?;
        let response = self.infer_standalone(&self.request(prompt))?;
        Ok(InferenceOutcome {
            mode: InferenceMode::Cascading,
            response,
            degraded: aux.is_none(),
            aux,
        })
    }
}
