//! Chat-completion and embedding provider abstraction.
//!
//! A [`Gateway`] routes each call to a backend by [`ChatRole`], filling in the
//! model name configured for that role in the [`ProviderProfile`]. Backends are
//! either the OpenAI-compatible [`remote::RemoteBackend`] or one of the
//! deterministic mocks in [`mock`].

pub mod mock;
pub mod remote;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector_store::EmbeddingVector;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("http {status} after {attempts} attempt(s): {body}")]
    Http {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("could not decode provider response: {0}")]
    Decode(String),
    #[error("scripted reply #{index} does not match request\n  expected: {expected}\n  actual:   {actual}")]
    ScriptedMismatch {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("script exhausted; no entry matches request: {actual}")]
    ScriptExhausted { actual: String },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, GatewayError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

impl MessageRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

/// A fully resolved chat request as sent to a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Result<Self> {
        let request = Self {
            messages,
            model: model.into(),
            temperature: 0.0,
            max_tokens: None,
            seed: None,
        };
        request.validate()?;
        Ok(request)
    }

    /// At least one message; a system message, if any, must come first and only once.
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "chat request needs at least one message".into(),
            ));
        }
        let misplaced = self
            .messages
            .iter()
            .skip(1)
            .any(|m| m.role == MessageRole::System);
        if misplaced {
            return Err(GatewayError::InvalidRequest(
                "system message must be the first message".into(),
            ));
        }
        Ok(())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User)
            .map(|m| m.content.as_str())
    }

    pub fn system_prompt(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == MessageRole::System)
            .map(|m| m.content.as_str())
    }

    /// One-line description used in mismatch diagnostics.
    pub fn summary(&self) -> String {
        let last = self.last_user().unwrap_or("");
        let excerpt: String = last.chars().take(120).collect();
        format!(
            "model={} messages={} last_user={:?}",
            self.model,
            self.messages.len(),
            excerpt
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
}

/// Which part of the system is calling. Each role maps to its own model name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    Doctor,
    Summarizer,
    Augmenter,
    Judge,
}

impl fmt::Display for ChatRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ChatRole::Doctor => "doctor",
            ChatRole::Summarizer => "summarizer",
            ChatRole::Augmenter => "augmenter",
            ChatRole::Judge => "judge",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelNames {
    pub doctor: String,
    pub summarizer: String,
    pub augmenter: String,
    pub judge: String,
    pub embedder: String,
}

impl Default for ModelNames {
    fn default() -> Self {
        Self {
            doctor: "gpt-4".into(),
            summarizer: "gpt-3.5-turbo".into(),
            augmenter: "gpt-4".into(),
            judge: "gpt-4".into(),
            embedder: "text-embedding-ada-002".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> std::time::Duration {
        // attempt is 1-based; no delay before the first try
        if attempt <= 1 {
            return std::time::Duration::ZERO;
        }
        std::time::Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (attempt - 2).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderProfile {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    /// Name of the environment variable holding the bearer credential.
    pub api_key_env: Option<String>,
    pub models: ModelNames,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
    /// Client-side rate limit; `None` disables the limiter.
    pub requests_per_second: Option<f64>,
}

impl Default for ProviderProfile {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            models: ModelNames::default(),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            temperature: 0.0,
            max_tokens: None,
            seed: None,
            requests_per_second: None,
        }
    }
}

impl ProviderProfile {
    pub fn model_for(&self, role: ChatRole) -> &str {
        match role {
            ChatRole::Doctor => &self.models.doctor,
            ChatRole::Summarizer => &self.models.summarizer,
            ChatRole::Augmenter => &self.models.augmenter,
            ChatRole::Judge => &self.models.judge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.models;
        for (role, name) in [
            ("doctor", &m.doctor),
            ("summarizer", &m.summarizer),
            ("augmenter", &m.augmenter),
            ("judge", &m.judge),
            ("embedder", &m.embedder),
        ] {
            if name.trim().is_empty() {
                return Err(GatewayError::Config(format!("empty model name for {role}")));
            }
        }
        if m.doctor == m.summarizer {
            return Err(GatewayError::Config(format!(
                "doctor and summarizer must use distinct models (both are {:?})",
                m.doctor
            )));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config("retry.max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion>;
}

pub trait Embedder: Send + Sync {
    /// Embeds each text. Implementations return exactly one vector per input.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    /// Fixed output dimension when known up front.
    fn dim(&self) -> Option<usize> {
        None
    }
}

/// Routes chat calls by role and embedding calls to a single embedder.
#[derive(Clone)]
pub struct Gateway {
    profile: ProviderProfile,
    default_backend: Arc<dyn ChatBackend>,
    role_backends: HashMap<ChatRole, Arc<dyn ChatBackend>>,
    embedder: Arc<dyn Embedder>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("profile", &self.profile)
            .field("role_overrides", &self.role_backends.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        profile: ProviderProfile,
        backend: Arc<dyn ChatBackend>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self> {
        profile.validate()?;
        Ok(Self {
            profile,
            default_backend: backend,
            role_backends: HashMap::new(),
            embedder,
        })
    }

    /// Sends calls for `role` to `backend` instead of the default backend.
    pub fn with_role_backend(mut self, role: ChatRole, backend: Arc<dyn ChatBackend>) -> Self {
        self.role_backends.insert(role, backend);
        self
    }

    pub fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn embedder_arc(&self) -> Arc<dyn Embedder> {
        Arc::clone(&self.embedder)
    }

    pub fn request_for(&self, role: ChatRole, messages: Vec<ChatMessage>) -> Result<ChatRequest> {
        let mut request = ChatRequest::new(self.profile.model_for(role), messages)?;
        request.temperature = self.profile.temperature;
        request.max_tokens = self.profile.max_tokens;
        request.seed = self.profile.seed;
        Ok(request)
    }

    pub fn chat(&self, role: ChatRole, messages: Vec<ChatMessage>) -> Result<Completion> {
        let request = self.request_for(role, messages)?;
        let backend = self
            .role_backends
            .get(&role)
            .unwrap_or(&self.default_backend);
        tracing::debug!(%role, model = %request.model, "chat request");
        backend.complete(&request)
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("embed_texts needs at least one text".into()));
        }
        let vectors = self.embedder.embed(texts)?;
        check_embeddings(texts.len(), self.embedder.dim(), &vectors)?;
        Ok(vectors)
    }
}

/// Shared post-condition check for any embedder output.
pub fn check_embeddings(
    expected_count: usize,
    expected_dim: Option<usize>,
    vectors: &[EmbeddingVector],
) -> Result<()> {
    if vectors.len() != expected_count {
        return Err(GatewayError::Decode(format!(
            "expected {expected_count} embeddings, got {}",
            vectors.len()
        )));
    }
    let dim = expected_dim.or_else(|| vectors.first().map(EmbeddingVector::dim));
    for v in vectors {
        if let Some(d) = dim {
            if v.dim() != d {
                return Err(GatewayError::DimensionMismatch {
                    expected: d,
                    actual: v.dim(),
                });
            }
        }
        if !v.is_finite() {
            return Err(GatewayError::Decode("embedding contains NaN or Inf".into()));
        }
    }
    Ok(())
}

pub(crate) fn approx_tokens(text: &str) -> u32 {
    u32::try_from(text.split_whitespace().count()).unwrap_or(u32::MAX)
}
