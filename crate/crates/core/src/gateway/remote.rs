//! OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`).

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{
    check_embeddings, ChatBackend, ChatRequest, Completion, Embedder, GatewayError,
    ProviderProfile, Result, Usage,
};
use crate::vector_store::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChatRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub stream: bool,
}

impl From<&ChatRequest> for WireChatRequest {
    fn from(r: &ChatRequest) -> Self {
        Self {
            model: r.model.clone(),
            messages: r
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role.as_str().to_string(),
                    content: m.content.clone(),
                })
                .collect(),
            temperature: r.temperature,
            max_tokens: r.max_tokens,
            seed: r.seed,
            stream: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireUsage {
    #[serde(default)]
    pub prompt_tokens: u32,
    #[serde(default)]
    pub completion_tokens: u32,
    #[serde(default)]
    pub total_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoiceMessage {
    pub role: String,
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChoice {
    pub index: u32,
    pub message: WireChoiceMessage,
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireChatResponse {
    pub id: String,
    pub object: String,
    pub created: i64,
    pub model: String,
    pub choices: Vec<WireChoice>,
    pub usage: Option<WireUsage>,
}

impl WireChatResponse {
    pub fn into_completion(self) -> Result<Completion> {
        let choice = self
            .choices
            .into_iter()
            .min_by_key(|c| c.index)
            .ok_or_else(|| GatewayError::Decode("response has no choices".into()))?;
        let text = choice
            .message
            .content
            .ok_or_else(|| GatewayError::Decode("choice has no content".into()))?;
        let usage = self.usage.map_or(Usage::default(), |u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        });
        Ok(Completion { text, usage })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbeddingRequest {
    pub model: String,
    pub input: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbedding {
    pub object: String,
    pub index: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEmbeddingResponse {
    pub object: String,
    pub data: Vec<WireEmbedding>,
    pub model: String,
    pub usage: Option<WireUsage>,
}

impl WireEmbeddingResponse {
    pub fn into_vectors(self) -> Result<Vec<EmbeddingVector>> {
        let mut data = self.data;
        data.sort_by_key(|d| d.index);
        data.into_iter()
            .map(|d| {
                EmbeddingVector::new(d.embedding)
                    .map_err(|e| GatewayError::Decode(e.to_string()))
            })
            .collect()
    }
}

/// Minimum-interval limiter shared by every call through one backend.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    fn new(requests_per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().expect("poisoned");
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + self.interval;
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    profile: ProviderProfile,
    client: Client,
    api_key: Option<String>,
    limiter: Option<RateLimiter>,
}

impl RemoteBackend {
    /// Reads the credential from the environment variable named in the profile.
    pub fn from_profile(profile: ProviderProfile) -> Result<Self> {
        let api_key = match &profile.api_key_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        Self::with_api_key(profile, api_key)
    }

    pub fn with_api_key(profile: ProviderProfile, api_key: Option<String>) -> Result<Self> {
        profile.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_secs(profile.timeout_secs.max(1)))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let limiter = match profile.requests_per_second {
            Some(rps) if rps > 0.0 => Some(RateLimiter::new(rps)),
            Some(_) => {
                return Err(GatewayError::Config(
                    "requests_per_second must be positive".into(),
                ))
            }
            None => None,
        };
        Ok(Self {
            profile,
            client,
            api_key,
            limiter,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.profile.endpoint.trim_end_matches('/'), path)
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R> {
        let url = self.url(path);
        let policy = &self.profile.retry;
        let mut last_error = None;
        for attempt in 1..=policy.max_attempts {
            thread::sleep(policy.delay_before(attempt));
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let mut builder = self.client.post(&url).json(body);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response
                            .json::<R>()
                            .map_err(|e| GatewayError::Decode(e.to_string()));
                    }
                    let body = response.text().unwrap_or_default();
                    let error = GatewayError::Http {
                        status: status.as_u16(),
                        attempts: attempt,
                        body,
                    };
                    if !retryable(status) {
                        return Err(error);
                    }
                    tracing::warn!(%url, attempt, status = status.as_u16(), "retrying provider call");
                    last_error = Some(error);
                }
                Err(e) => {
                    tracing::warn!(%url, attempt, error = %e, "retrying provider call");
                    last_error = Some(GatewayError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    });
                }
            }
        }
        Err(last_error.unwrap_or(GatewayError::Transport {
            attempts: 0,
            message: "no attempts made".into(),
        }))
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

impl ChatBackend for RemoteBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion> {
        request.validate()?;
        let wire = WireChatRequest::from(request);
        let response: WireChatResponse = self.post("chat/completions", &wire)?;
        response.into_completion()
    }
}

impl Embedder for RemoteBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("embed needs at least one text".into()));
        }
        let wire = WireEmbeddingRequest {
            model: self.profile.models.embedder.clone(),
            input: texts.to_vec(),
        };
        let response: WireEmbeddingResponse = self.post("embeddings", &wire)?;
        let vectors = response.into_vectors()?;
        check_embeddings(texts.len(), None, &vectors)?;
        Ok(vectors)
    }
}
