//! TOML configuration shared by the CLI and the service.
//!
//! ```toml
//! [server]
//! listen = "127.0.0.1:8080"
//! data_dir = "data"
//!
//! [provider]
//! kind = "mock"            # or "remote"
//! [provider.profile]       # OpenAI-compatible settings for "remote"
//! endpoint = "https://api.openai.com/v1"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [consultation]
//! alpha = 0.3
//!
//! [knowledge]
//! guidelines = "guidelines"
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consultation::{ConsultationConfig, ConsultationError, Engine};
use crate::evaluation::{GuidelineDoctor, RubricJudge};
use crate::gateway::mock::{HashEmbedder, ParaphraseBackend, DEFAULT_MOCK_DIM};
use crate::gateway::remote::RemoteBackend;
use crate::gateway::{ChatRole, Gateway, GatewayError, ProviderProfile};
use crate::knowledge::{KnowledgeBase, KnowledgeError, KnowledgeSources};
use crate::sensor::DigestSummarizer;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Consultation(#[from] ConsultationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    /// Session logs live here; `None` keeps sessions in memory only.
    pub data_dir: Option<PathBuf>,
    /// Environment variable with a static API key required on every request.
    pub api_key_env: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: None,
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Offline doctor, summarizer, paraphraser, judge and hash embedder.
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub mock_dim: usize,
    pub profile: ProviderProfile,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            mock_dim: DEFAULT_MOCK_DIM,
            profile: ProviderProfile::default(),
        }
    }
}

impl ProviderConfig {
    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        Ok(match self.kind {
            ProviderKind::Mock => {
                if self.mock_dim == 0 {
                    return Err(ConfigError::Gateway(GatewayError::Config("mock_dim must be positive".into())));
                }
                Gateway::new(
                    self.profile.clone(),
                    Arc::new(GuidelineDoctor),
                    Arc::new(HashEmbedder::new(self.mock_dim)),
                )?
                .with_role_backend(ChatRole::Summarizer, Arc::new(DigestSummarizer))
                .with_role_backend(ChatRole::Augmenter, Arc::new(ParaphraseBackend::default()))
                .with_role_backend(ChatRole::Judge, Arc::new(RubricJudge))
            }
            ProviderKind::Remote => {
                let remote = Arc::new(RemoteBackend::from_profile(self.profile.clone())?);
                Gateway::new(self.profile.clone(), remote.clone(), remote)?
            }
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub server: ServerConfig,
    pub provider: ProviderConfig,
    pub consultation: ConsultationConfig,
    pub knowledge: KnowledgeSources,
}

impl AppConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.resolve(base);
        cfg.consultation.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    fn resolve(&mut self, base: &Path) {
        self.knowledge.resolve(base);
        if let Some(d) = &mut self.server.data_dir {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
    }

    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        self.provider.gateway()
    }

    pub fn knowledge_base(&self, gateway: &Gateway) -> Result<KnowledgeBase, ConfigError> {
        Ok(KnowledgeBase::load(&self.knowledge, gateway.embedder())?)
    }

    /// Gateway, knowledge base and engine in one step.
    pub fn engine(&self) -> Result<Engine, ConfigError> {
        let gateway = self.gateway()?;
        let kb = self.knowledge_base(&gateway)?;
        Ok(Engine::new(Arc::new(RwLock::new(kb)), gateway, self.consultation.clone())?)
    }
}
