//! Language-model provider boundary.
//!
//! A provider takes one prompt payload (system + user text and model
//! parameters) and returns the completion text with token usage, or a
//! [`ProviderError`] of exactly one kind.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::prompt::PromptPayload;
use crate::survey::{JobId, SimulationConfig};

pub use http::{classify_response, ChatCompletionsProvider};
pub use mock::{make_mock, LatencyModel, MockOutcome, MockProvider, MockScript, ScriptedJob, TranscriptEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderCaps {
    pub temperature_range: (f64, f64),
}

impl Default for ProviderCaps {
    fn default() -> Self {
        Self {
            temperature_range: (0.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderResult {
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderErrorKind {
    RateLimit,
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub struct ProviderError {
    kind: ProviderErrorKind,
    retry_after: Option<Duration>,
    pub detail: String,
}

impl fmt::Display for ProviderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ProviderErrorKind::RateLimit => "rate limited",
            ProviderErrorKind::Transient => "transient failure",
            ProviderErrorKind::Fatal => "fatal",
        };
        write!(f, "{kind}: {}", self.detail)?;
        if let Some(after) = self.retry_after {
            write!(f, " (retry after {:.3}s)", after.as_secs_f64())?;
        }
        Ok(())
    }
}

impl ProviderError {
    pub fn rate_limit(retry_after: Option<Duration>, detail: impl Into<String>) -> Self {
        Self {
            kind: ProviderErrorKind::RateLimit,
            retry_after,
            detail: detail.into(),
        }
    }

    pub fn transient(detail: impl Into<String>) -> Self {
        Self {
            kind: ProviderErrorKind::Transient,
            retry_after: None,
            detail: detail.into(),
        }
    }

    pub fn fatal(detail: impl Into<String>) -> Self {
        Self {
            kind: ProviderErrorKind::Fatal,
            retry_after: None,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ProviderErrorKind {
        self.kind
    }

    /// Only ever set on rate-limit errors.
    pub fn retry_after(&self) -> Option<Duration> {
        self.retry_after
    }
}

/// Routing metadata and payload for one provider call.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub job_id: &'a JobId,
    pub payload: &'a PromptPayload,
}

#[async_trait]
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;

    fn caps(&self) -> ProviderCaps {
        ProviderCaps::default()
    }

    async fn complete(&self, request: CompletionRequest<'_>) -> Result<ProviderResult, ProviderError>;
}

pub type SharedProvider = Arc<dyn Provider>;

type Factory = Arc<dyn Fn(&SimulationConfig) -> Result<SharedProvider, ProviderError> + Send + Sync>;

/// Flat registry of provider constructors keyed by `provider_id`.
#[derive(Clone, Default)]
pub struct ProviderRegistry {
    factories: BTreeMap<String, Factory>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, id: &str, factory: F)
    where
        F: Fn(&SimulationConfig) -> Result<SharedProvider, ProviderError> + Send + Sync + 'static,
    {
        self.factories.insert(id.to_owned(), Arc::new(factory));
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, config: &SimulationConfig) -> Result<SharedProvider, ProviderError> {
        match self.factories.get(&config.provider_id) {
            Some(f) => f(config),
            None => Err(ProviderError::fatal(format!(
                "unknown provider {:?}",
                config.provider_id
            ))),
        }
    }
}

pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

/// The built-in providers: `mock`, seeded with each run's `run_seed` and
/// driven by `script`, and `chat-completions`, which reads its endpoint from
/// `PANELSIM_API_BASE` and its key from `PANELSIM_API_KEY`.
pub fn standard_registry(clock: SharedClock, script: MockScript) -> ProviderRegistry {
    let mut reg = ProviderRegistry::new();
    let mock_clock = Arc::clone(&clock);
    reg.register("mock", move |config| {
        Ok(Arc::new(make_mock(script.clone(), config.run_seed, Arc::clone(&mock_clock))) as SharedProvider)
    });
    reg.register("chat-completions", move |_| {
        let base = std::env::var("PANELSIM_API_BASE").unwrap_or_else(|_| DEFAULT_API_BASE.to_owned());
        Ok(Arc::new(ChatCompletionsProvider::from_env(
            "chat-completions",
            &base,
            "PANELSIM_API_KEY",
            Arc::clone(&clock),
        )) as SharedProvider)
    });
    reg
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}
