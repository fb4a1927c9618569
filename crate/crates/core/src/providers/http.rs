//! Adapter for OpenAI-style `/chat/completions` endpoints.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;

use super::{CompletionRequest, Provider, ProviderError, ProviderResult, Usage};
use crate::clock::SharedClock;

pub struct ChatCompletionsProvider {
    id: String,
    base_url: String,
    api_key: Option<String>,
    client: reqwest::Client,
    clock: SharedClock,
}

impl ChatCompletionsProvider {
    pub fn new(id: &str, base_url: &str, api_key: Option<String>, clock: SharedClock) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("static client configuration");
        Self {
            id: id.to_owned(),
            base_url: base_url.trim_end_matches('/').to_owned(),
            api_key: api_key.filter(|k| !k.trim().is_empty()),
            client,
            clock,
        }
    }

    /// Reads the API key from `env_var`. A missing key is reported as a fatal
    /// error on the first call, not here.
    pub fn from_env(id: &str, base_url: &str, env_var: &str, clock: SharedClock) -> Self {
        Self::new(id, base_url, std::env::var(env_var).ok(), clock)
    }
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<WireUsage>,
}

fn parse_retry_after(value: Option<&str>) -> Option<Duration> {
    let secs: f64 = value?.trim().parse().ok()?;
    Duration::try_from_secs_f64(secs).ok()
}

/// Maps one HTTP exchange onto exactly one outcome.
///
/// 2xx with a well-formed body succeeds; a malformed 2xx body is transient.
/// 429 is a rate limit unless the body reports exhausted quota, which is
/// fatal. 408, 409, 425 and 5xx are transient. 401, 403 and every other 4xx
/// are fatal. Anything else (1xx, 3xx) is transient.
pub fn classify_response(
    status: u16,
    retry_after: Option<&str>,
    body: &str,
) -> Result<(String, Usage), ProviderError> {
    match status {
        200..=299 => {
            let parsed: WireResponse = serde_json::from_str(body)
                .map_err(|e| ProviderError::transient(format!("malformed response body: {e}")))?;
            let text = parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| ProviderError::transient("response carried no message content"))?;
            let usage = parsed
                .usage
                .map(|u| Usage {
                    input_tokens: u.prompt_tokens,
                    output_tokens: u.completion_tokens,
                })
                .unwrap_or_default();
            Ok((text, usage))
        }
        429 if body.contains("insufficient_quota") => Err(ProviderError::fatal("quota exhausted")),
        429 => Err(ProviderError::rate_limit(
            parse_retry_after(retry_after),
            "HTTP 429",
        )),
        401 | 403 => Err(ProviderError::fatal(format!("HTTP {status}: credentials rejected"))),
        408 | 409 | 425 | 500..=599 => Err(ProviderError::transient(format!("HTTP {status}"))),
        400..=499 => Err(ProviderError::fatal(format!("HTTP {status}: request rejected"))),
        _ => Err(ProviderError::transient(format!("unexpected HTTP {status}"))),
    }
}

#[async_trait]
impl Provider for ChatCompletionsProvider {
    fn id(&self) -> &str {
        &self.id
    }

    async fn complete(&self, request: CompletionRequest<'_>) -> Result<ProviderResult, ProviderError> {
        let Some(key) = &self.api_key else {
            return Err(ProviderError::fatal("missing credentials"));
        };
        let p = request.payload;
        let body = json!({
            "model": p.model_params.model_name,
            "temperature": p.model_params.temperature,
            "top_p": p.model_params.top_p,
            "max_tokens": p.model_params.max_output_tokens,
            "messages": [
                {"role": "system", "content": p.system_text},
                {"role": "user", "content": p.user_text},
            ],
        });
        let started = self.clock.now();
        let response = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .bearer_auth(key)
            .json(&body)
            .send()
            .await
            .map_err(|e| {
                if e.is_builder() {
                    ProviderError::fatal(format!("invalid request: {e}"))
                } else {
                    ProviderError::transient(format!("network error: {e}"))
                }
            })?;
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .map(str::to_owned);
        let text = response
            .text()
            .await
            .map_err(|e| ProviderError::transient(format!("reading body: {e}")))?;
        let (text, usage) = classify_response(status, retry_after.as_deref(), &text)?;
        Ok(ProviderResult {
            text,
            usage,
            latency: self.clock.now().saturating_sub(started),
        })
    }
}
