use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::profile::{validate_schema, ProfileSchema};
use crate::providers::ProviderCaps;
use crate::validation::ValidationReport;

pub const DEFAULT_BUFFER_SIZE: usize = 256;
pub const DEFAULT_REPAIR_ATTEMPTS: u32 = 2;

/// Durations are written as (fractional) seconds.
mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "secs")]
    pub base_delay: Duration,
    #[serde(with = "secs")]
    pub max_delay: Duration,
    pub jitter_fraction: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(60),
            jitter_fraction: 0.1,
        }
    }
}

/// Per-token prices used for the live cost estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    #[serde(default)]
    pub input_token_price: f64,
    #[serde(default)]
    pub output_token_price: f64,
}

fn default_repairs() -> u32 {
    DEFAULT_REPAIR_ATTEMPTS
}

fn default_buffer() -> usize {
    DEFAULT_BUFFER_SIZE
}

fn default_top_p() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub run_seed: u64,
    pub population_size: usize,
    pub profile_schema: ProfileSchema,
    pub provider_id: String,
    pub model_name: String,
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub max_concurrency: usize,
    pub rpm_limit: u32,
    pub tpm_limit: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_repairs")]
    pub format_repair_attempts: u32,
    #[serde(default = "default_buffer")]
    pub buffer_size: usize,
    #[serde(default)]
    pub pricing: Pricing,
}

impl SimulationConfig {
    /// A small valid configuration; tests and examples adjust from here.
    pub fn example(profile_schema: ProfileSchema) -> Self {
        Self {
            run_seed: 1,
            population_size: 10,
            profile_schema,
            provider_id: "mock".into(),
            model_name: "mock-1".into(),
            temperature: 1.0,
            top_p: 1.0,
            max_output_tokens: 256,
            max_concurrency: 4,
            rpm_limit: 120,
            tpm_limit: 90_000,
            retry: RetryPolicy::default(),
            format_repair_attempts: DEFAULT_REPAIR_ATTEMPTS,
            buffer_size: DEFAULT_BUFFER_SIZE,
            pricing: Pricing::default(),
        }
    }
}

pub fn validate_config(config: &SimulationConfig) -> ValidationReport {
    validate_config_for(config, &ProviderCaps::default())
}

/// Checks a configuration against its own invariants and the provider's
/// declared parameter ranges.
pub fn validate_config_for(config: &SimulationConfig, caps: &ProviderCaps) -> ValidationReport {
    let mut r = ValidationReport::new();
    if config.population_size == 0 {
        r.push("population_size", "must be at least 1");
    }
    if config.provider_id.trim().is_empty() {
        r.push("provider_id", "must not be empty");
    }
    if config.model_name.trim().is_empty() {
        r.push("model_name", "must not be empty");
    }
    let (t_lo, t_hi) = caps.temperature_range;
    if !config.temperature.is_finite() || config.temperature < 0.0 {
        r.push("temperature", "must be >= 0");
    } else if config.temperature < t_lo || config.temperature > t_hi {
        r.push(
            "temperature",
            format!("outside the provider range [{t_lo}, {t_hi}]"),
        );
    }
    if !(config.top_p > 0.0 && config.top_p <= 1.0) {
        r.push("top_p", "top_p out of (0,1]");
    }
    if config.max_output_tokens == 0 {
        r.push("max_output_tokens", "must be at least 1");
    }
    if config.max_concurrency == 0 {
        r.push("max_concurrency", "must be at least 1");
    }
    if config.rpm_limit == 0 {
        r.push("rpm_limit", "must be at least 1");
    }
    if config.tpm_limit == 0 {
        r.push("tpm_limit", "must be at least 1");
    }
    if config.buffer_size == 0 {
        r.push("buffer_size", "must be at least 1");
    }
    let retry = &config.retry;
    if retry.base_delay > retry.max_delay {
        r.push("retry.base_delay", "must not exceed retry.max_delay");
    }
    if !(0.0..=1.0).contains(&retry.jitter_fraction) {
        r.push("retry.jitter_fraction", "must lie in [0, 1]");
    }
    let p = &config.pricing;
    if !(p.input_token_price >= 0.0 && p.input_token_price.is_finite())
        || !(p.output_token_price >= 0.0 && p.output_token_price.is_finite())
    {
        r.push("pricing", "prices must be nonnegative");
    }
    for issue in validate_schema(&config.profile_schema).issues {
        r.push(format!("profile_schema.{}", issue.subject), issue.message);
    }
    r
}

/// Stable fingerprint of a configuration, used to refuse resuming a run
/// under edited settings.
pub fn config_hash(config: &SimulationConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&canonical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::DocFormat;
    use crate::profile::{AttributeSpec, ProfileSchema};

    fn config() -> SimulationConfig {
        SimulationConfig::example(ProfileSchema::new(vec![AttributeSpec::integer("age", 18, 90)]))
    }

    #[test]
    fn reference_config_is_valid() {
        let mut c = config();
        c.rpm_limit = 120;
        c.tpm_limit = 90_000;
        c.temperature = 1.0;
        assert!(validate_config(&c).is_empty(), "{}", validate_config(&c));
    }

    #[test]
    fn zero_concurrency_rejected() {
        let mut c = config();
        c.max_concurrency = 0;
        assert!(validate_config(&c).mentions("max_concurrency"));
    }

    #[test]
    fn top_p_zero_rejected() {
        let mut c = config();
        c.top_p = 0.0;
        let report = validate_config(&c);
        assert_eq!(report.issues[0].message, "top_p out of (0,1]");
    }

    #[test]
    fn temperature_checked_against_provider_range() {
        let mut c = config();
        c.temperature = 1.5;
        let caps = ProviderCaps {
            temperature_range: (0.0, 1.0),
        };
        assert!(validate_config_for(&c, &caps).mentions("temperature"));
        assert!(validate_config(&c).is_empty());
    }

    #[test]
    fn schema_issues_are_prefixed() {
        let mut c = config();
        c.profile_schema.attributes.push(AttributeSpec::integer("age", 1, 2));
        assert!(validate_config(&c).mentions("profile_schema.age"));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = config();
        let mut b = config();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.retry.max_retries += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn toml_config_uses_field_names() {
        let text = DocFormat::Toml.render(&config()).unwrap();
        for key in ["run_seed", "rpm_limit", "tpm_limit", "format_repair_attempts", "[retry]", "base_delay"] {
            assert!(text.contains(key), "{key} missing from\n{text}");
        }
        let back: SimulationConfig = DocFormat::Toml.parse(&text).unwrap();
        assert_eq!(back, config());
    }
}
