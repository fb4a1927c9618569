//! Survey simulation with synthetic respondents.
//!
//! Build a population from a [`ProfileSchema`], pair every agent with every
//! question of a [`SurveySpec`], and dispatch the resulting prompts to a
//! language-model [`Provider`] under request and token rate limits. Answers
//! and progress are persisted per user so interrupted runs resume without
//! repeating completed work.

pub mod clock;
pub mod format;
pub mod metrics;
pub mod profile;
pub mod prompt;
pub mod providers;
pub mod runner;
pub mod scheduler;
pub mod store;
pub mod survey;
pub mod validation;

pub use clock::{Clock, ManualClock, RuntimeClock, SharedClock};
pub use metrics::{MetricsEvent, MetricsHub, MetricsRegistry, MetricsSink, MetricsSnapshot};
pub use profile::{generate_population, AgentProfile, AttributeSpec, AttributeValue, ProfileSchema};
pub use prompt::{build_prompt, parse_response, AnswerValue, PromptPayload, FORMAT_DIRECTIVE_VERSION};
pub use providers::{Provider, ProviderError, ProviderRegistry, SharedProvider};
pub use runner::RunDriver;
pub use scheduler::{AnswerRecord, RunControl, RunEnd, RunManifest, RunOutcome, RunStats};
pub use store::{CredentialStore, ExportFormat, RunState, SimulationStore};
pub use survey::{AnswerSchema, JobId, SimulationConfig, SurveyQuestion, SurveySpec};
pub use validation::ValidationReport;
