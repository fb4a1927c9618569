//! Scriptable, seeded stand-in for a real provider.
//!
//! Each job's calls are numbered. Call `k` of a scripted job returns the
//! script's `k`-th outcome (the last one repeats). Unscripted calls draw from
//! a stream seeded by `(seed, job, k)`, which keeps outcomes independent of
//! how concurrent calls interleave.

use std::collections::HashMap;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, Provider, ProviderError, ProviderResult, Usage};
use crate::clock::SharedClock;
use crate::profile::mix_seed;
use crate::prompt::{estimate_tokens, schema_from_directive};
use crate::survey::{AnswerSchema, JobId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum MockOutcome {
    /// A schema-valid answer synthesized from the prompt's directive.
    Answer,
    /// Fixed reply text.
    Reply { text: String },
    /// A reply that fails format checks.
    Malformed,
    RateLimit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        retry_after: Option<f64>,
    },
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedJob {
    pub agent_id: String,
    pub question_id: String,
    pub outcomes: Vec<MockOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LatencyModel {
    Fixed { secs: f64 },
    Uniform { min: f64, max: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Fixed { secs: 0.0 }
    }
}

impl LatencyModel {
    fn sample<R: Rng>(&self, rng: &mut R) -> Duration {
        let secs = match *self {
            LatencyModel::Fixed { secs } => secs,
            LatencyModel::Uniform { min, max } if max > min => rng.random_range(min..max),
            LatencyModel::Uniform { min, .. } => min,
        };
        Duration::from_secs_f64(secs.max(0.0))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub responses: Vec<ScriptedJob>,
    /// Probability that an unscripted call fails transiently.
    #[serde(default)]
    pub failure_rate: f64,
    /// Probability that an unscripted successful call is malformed.
    #[serde(default)]
    pub malformed_rate: f64,
    #[serde(default)]
    pub latency: LatencyModel,
}

impl MockScript {
    pub fn script(mut self, job: JobId, outcomes: Vec<MockOutcome>) -> Self {
        assert!(!outcomes.is_empty(), "outcome sequences are non-empty");
        self.responses.push(ScriptedJob {
            agent_id: job.agent_id,
            question_id: job.question_id,
            outcomes,
        });
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.failure_rate) || !(0.0..=1.0).contains(&self.malformed_rate) {
            return Err("rates must lie in [0, 1]".into());
        }
        if let Some(j) = self.responses.iter().find(|j| j.outcomes.is_empty()) {
            return Err(format!("empty outcome sequence for ({},{})", j.agent_id, j.question_id));
        }
        match self.latency {
            LatencyModel::Fixed { secs } if !(secs >= 0.0 && secs.is_finite()) => {
                Err("latency must be a nonnegative number of seconds".into())
            }
            LatencyModel::Uniform { min, max } if !(min >= 0.0 && max >= min && max.is_finite()) => {
                Err("uniform latency needs 0 <= min <= max".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranscriptKind {
    Answer,
    Reply,
    Malformed,
    RateLimit,
    Transient,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub job_id: JobId,
    pub call: u32,
    pub at: Duration,
    pub estimated_tokens: u64,
    pub text: Option<String>,
    pub kind: TranscriptKind,
}

pub struct MockProvider {
    script: HashMap<JobId, Vec<MockOutcome>>,
    failure_rate: f64,
    malformed_rate: f64,
    latency: LatencyModel,
    seed: u64,
    clock: SharedClock,
    calls: Mutex<HashMap<JobId, u32>>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

pub fn make_mock(script: MockScript, seed: u64, clock: SharedClock) -> MockProvider {
    MockProvider {
        script: script
            .responses
            .into_iter()
            .map(|j| (JobId::new(j.agent_id, j.question_id), j.outcomes))
            .collect(),
        failure_rate: script.failure_rate,
        malformed_rate: script.malformed_rate,
        latency: script.latency,
        seed,
        clock,
        calls: Mutex::new(HashMap::new()),
        transcript: Mutex::new(Vec::new()),
    }
}

fn job_key(job: &JobId) -> u64 {
    let digest = Sha256::new()
        .chain_update(job.agent_id.as_bytes())
        .chain_update([0u8])
        .chain_update(job.question_id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn synthesize<R: Rng>(schema: Option<AnswerSchema>, rng: &mut R) -> String {
    let answer = match schema {
        Some(AnswerSchema::SingleChoice { options }) => options[rng.random_range(0..options.len())].clone(),
        Some(AnswerSchema::MultiChoice { options }) => {
            let mut picks: Vec<&String> = options.iter().filter(|_| rng.random_bool(0.5)).collect();
            if picks.is_empty() {
                picks.push(&options[rng.random_range(0..options.len())]);
            }
            picks.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        }
        Some(AnswerSchema::Likert { low, high }) => rng.random_range(low..=high).to_string(),
        Some(AnswerSchema::NumericRange { low, high }) => {
            let v = if high > low { rng.random_range(low..=high) } else { low };
            v.to_string()
        }
        Some(AnswerSchema::FreeText) => format!("It depends on the day (variant {}).", rng.random_range(0..1000)),
        None => "ok".to_owned(),
    };
    format!(
        "Here is my response.\n```answer\nanswer: {answer}\nreasoning: This is what someone like me would say.\n```"
    )
}

fn malformed<R: Rng>(rng: &mut R) -> String {
    if rng.random_bool(0.5) {
        "Honestly, I could not say for sure.".to_owned()
    } else {
        "```answer\nanswer:\nreasoning: left blank\n```".to_owned()
    }
}

impl MockProvider {
    /// Every call made so far, in arrival order.
    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().clone()
    }

    pub fn calls_for(&self, job: &JobId) -> u32 {
        self.calls.lock().get(job).copied().unwrap_or(0)
    }
}

#[async_trait]
impl Provider for MockProvider {
    fn id(&self) -> &str {
        "mock"
    }

    async fn complete(&self, request: CompletionRequest<'_>) -> Result<ProviderResult, ProviderError> {
        let call = {
            let mut calls = self.calls.lock();
            let n = calls.entry(request.job_id.clone()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let at = self.clock.now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ job_key(request.job_id), call as u64));

        let outcome = match self.script.get(request.job_id) {
            Some(seq) => seq[(call as usize).min(seq.len() - 1)].clone(),
            None if rng.random::<f64>() < self.failure_rate => MockOutcome::Transient,
            None if rng.random::<f64>() < self.malformed_rate => MockOutcome::Malformed,
            None => MockOutcome::Answer,
        };
        let latency = self.latency.sample(&mut rng);

        let (kind, result) = match outcome {
            MockOutcome::Answer => (
                TranscriptKind::Answer,
                Ok(synthesize(schema_from_directive(&request.payload.user_text), &mut rng)),
            ),
            MockOutcome::Reply { text } => (TranscriptKind::Reply, Ok(text)),
            MockOutcome::Malformed => (TranscriptKind::Malformed, Ok(malformed(&mut rng))),
            MockOutcome::RateLimit { retry_after } => (
                TranscriptKind::RateLimit,
                Err(ProviderError::rate_limit(
                    retry_after.map(Duration::from_secs_f64),
                    "scripted rate limit",
                )),
            ),
            MockOutcome::Transient => (
                TranscriptKind::Transient,
                Err(ProviderError::transient("injected transient failure")),
            ),
            MockOutcome::Fatal => (TranscriptKind::Fatal, Err(ProviderError::fatal("injected fatal failure"))),
        };
        self.transcript.lock().push(TranscriptEntry {
            job_id: request.job_id.clone(),
            call,
            at,
            estimated_tokens: request.payload.estimated_tokens,
            text: result.as_ref().ok().cloned(),
            kind,
        });

        if !latency.is_zero() {
            self.clock.sleep(latency).await;
        }
        result.map(|text| ProviderResult {
            usage: Usage {
                input_tokens: request.payload.estimated_tokens,
                output_tokens: estimate_tokens(&[&text]),
            },
            text,
            latency,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::prompt::{format_directive, parse_response, ModelParams, PromptPayload};
    use crate::providers::ProviderErrorKind;
    use std::sync::Arc;

    fn payload(schema: &AnswerSchema) -> PromptPayload {
        PromptPayload {
            system_text: "sys".into(),
            user_text: format!("Q?\n\n{}", format_directive(schema)),
            format_directive: format_directive(schema),
            model_params: ModelParams {
                model_name: "m".into(),
                temperature: 1.0,
                top_p: 1.0,
                max_output_tokens: 10,
            },
            estimated_tokens: 12,
        }
    }

    fn mock(script: MockScript, seed: u64) -> MockProvider {
        make_mock(script, seed, Arc::new(ManualClock::new()))
    }

    async fn call(m: &MockProvider, job: &JobId, schema: &AnswerSchema) -> Result<ProviderResult, ProviderError> {
        let p = payload(schema);
        m.complete(CompletionRequest { job_id: job, payload: &p }).await
    }

    #[tokio::test]
    async fn scripted_outcomes() {
        let job = JobId::new("a0", "q0");
        let m = mock(
            MockScript::default().script(
                job.clone(),
                vec![
                    MockOutcome::Reply { text: "answer: 4".into() },
                    MockOutcome::RateLimit { retry_after: Some(2.0) },
                ],
            ),
            0,
        );
        let s = AnswerSchema::Likert { low: 1, high: 7 };
        let ok = call(&m, &job, &s).await.unwrap();
        assert!(ok.text.contains('4'));
        for _ in 0..2 {
            let err = call(&m, &job, &s).await.unwrap_err();
            assert_eq!(err.kind(), ProviderErrorKind::RateLimit);
            assert_eq!(err.retry_after(), Some(Duration::from_secs(2)));
        }
    }

    #[tokio::test]
    async fn failure_rate_extremes() {
        let s = AnswerSchema::Likert { low: 1, high: 5 };
        let always = mock(MockScript { failure_rate: 1.0, ..Default::default() }, 3);
        let never = mock(MockScript::default(), 3);
        for i in 0..50 {
            let job = JobId::new(format!("a{i}"), "q0");
            assert_eq!(call(&always, &job, &s).await.unwrap_err().kind(), ProviderErrorKind::Transient);
            let text = call(&never, &job, &s).await.unwrap().text;
            assert!(parse_response(&text, &s).is_ok(), "{text}");
        }
    }

    #[tokio::test]
    async fn same_seed_same_outcomes() {
        let script = MockScript { failure_rate: 0.3, malformed_rate: 0.3, ..Default::default() };
        let s = AnswerSchema::SingleChoice { options: vec!["A".into(), "B".into(), "C".into()] };
        let run = |seed| {
            let m = mock(script.clone(), seed);
            let s = s.clone();
            async move {
                let mut out = Vec::new();
                for i in 0..30 {
                    let job = JobId::new(format!("a{}", i % 5), format!("q{}", i % 3));
                    out.push(call(&m, &job, &s).await.map(|r| r.text).map_err(|e| e.kind()));
                }
                out
            }
        };
        assert_eq!(run(11).await, run(11).await);
        assert_ne!(run(11).await, run(12).await);
    }

    #[tokio::test]
    async fn outcomes_do_not_depend_on_interleaving() {
        let script = MockScript { failure_rate: 0.5, ..Default::default() };
        let s = AnswerSchema::Likert { low: 1, high: 9 };
        let (x, y) = (JobId::new("a0", "q0"), JobId::new("a1", "q0"));
        let m1 = mock(script.clone(), 4);
        let a1 = call(&m1, &x, &s).await.map(|r| r.text);
        let b1 = call(&m1, &y, &s).await.map(|r| r.text);
        let m2 = mock(script, 4);
        let b2 = call(&m2, &y, &s).await.map(|r| r.text);
        let a2 = call(&m2, &x, &s).await.map(|r| r.text);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[tokio::test]
    async fn synthesized_answers_fit_every_schema() {
        let m = mock(MockScript::default(), 8);
        let schemas = [
            AnswerSchema::SingleChoice { options: vec!["yes".into(), "no".into()] },
            AnswerSchema::MultiChoice { options: vec!["x".into(), "y".into(), "z".into()] },
            AnswerSchema::Likert { low: -3, high: 3 },
            AnswerSchema::NumericRange { low: 0.5, high: 0.75 },
            AnswerSchema::FreeText,
        ];
        for (i, s) in schemas.iter().enumerate() {
            for k in 0..20 {
                let text = call(&m, &JobId::new(format!("a{k}"), format!("q{i}")), s).await.unwrap().text;
                let parsed = parse_response(&text, s).unwrap();
                assert!(parsed.value.satisfies(s));
            }
        }
    }

    #[tokio::test]
    async fn malformed_replies_fail_parsing() {
        let m = mock(MockScript { malformed_rate: 1.0, ..Default::default() }, 2);
        let s = AnswerSchema::FreeText;
        for k in 0..20 {
            let text = call(&m, &JobId::new(format!("a{k}"), "q"), &s).await.unwrap().text;
            assert!(parse_response(&text, &s).is_err(), "{text}");
        }
    }

    #[test]
    fn script_validation() {
        assert!(MockScript::default().validate().is_ok());
        assert!(MockScript { failure_rate: 1.5, ..Default::default() }.validate().is_err());
        let bad = MockScript {
            responses: vec![ScriptedJob { agent_id: "a".into(), question_id: "q".into(), outcomes: vec![] }],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let doc = r#"{"failure_rate": 0.1, "responses": [{"agent_id": "a7", "question_id": "q0",
            "outcomes": [{"outcome": "rate-limit", "retry_after": 5}, {"outcome": "answer"}]}]}"#;
        let parsed: MockScript = serde_json::from_str(doc).unwrap();
        assert_eq!(parsed.responses[0].outcomes[0], MockOutcome::RateLimit { retry_after: Some(5.0) });
    }
}
