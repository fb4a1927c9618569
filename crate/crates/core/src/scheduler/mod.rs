//! Rate-limited, retrying, checkpointed dispatch of survey jobs.
//!
//! A coordinator pulls jobs lazily from a [`JobStream`], keeps at most
//! `buffer_size` of them queued, and runs up to `max_concurrency` worker
//! tasks. Workers share one [`RateLimiter`], call the provider, run the
//! format-repair loop, and send a report back; only the coordinator touches
//! the manifest and the sinks.
//!
//! Answers are written before their job is marked completed, and the
//! manifest is checkpointed when the run starts, every
//! [`CHECKPOINT_EVERY`] completions, after each exhausted job and at the end.

mod backoff;
mod manifest;
mod rate;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::clock::SharedClock;
use crate::metrics::{MetricsEvent, MetricsSink};
use crate::profile::mix_seed;
use crate::prompt::{build_prompt, build_repair_prompt, parse_response, AnswerValue, FormatError, ParsedAnswer, PromptPayload};
use crate::providers::{CompletionRequest, ProviderError, SharedProvider, Usage};
use crate::survey::{AnswerSchema, JobId, JobStatus, JobStream, RequestJob, SimulationConfig};

pub use crate::survey::RetryPolicy;
pub use backoff::{classify_error, compute_backoff, retry_delay, FailureClass};
pub use manifest::{
    encode_checkpoint, latest_checkpoint, plan_resume, CheckpointSink, MemoryCheckpoints, ResumeError, RunEnd,
    RunManifest, UncompletedJob, UncompletedState,
};
pub use rate::{acquire, AcquireError, Denial, Permit, RateBudget, RateLimiter, WINDOW};

pub const CHECKPOINT_EVERY: u64 = 25;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct SinkError(pub String);

impl From<std::io::Error> for SinkError {
    fn from(e: std::io::Error) -> Self {
        SinkError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerStatus {
    Ok,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub run_id: String,
    pub agent_id: String,
    pub question_id: String,
    pub agent_index: usize,
    pub question_index: usize,
    pub status: AnswerStatus,
    pub value: Option<AnswerValue>,
    pub reasoning: Option<String>,
    pub raw_response: String,
    pub attempts: u32,
    pub format_repairs: u32,
    pub usage: Usage,
    pub dispatched_at: f64,
    pub completed_at: f64,
}

impl AnswerRecord {
    pub fn job_id(&self) -> JobId {
        JobId::new(&self.agent_id, &self.question_id)
    }
}

pub trait AnswerSink: Send + Sync {
    /// Stores one answer. Saving the same (agent, question) twice keeps the
    /// first record.
    fn save_answer(&self, record: &AnswerRecord) -> Result<(), SinkError>;
}

#[derive(Default)]
pub struct MemoryAnswers {
    records: Mutex<(Vec<AnswerRecord>, HashSet<JobId>)>,
}

impl MemoryAnswers {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<AnswerRecord> {
        self.records.lock().0.clone()
    }

    pub fn keys(&self) -> HashSet<JobId> {
        self.records.lock().1.clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AnswerSink for MemoryAnswers {
    fn save_answer(&self, record: &AnswerRecord) -> Result<(), SinkError> {
        let mut guard = self.records.lock();
        let (list, keys) = &mut *guard;
        if keys.insert(record.job_id()) {
            list.push(record.clone());
        }
        Ok(())
    }
}

/// Cancellation and fault injection for one run. Clones share state.
#[derive(Clone)]
pub struct RunControl {
    cancel: Arc<watch::Sender<bool>>,
    crash_at: Option<u64>,
}

impl Default for RunControl {
    fn default() -> Self {
        Self::new()
    }
}

impl RunControl {
    pub fn new() -> Self {
        Self {
            cancel: Arc::new(watch::channel(false).0),
            crash_at: None,
        }
    }

    /// Makes the coordinator stop dead at its `step`-th step (1-based), as if
    /// the process had died: nothing after that point is persisted.
    pub fn crash_at_step(mut self, step: u64) -> Self {
        self.crash_at = Some(step);
        self
    }

    pub fn cancel(&self) {
        self.cancel.send_replace(true);
    }

    pub fn is_cancelled(&self) -> bool {
        *self.cancel.borrow()
    }

    pub async fn cancelled(&self) {
        let mut rx = self.cancel.subscribe();
        let _ = rx.wait_for(|c| *c).await;
    }
}

pub struct RunContext {
    pub run_id: String,
    pub config: Arc<SimulationConfig>,
    pub provider: SharedProvider,
    pub clock: SharedClock,
    pub answers: Arc<dyn AnswerSink>,
    pub checkpoints: Arc<dyn CheckpointSink>,
    pub metrics: Arc<dyn MetricsSink>,
    pub control: RunControl,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Most jobs held at once (queued, waiting to retry, or in flight).
    pub peak_materialized: usize,
    pub peak_in_flight: usize,
    pub provider_calls: u64,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub stats: RunStats,
}

impl RunOutcome {
    pub fn end(&self) -> &RunEnd {
        self.manifest.end.as_ref().expect("finished runs carry an end")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SchedulerError {
    #[error("injected crash at step {step}")]
    Crashed { step: u64 },
    #[error("persisting progress failed: {0}")]
    Sink(#[from] SinkError),
    #[error("worker task failed: {0}")]
    Worker(String),
}

enum Outcome {
    Answered { parsed: ParsedAnswer, repairs: u32 },
    Failed(ProviderError),
    FormatExhausted { error: FormatError },
    Infeasible(AcquireError),
    BadPrompt(String),
    /// Stopped before any call went out.
    Cancelled,
}

struct Report {
    job: RequestJob,
    outcome: Outcome,
    usage: Usage,
    calls: u32,
    started_at: Duration,
    finished_at: Duration,
}

struct Shared {
    provider: SharedProvider,
    clock: SharedClock,
    limiter: Mutex<RateLimiter>,
    metrics: Arc<dyn MetricsSink>,
    control: RunControl,
    repair_limit: u32,
}

/// Tokens a request may consume: its estimated input plus the most output
/// it is allowed to produce.
pub fn reserved_tokens(payload: &PromptPayload) -> u64 {
    payload.estimated_tokens + u64::from(payload.model_params.max_output_tokens)
}

async fn work(mut job: RequestJob, schema: AnswerSchema, sh: Arc<Shared>) -> Report {
    let started_at = sh.clock.now();
    let original = job.prompt.take().expect("prompt is built at dispatch");
    let mut payload = original.clone();
    let (mut usage, mut calls, mut repairs) = (Usage::default(), 0u32, 0u32);
    let outcome = loop {
        let control = (calls == 0).then_some(&sh.control);
        let permit = match acquire(&sh.limiter, &*sh.clock, reserved_tokens(&payload), control).await {
            Ok(p) => p,
            Err(AcquireError::Cancelled) => break Outcome::Cancelled,
            Err(e) => break Outcome::Infeasible(e),
        };
        let now = sh.clock.now();
        if calls > 0 {
            sh.metrics.record(now, MetricsEvent::Repaired);
        }
        sh.metrics.record(now, MetricsEvent::Requested);
        calls += 1;
        let result = sh
            .provider
            .complete(CompletionRequest {
                job_id: &job.job_id,
                payload: &payload,
            })
            .await;
        let reply = match result {
            Ok(r) => r,
            Err(e) => break Outcome::Failed(e),
        };
        sh.limiter.lock().reconcile(permit, reply.usage.total());
        usage.input_tokens += reply.usage.input_tokens;
        usage.output_tokens += reply.usage.output_tokens;
        match parse_response(&reply.text, &schema) {
            Ok(parsed) => break Outcome::Answered { parsed, repairs },
            Err(error) if repairs < sh.repair_limit => {
                repairs += 1;
                payload = build_repair_prompt(&original, &reply.text, &error, repairs);
            }
            Err(error) => break Outcome::FormatExhausted { error },
        }
    };
    Report {
        job,
        outcome,
        usage,
        calls,
        started_at,
        finished_at: sh.clock.now(),
    }
}

struct Delayed {
    due: Duration,
    seq: u64,
    job: RequestJob,
}

impl PartialEq for Delayed {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.seq) == (other.due, other.seq)
    }
}
impl Eq for Delayed {}
impl PartialOrd for Delayed {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Delayed {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

enum Wake {
    Report(Result<Report, tokio::task::JoinError>),
    Timer,
    Cancel,
}

struct Coordinator {
    ctx: RunContext,
    shared: Arc<Shared>,
    stream: JobStream,
    stream_done: bool,
    manifest: RunManifest,
    ready: VecDeque<RequestJob>,
    delayed: BinaryHeap<Reverse<Delayed>>,
    in_flight: HashMap<JobId, u32>,
    workers: JoinSet<Report>,
    returned: Vec<RequestJob>,
    last_error: HashMap<JobId, String>,
    abort: Option<String>,
    rng: ChaCha8Rng,
    seq: u64,
    since_checkpoint: u64,
    stats: RunStats,
}

impl Coordinator {
    fn step(&mut self) -> Result<(), SchedulerError> {
        self.stats.steps += 1;
        if self.ctx.control.crash_at == Some(self.stats.steps) {
            return Err(SchedulerError::Crashed {
                step: self.stats.steps,
            });
        }
        Ok(())
    }

    fn emit(&self, event: MetricsEvent) {
        self.ctx.metrics.record(self.ctx.clock.now(), event);
    }

    fn stopping(&self) -> bool {
        self.abort.is_some() || self.ctx.control.is_cancelled()
    }

    fn materialized(&self) -> usize {
        self.ready.len() + self.delayed.len() + self.in_flight.len()
    }

    fn note_peaks(&mut self) {
        self.stats.peak_materialized = self.stats.peak_materialized.max(self.materialized());
        self.stats.peak_in_flight = self.stats.peak_in_flight.max(self.in_flight.len());
    }

    fn pending_entry(&self, job_id: &JobId, attempts: u32) -> UncompletedJob {
        UncompletedJob {
            job_id: job_id.clone(),
            state: if attempts == 0 {
                UncompletedState::NotAttempted
            } else {
                UncompletedState::Interrupted
            },
            attempts,
            last_error: self.last_error.get(job_id).cloned(),
        }
    }

    /// The manifest as persisted now: held but unfinished jobs are listed as
    /// uncompleted so the partition is complete at every checkpoint.
    fn snapshot(&self) -> RunManifest {
        let mut m = self.manifest.clone();
        let held = self
            .ready
            .iter()
            .chain(self.returned.iter())
            .chain(self.delayed.iter().map(|d| &d.0.job))
            .map(|j| (&j.job_id, j.attempt))
            .chain(self.in_flight.iter().map(|(id, a)| (id, *a)));
        m.uncompleted.extend(held.map(|(id, a)| self.pending_entry(id, a)));
        m.cursor = self.stream.cursor();
        m
    }

    fn checkpoint(&mut self) -> Result<(), SchedulerError> {
        self.manifest.sequence += 1;
        let snap = self.snapshot();
        self.ctx.checkpoints.persist(&snap)?;
        self.since_checkpoint = 0;
        self.step()
    }

    fn refill(&mut self) -> Result<(), SchedulerError> {
        let cap = self.ctx.config.buffer_size.max(1);
        while !self.stream_done && self.ready.len() + self.delayed.len() < cap {
            match self.stream.next() {
                Some(job) => {
                    self.ready.push_back(job);
                    self.note_peaks();
                    self.step()?;
                }
                None => self.stream_done = true,
            }
        }
        Ok(())
    }

    fn promote_due(&mut self) {
        let now = self.ctx.clock.now();
        while self.delayed.peek().is_some_and(|d| d.0.due <= now) {
            let Reverse(d) = self.delayed.pop().expect("peeked");
            self.ready.push_front(d.job);
        }
    }

    fn dispatch(&mut self) -> Result<(), SchedulerError> {
        let limit = self.ctx.config.max_concurrency.max(1);
        while self.in_flight.len() < limit && !self.stopping() {
            let Some(mut job) = self.ready.pop_front() else { break };
            let population = Arc::clone(self.stream.population());
            let survey = Arc::clone(self.stream.survey());
            let question = &survey.questions[job.question_index];
            job.transition(JobStatus::InFlight).expect("queued jobs are pending");
            self.in_flight.insert(job.job_id.clone(), job.attempt);
            self.emit(MetricsEvent::Dispatched);
            self.note_peaks();
            match build_prompt(&population[job.agent_index], question, &self.ctx.config) {
                Ok(p) => {
                    job.prompt = Some(p);
                    let schema = question.answer_schema.clone();
                    self.workers.spawn(work(job, schema, Arc::clone(&self.shared)));
                }
                Err(e) => {
                    let now = self.ctx.clock.now();
                    self.workers.spawn(std::future::ready(Report {
                        job,
                        outcome: Outcome::BadPrompt(e.to_string()),
                        usage: Usage::default(),
                        calls: 0,
                        started_at: now,
                        finished_at: now,
                    }));
                }
            }
            self.step()?;
        }
        Ok(())
    }

    fn exhaust(&mut self, mut job: RequestJob, error: String) -> Result<(), SchedulerError> {
        job.transition(JobStatus::Exhausted).expect("reports come from in-flight jobs");
        self.last_error.remove(&job.job_id);
        self.manifest.uncompleted.push(UncompletedJob {
            job_id: job.job_id,
            state: UncompletedState::Exhausted,
            attempts: job.attempt,
            last_error: Some(error),
        });
        self.emit(MetricsEvent::Exhausted);
        self.step()?;
        self.checkpoint()
    }

    fn handle(&mut self, report: Report) -> Result<(), SchedulerError> {
        self.step()?;
        let Report {
            mut job,
            outcome,
            usage,
            calls,
            started_at,
            finished_at,
        } = report;
        self.in_flight.remove(&job.job_id);
        self.stats.provider_calls += calls as u64;
        if usage.total() > 0 {
            self.emit(MetricsEvent::Usage {
                input_tokens: usage.input_tokens,
                output_tokens: usage.output_tokens,
            });
        }
        if !matches!(outcome, Outcome::Cancelled | Outcome::Infeasible(_) | Outcome::BadPrompt(_)) {
            job.attempt += 1;
        }
        match outcome {
            Outcome::Cancelled => {
                job.transition(JobStatus::Pending).expect("in flight");
                self.emit(MetricsEvent::Released);
                self.returned.push(job);
                Ok(())
            }
            Outcome::Answered { parsed, repairs } => {
                let record = AnswerRecord {
                    run_id: self.ctx.run_id.clone(),
                    agent_id: job.job_id.agent_id.clone(),
                    question_id: job.job_id.question_id.clone(),
                    agent_index: job.agent_index,
                    question_index: job.question_index,
                    status: AnswerStatus::Ok,
                    value: Some(parsed.value),
                    reasoning: parsed.reasoning,
                    raw_response: parsed.raw,
                    attempts: job.attempt,
                    format_repairs: repairs,
                    usage,
                    dispatched_at: started_at.as_secs_f64(),
                    completed_at: finished_at.as_secs_f64(),
                };
                self.ctx.answers.save_answer(&record)?;
                self.step()?;
                job.transition(JobStatus::Completed).expect("in flight");
                self.last_error.remove(&job.job_id);
                self.manifest.completed.insert(job.job_id);
                self.emit(MetricsEvent::Completed);
                self.step()?;
                self.since_checkpoint += 1;
                if self.since_checkpoint >= CHECKPOINT_EVERY {
                    self.checkpoint()?;
                }
                Ok(())
            }
            Outcome::FormatExhausted { error } => self.exhaust(job, format!("unusable reply: {error}")),
            Outcome::Infeasible(e) => self.exhaust(job, e.to_string()),
            Outcome::BadPrompt(e) => self.exhaust(job, format!("prompt construction failed: {e}")),
            Outcome::Failed(err) => {
                let class = classify_error(&err);
                let retries_left = job.attempt <= self.ctx.config.retry.max_retries;
                match retry_delay(class, job.attempt - 1, &self.ctx.config.retry, &mut self.rng) {
                    Some(delay) if retries_left => {
                        job.transition(JobStatus::Pending).expect("in flight");
                        self.last_error.insert(job.job_id.clone(), err.to_string());
                        self.seq += 1;
                        self.delayed.push(Reverse(Delayed {
                            due: self.ctx.clock.now() + delay,
                            seq: self.seq,
                            job,
                        }));
                        self.emit(MetricsEvent::Retried);
                        self.step()
                    }
                    Some(_) => self.exhaust(job, err.to_string()),
                    None => {
                        self.abort.get_or_insert_with(|| err.to_string());
                        self.exhaust(job, err.to_string())
                    }
                }
            }
        }
    }

    async fn wait(&mut self) -> Wake {
        let due = self.delayed.peek().map(|d| d.0.due);
        let stopping = self.stopping();
        let clock = Arc::clone(&self.ctx.clock);
        let control = self.ctx.control.clone();
        tokio::select! {
            biased;
            Some(r) = self.workers.join_next(), if !self.workers.is_empty() => Wake::Report(r),
            _ = clock.sleep_until(due.unwrap_or_default()), if due.is_some() && !stopping => Wake::Timer,
            _ = control.cancelled(), if !stopping => Wake::Cancel,
        }
    }

    fn finalize(mut self) -> Result<RunOutcome, SchedulerError> {
        let leftovers: Vec<(JobId, u32)> = self
            .ready
            .drain(..)
            .chain(self.returned.drain(..))
            .chain(self.delayed.drain().map(|d| d.0.job))
            .map(|j| (j.job_id, j.attempt))
            .chain(self.stream.by_ref().map(|j| (j.job_id, 0)))
            .collect();
        let end = match self.abort.take() {
            Some(reason) => RunEnd::Aborted { reason },
            None if !leftovers.is_empty() => RunEnd::Cancelled,
            None => RunEnd::Finished,
        };
        for (id, attempts) in leftovers {
            let entry = self.pending_entry(&id, attempts);
            self.manifest.uncompleted.push(entry);
        }
        self.manifest.cursor = self.stream.cursor();
        self.manifest.end = Some(end);
        self.emit(MetricsEvent::Finished);
        self.checkpoint()?;
        Ok(RunOutcome {
            manifest: self.manifest,
            stats: self.stats,
        })
    }
}

/// Runs `jobs` to completion, cancellation or abort.
///
/// `start` is the manifest to build on: [`RunManifest::new`] for a fresh run,
/// or the second half of [`plan_resume`] for a continuation. A fatal provider
/// error exhausts its job, stops dispatching, lets in-flight work finish and
/// ends the run as aborted. `Err` means progress may not have been finalized
/// (sink failure or injected crash); the last checkpoint is still valid.
pub async fn run_jobs(jobs: JobStream, start: RunManifest, ctx: RunContext) -> Result<RunOutcome, SchedulerError> {
    let config = Arc::clone(&ctx.config);
    let shared = Arc::new(Shared {
        provider: Arc::clone(&ctx.provider),
        clock: Arc::clone(&ctx.clock),
        limiter: Mutex::new(RateLimiter::new(RateBudget {
            rpm_limit: config.rpm_limit as u64,
            tpm_limit: config.tpm_limit,
        })),
        metrics: Arc::clone(&ctx.metrics),
        control: ctx.control.clone(),
        repair_limit: config.format_repair_attempts,
    });
    let total = jobs.total() as u64;
    let already = start.completed.len() as u64;
    let mut co = Coordinator {
        rng: ChaCha8Rng::seed_from_u64(mix_seed(config.run_seed, 0x6261_636b_6f66)),
        ctx,
        shared,
        stream: jobs,
        stream_done: false,
        manifest: start,
        ready: VecDeque::new(),
        delayed: BinaryHeap::new(),
        in_flight: HashMap::new(),
        workers: JoinSet::new(),
        returned: Vec::new(),
        last_error: HashMap::new(),
        abort: None,
        seq: 0,
        since_checkpoint: 0,
        stats: RunStats::default(),
    };
    co.emit(MetricsEvent::Started {
        total_jobs: total,
        already_completed: already,
    });
    co.checkpoint()?;
    loop {
        if !co.stopping() {
            co.refill()?;
            co.promote_due();
            co.dispatch()?;
        }
        if co.workers.is_empty() {
            let drained = co.stream_done && co.ready.is_empty() && co.delayed.is_empty();
            if co.stopping() || drained {
                break;
            }
        }
        match co.wait().await {
            Wake::Report(Ok(report)) => co.handle(report)?,
            Wake::Report(Err(e)) => return Err(SchedulerError::Worker(e.to_string())),
            Wake::Timer | Wake::Cancel => {}
        }
    }
    co.finalize()
}
