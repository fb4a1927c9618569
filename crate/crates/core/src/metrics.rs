//! Live run telemetry.
//!
//! The scheduler reports [`MetricsEvent`]s; a [`MetricsHub`] folds them into
//! counters and publishes immutable [`MetricsSnapshot`]s to any number of
//! subscribers. Subscriptions are coalesced to at most four snapshots a
//! second and always end with the terminal snapshot.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, Stream};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::clock::SharedClock;
use crate::survey::Pricing;

pub const RATE_WINDOW: Duration = Duration::from_secs(60);
pub const MIN_EMIT_INTERVAL: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum MetricsEvent {
    /// A scheduler run begins; `already_completed` jobs carry over from
    /// earlier runs of the same survey.
    Started { total_jobs: u64, already_completed: u64 },
    /// A job left the queue for its first request of an attempt.
    Dispatched,
    /// A format-repair request was sent for an in-flight job.
    Repaired,
    /// One provider call went out.
    Requested,
    Completed,
    /// An in-flight job failed and went back to the queue.
    Retried,
    /// An in-flight job was given up on.
    Exhausted,
    /// An in-flight job was handed back without a result (cancellation).
    Released,
    Usage { input_tokens: u64, output_tokens: u64 },
    Finished,
}

pub trait MetricsSink: Send + Sync {
    fn record(&self, at: Duration, event: MetricsEvent);
}

/// Discards everything.
pub struct NullMetrics;

impl MetricsSink for NullMetrics {
    fn record(&self, _: Duration, _: MetricsEvent) {}
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub run_id: String,
    pub total_jobs: u64,
    pub completed: u64,
    pub failed_exhausted: u64,
    pub in_flight: u64,
    pub pending: u64,
    pub retries_total: u64,
    pub format_repairs_total: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Requests sent in the trailing 60 seconds.
    pub current_rpm: u64,
    pub estimated_cost: f64,
    /// Seconds until the pending jobs drain at the trailing completion rate.
    pub eta_secs: Option<f64>,
    pub at_secs: f64,
    pub terminal: bool,
}

impl MetricsSnapshot {
    pub fn is_conserved(&self) -> bool {
        self.completed + self.failed_exhausted + self.in_flight + self.pending == self.total_jobs
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecorder {
    run_id: String,
    pricing: Pricing,
    snap: MetricsSnapshot,
    requests: VecDeque<Duration>,
    completions: VecDeque<Duration>,
}

fn prune(times: &mut VecDeque<Duration>, now: Duration) {
    while times.front().is_some_and(|t| *t + RATE_WINDOW <= now) {
        times.pop_front();
    }
}

impl MetricsRecorder {
    pub fn new(run_id: &str, pricing: Pricing) -> Self {
        Self {
            run_id: run_id.to_owned(),
            pricing,
            snap: MetricsSnapshot {
                run_id: run_id.to_owned(),
                ..Default::default()
            },
            requests: VecDeque::new(),
            completions: VecDeque::new(),
        }
    }

    pub fn record(&mut self, at: Duration, event: MetricsEvent) {
        let s = &mut self.snap;
        match event {
            MetricsEvent::Started {
                total_jobs,
                already_completed,
            } => {
                *s = MetricsSnapshot {
                    run_id: self.run_id.clone(),
                    total_jobs,
                    completed: already_completed.min(total_jobs),
                    pending: total_jobs.saturating_sub(already_completed),
                    ..Default::default()
                };
                self.requests.clear();
                self.completions.clear();
            }
            MetricsEvent::Dispatched => {
                if s.pending > 0 {
                    s.pending -= 1;
                    s.in_flight += 1;
                }
            }
            MetricsEvent::Repaired => s.format_repairs_total += 1,
            MetricsEvent::Requested => self.requests.push_back(at),
            MetricsEvent::Completed => {
                if s.in_flight > 0 {
                    s.in_flight -= 1;
                    s.completed += 1;
                }
                self.completions.push_back(at);
            }
            MetricsEvent::Retried => {
                if s.in_flight > 0 {
                    s.in_flight -= 1;
                    s.pending += 1;
                }
                s.retries_total += 1;
            }
            MetricsEvent::Exhausted => {
                if s.in_flight > 0 {
                    s.in_flight -= 1;
                    s.failed_exhausted += 1;
                }
            }
            MetricsEvent::Released => {
                if s.in_flight > 0 {
                    s.in_flight -= 1;
                    s.pending += 1;
                }
            }
            MetricsEvent::Usage {
                input_tokens,
                output_tokens,
            } => {
                s.tokens_in += input_tokens;
                s.tokens_out += output_tokens;
            }
            MetricsEvent::Finished => s.terminal = true,
        }
    }

    pub fn snapshot(&mut self, now: Duration) -> MetricsSnapshot {
        prune(&mut self.requests, now);
        prune(&mut self.completions, now);
        let mut snap = self.snap.clone();
        snap.current_rpm = self.requests.len() as u64;
        snap.estimated_cost = snap.tokens_in as f64 * self.pricing.input_token_price
            + snap.tokens_out as f64 * self.pricing.output_token_price;
        let per_sec = self.completions.len() as f64 / RATE_WINDOW.as_secs_f64();
        snap.eta_secs = (per_sec > 0.0).then(|| snap.pending as f64 / per_sec);
        snap.at_secs = now.as_secs_f64();
        snap
    }
}

/// Single owner of one run's counters, fanning snapshots out to subscribers.
pub struct MetricsHub {
    recorder: Mutex<MetricsRecorder>,
    tx: watch::Sender<MetricsSnapshot>,
    clock: SharedClock,
}

impl MetricsHub {
    pub fn new(run_id: &str, pricing: Pricing, clock: SharedClock) -> Self {
        let mut recorder = MetricsRecorder::new(run_id, pricing);
        let (tx, _) = watch::channel(recorder.snapshot(clock.now()));
        Self {
            recorder: Mutex::new(recorder),
            tx,
            clock,
        }
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        self.recorder.lock().snapshot(self.clock.now())
    }

    /// Snapshots in publication order, at most one per 250 ms of clock time,
    /// ending after the terminal snapshot.
    pub fn subscribe(&self) -> impl Stream<Item = MetricsSnapshot> + Send + 'static {
        let rx = self.tx.subscribe();
        let clock = Arc::clone(&self.clock);
        stream::unfold((rx, clock, true, false), |(mut rx, clock, first, done)| async move {
            if done {
                return None;
            }
            if !first {
                clock.sleep(MIN_EMIT_INTERVAL).await;
                if !rx.has_changed().unwrap_or(false) && rx.changed().await.is_err() {
                    return None;
                }
            }
            let snap = rx.borrow_and_update().clone();
            let terminal = snap.terminal;
            Some((snap, (rx, clock, false, terminal)))
        })
    }
}

impl MetricsSink for MetricsHub {
    fn record(&self, at: Duration, event: MetricsEvent) {
        let mut recorder = self.recorder.lock();
        recorder.record(at, event);
        let snap = recorder.snapshot(at);
        self.tx.send_replace(snap);
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown run {0}")]
pub struct UnknownRun(pub String);

/// Hubs of every live or recently finished run.
#[derive(Default)]
pub struct MetricsRegistry {
    hubs: Mutex<HashMap<String, Arc<MetricsHub>>>,
}

impl MetricsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates (or replaces) the hub of `run_id`.
    pub fn open(&self, run_id: &str, pricing: Pricing, clock: SharedClock) -> Arc<MetricsHub> {
        let hub = Arc::new(MetricsHub::new(run_id, pricing, clock));
        self.hubs.lock().insert(run_id.to_owned(), Arc::clone(&hub));
        hub
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<MetricsHub>, UnknownRun> {
        self.hubs
            .lock()
            .get(run_id)
            .cloned()
            .ok_or_else(|| UnknownRun(run_id.to_owned()))
    }

    pub fn subscribe(&self, run_id: &str) -> Result<impl Stream<Item = MetricsSnapshot> + Send + 'static, UnknownRun> {
        Ok(self.get(run_id)?.subscribe())
    }

    pub fn remove(&self, run_id: &str) {
        self.hubs.lock().remove(run_id);
    }
}
