//! Sliding-window request and token budget.
//!
//! A grant made at time `t` occupies the window until `t + 60s`. A request
//! is admitted only if, counting it, the window holds at most `rpm_limit`
//! grants and at most `tpm_limit` tokens.

use std::collections::VecDeque;
use std::time::Duration;

use parking_lot::Mutex;

use super::RunControl;
use crate::clock::Clock;

pub const WINDOW: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateBudget {
    pub rpm_limit: u64,
    pub tpm_limit: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Permit {
    id: u64,
    pub granted_at: Duration,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denial {
    /// No window can ever hold this request.
    Infeasible,
    /// Try again at this time.
    Until(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum AcquireError {
    #[error("request of {tokens} estimated tokens exceeds tpm_limit {limit}")]
    Infeasible { tokens: u64, limit: u64 },
    #[error("cancelled while waiting for a rate permit")]
    Cancelled,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    id: u64,
    at: Duration,
    tokens: u64,
}

#[derive(Debug)]
pub struct RateLimiter {
    budget: RateBudget,
    entries: VecDeque<Entry>,
    tokens_in_window: u64,
    next_id: u64,
}

impl RateLimiter {
    pub fn new(budget: RateBudget) -> Self {
        Self {
            budget,
            entries: VecDeque::new(),
            tokens_in_window: 0,
            next_id: 0,
        }
    }

    pub fn budget(&self) -> RateBudget {
        self.budget
    }

    fn prune(&mut self, now: Duration) {
        while let Some(e) = self.entries.front() {
            if e.at + WINDOW > now {
                break;
            }
            self.tokens_in_window -= e.tokens;
            self.entries.pop_front();
        }
    }

    /// Grants immediately or says when a grant could next succeed.
    ///
    /// `now` must not go backwards between calls.
    pub fn try_acquire(&mut self, now: Duration, tokens: u64) -> Result<Permit, Denial> {
        if tokens > self.budget.tpm_limit || self.budget.rpm_limit == 0 {
            return Err(Denial::Infeasible);
        }
        self.prune(now);
        let mut ready_at = now;
        let count = self.entries.len() as u64;
        if count + 1 > self.budget.rpm_limit {
            let oldest_to_drop = (count - self.budget.rpm_limit) as usize;
            ready_at = ready_at.max(self.entries[oldest_to_drop].at + WINDOW);
        }
        if self.tokens_in_window + tokens > self.budget.tpm_limit {
            let mut remaining = self.tokens_in_window;
            for e in &self.entries {
                remaining -= e.tokens;
                if remaining + tokens <= self.budget.tpm_limit {
                    ready_at = ready_at.max(e.at + WINDOW);
                    break;
                }
            }
        }
        if ready_at > now {
            return Err(Denial::Until(ready_at));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.entries.push_back(Entry { id, at: now, tokens });
        self.tokens_in_window += tokens;
        Ok(Permit {
            id,
            granted_at: now,
            tokens,
        })
    }

    /// Charges a granted request for the tokens it actually used. Charges
    /// only ever grow; an overestimate is not refunded.
    pub fn reconcile(&mut self, permit: Permit, actual_tokens: u64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.id == permit.id) {
            if actual_tokens > e.tokens {
                self.tokens_in_window += actual_tokens - e.tokens;
                e.tokens = actual_tokens;
            }
        }
    }

    pub fn in_window(&mut self, now: Duration) -> (u64, u64) {
        self.prune(now);
        (self.entries.len() as u64, self.tokens_in_window)
    }
}

/// Waits for a permit. With `control`, gives up as soon as the run is
/// cancelled.
pub async fn acquire(
    limiter: &Mutex<RateLimiter>,
    clock: &dyn Clock,
    tokens: u64,
    control: Option<&RunControl>,
) -> Result<Permit, AcquireError> {
    loop {
        if control.is_some_and(RunControl::is_cancelled) {
            return Err(AcquireError::Cancelled);
        }
        let denial = limiter.lock().try_acquire(clock.now(), tokens);
        match denial {
            Ok(p) => return Ok(p),
            Err(Denial::Infeasible) => {
                return Err(AcquireError::Infeasible {
                    tokens,
                    limit: limiter.lock().budget().tpm_limit,
                })
            }
            Err(Denial::Until(t)) => match control {
                Some(c) => {
                    tokio::select! {
                        _ = clock.sleep_until(t) => {}
                        _ = c.cancelled() => return Err(AcquireError::Cancelled),
                    }
                }
                None => clock.sleep_until(t).await,
            },
        }
    }
}
