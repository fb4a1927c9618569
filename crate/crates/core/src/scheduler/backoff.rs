use std::time::Duration;

use rand::Rng;

use crate::providers::{ProviderError, ProviderErrorKind};
use crate::survey::RetryPolicy;

/// Delay before retry number `retry` (0 for the first retry):
/// `min(max_delay, base_delay * 2^retry) * (1 + u)` with `u` uniform in
/// `[0, jitter_fraction]`.
pub fn compute_backoff<R: Rng + ?Sized>(retry: u32, policy: &RetryPolicy, rng: &mut R) -> Duration {
    let factor = 2f64.powi(retry.min(1023) as i32);
    let raw = (policy.base_delay.as_secs_f64() * factor).min(policy.max_delay.as_secs_f64());
    let jitter = if policy.jitter_fraction > 0.0 {
        rng.random_range(0.0..=policy.jitter_fraction)
    } else {
        0.0
    };
    Duration::from_secs_f64(raw * (1.0 + jitter))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    RateLimited { retry_after: Option<Duration> },
    Transient,
    Fatal,
}

pub fn classify_error(err: &ProviderError) -> FailureClass {
    match err.kind() {
        ProviderErrorKind::RateLimit => FailureClass::RateLimited {
            retry_after: err.retry_after(),
        },
        ProviderErrorKind::Transient => FailureClass::Transient,
        ProviderErrorKind::Fatal => FailureClass::Fatal,
    }
}

/// When a failed job may go out again: the backoff, pushed back further if
/// the provider asked for a longer pause.
pub fn retry_delay<R: Rng + ?Sized>(
    class: FailureClass,
    retry: u32,
    policy: &RetryPolicy,
    rng: &mut R,
) -> Option<Duration> {
    let backoff = compute_backoff(retry, policy, rng);
    match class {
        FailureClass::RateLimited { retry_after } => Some(backoff.max(retry_after.unwrap_or_default())),
        FailureClass::Transient => Some(backoff),
        FailureClass::Fatal => None,
    }
}
