//! Time sources.
//!
//! Everything that waits or timestamps goes through [`Clock`], so scheduling,
//! backoff and windowing can be driven by simulated time in tests.
//!
//! [`RuntimeClock`] reads the tokio timer. Inside a runtime started with paused
//! time (`start_paused = true`) it becomes a discrete-event clock: the runtime
//! jumps straight to the next timer whenever every task is idle, so a run that
//! spans hours of simulated time finishes in milliseconds and is reproducible.
//! [`ManualClock`] only moves when told to and suits synchronous unit tests.

use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll, Waker};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use futures::future::BoxFuture;
use futures::FutureExt;
use parking_lot::Mutex;

pub trait Clock: Send + Sync + 'static {
    /// Monotonic time elapsed since the clock's origin.
    fn now(&self) -> Duration;

    fn sleep(&self, dur: Duration) -> BoxFuture<'static, ()>;

    /// Wall-clock seconds since the unix epoch, for human-facing timestamps.
    fn unix_secs(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    fn sleep_until(&self, deadline: Duration) -> BoxFuture<'static, ()> {
        self.sleep(deadline.saturating_sub(self.now()))
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Clock backed by the tokio timer.
#[derive(Debug, Clone)]
pub struct RuntimeClock {
    origin: tokio::time::Instant,
}

impl RuntimeClock {
    pub fn new() -> Self {
        Self {
            origin: tokio::time::Instant::now(),
        }
    }

    pub fn shared() -> SharedClock {
        Arc::new(Self::new())
    }
}

impl Default for RuntimeClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RuntimeClock {
    fn now(&self) -> Duration {
        tokio::time::Instant::now().duration_since(self.origin)
    }

    fn sleep(&self, dur: Duration) -> BoxFuture<'static, ()> {
        tokio::time::sleep(dur).boxed()
    }
}

#[derive(Default)]
struct ManualState {
    now: Duration,
    next_id: u64,
    sleepers: BTreeMap<(Duration, u64), Option<Waker>>,
}

/// A clock that advances only through [`ManualClock::advance`].
#[derive(Clone, Default)]
pub struct ManualClock {
    state: Arc<Mutex<ManualState>>,
    unix_origin: u64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(now: Duration) -> Self {
        let clock = Self::default();
        clock.state.lock().now = now;
        clock
    }

    pub fn advance(&self, by: Duration) {
        let wakers = {
            let mut state = self.state.lock();
            state.now += by;
            let now = state.now;
            let due: Vec<_> = state
                .sleepers
                .range(..=(now, u64::MAX))
                .map(|(k, _)| *k)
                .collect();
            due.into_iter()
                .filter_map(|k| state.sleepers.remove(&k).flatten())
                .collect::<Vec<_>>()
        };
        for w in wakers {
            w.wake();
        }
    }

    pub fn set(&self, to: Duration) {
        let now = self.now();
        if to > now {
            self.advance(to - now);
        }
    }

    /// Number of sleeps that have not yet elapsed.
    pub fn pending_sleepers(&self) -> usize {
        self.state.lock().sleepers.len()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.state.lock().now
    }

    fn sleep(&self, dur: Duration) -> BoxFuture<'static, ()> {
        let mut state = self.state.lock();
        let deadline = state.now + dur;
        let id = state.next_id;
        state.next_id += 1;
        if dur.is_zero() {
            return futures::future::ready(()).boxed();
        }
        state.sleepers.insert((deadline, id), None);
        ManualSleep {
            state: Arc::clone(&self.state),
            key: (deadline, id),
        }
        .boxed()
    }

    fn unix_secs(&self) -> u64 {
        self.unix_origin + self.now().as_secs()
    }
}

struct ManualSleep {
    state: Arc<Mutex<ManualState>>,
    key: (Duration, u64),
}

impl Future for ManualSleep {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        let mut state = self.state.lock();
        match state.sleepers.get_mut(&self.key) {
            Some(slot) => {
                *slot = Some(cx.waker().clone());
                Poll::Pending
            }
            None => Poll::Ready(()),
        }
    }
}

impl Drop for ManualSleep {
    fn drop(&mut self) {
        self.state.lock().sleepers.remove(&self.key);
    }
}
