//! Drives one stored run: loads or generates its population, plans a fresh
//! start or a resume, and runs the scheduler against the store.

use std::sync::Arc;

use crate::clock::SharedClock;
use crate::metrics::MetricsSink;
use crate::profile::{generate_population, ProfileError};
use crate::providers::SharedProvider;
use crate::scheduler::{plan_resume, run_jobs, ResumeError, RunContext, RunControl, RunEnd, RunManifest, RunOutcome, SchedulerError};
use crate::store::{RunState, SimulationStore, StoreError};
use crate::survey::expand_jobs;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Resume(#[from] ResumeError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

pub struct RunDriver {
    pub store: Arc<SimulationStore>,
    pub user_id: String,
    pub run_id: String,
    pub provider: SharedProvider,
    pub clock: SharedClock,
    pub metrics: Arc<dyn MetricsSink>,
    pub control: RunControl,
}

impl RunDriver {
    /// Runs to the end. With `resume`, continues from the latest stored
    /// checkpoint and skips every job already answered.
    pub async fn drive(self, resume: bool) -> Result<RunOutcome, RunnerError> {
        let meta = self.store.run_meta(&self.user_id, &self.run_id)?;
        let config = Arc::new(meta.config.clone());
        let population = match self.store.population(&self.user_id, &self.run_id)? {
            Some(p) => p,
            None => {
                let p = Arc::new(generate_population(
                    &config.profile_schema,
                    config.population_size,
                    config.run_seed,
                )?);
                self.store.save_population(&self.user_id, &self.run_id, Arc::clone(&p))?;
                p
            }
        };
        let jobs = expand_jobs(population, Arc::new(meta.survey.clone()));
        let fresh = RunManifest::new(&self.run_id, &config, jobs.total());
        let (jobs, start) = if resume {
            let latest = self.store.latest_manifest(&self.user_id, &self.run_id)?.unwrap_or(fresh);
            let answered = self.store.answered_keys(&self.user_id, &self.run_id)?;
            plan_resume(&latest, &config, jobs, &answered)?
        } else {
            (jobs, fresh)
        };
        let sinks = self.store.run_sinks(&self.user_id, &self.run_id);
        let ctx = RunContext {
            run_id: self.run_id,
            config,
            provider: self.provider,
            clock: self.clock,
            answers: sinks.clone(),
            checkpoints: sinks,
            metrics: self.metrics,
            control: self.control,
        };
        Ok(run_jobs(jobs, start, ctx).await?)
    }
}

/// Terminal run state for a scheduler outcome. A run that finished with
/// exhausted jobs is failed: it holds partial results and can be resumed.
pub fn terminal_state(outcome: &RunOutcome) -> RunState {
    match outcome.end() {
        RunEnd::Finished if outcome.manifest.uncompleted.is_empty() => RunState::Completed,
        RunEnd::Finished | RunEnd::Aborted { .. } => RunState::Failed,
        RunEnd::Cancelled => RunState::Cancelled,
    }
}

/// Human-readable reason for a non-completed terminal state.
pub fn failure_reason(outcome: &RunOutcome) -> Option<String> {
    match outcome.end() {
        RunEnd::Aborted { reason } => Some(reason.clone()),
        RunEnd::Finished if !outcome.manifest.uncompleted.is_empty() => Some(format!(
            "{} of {} jobs exhausted their retries",
            outcome.manifest.uncompleted.len(),
            outcome.manifest.total_jobs
        )),
        _ => None,
    }
}
