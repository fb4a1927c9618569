//! Run lifecycle: every state change of every run goes through one
//! [`RunManager`], which also owns the background scheduler tasks.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use panelsim_core::metrics::MetricsEvent;
use panelsim_core::profile::{load_population, AgentProfile};
use panelsim_core::runner::{failure_reason, terminal_state, RunnerError};
use panelsim_core::scheduler::RunOutcome;
use panelsim_core::store::{new_run_meta, PurgeReport, RunMeta, StoreError, UploadKind};
use panelsim_core::survey::{parse_survey_document, validate_config_for, SurveyFormat};
use panelsim_core::{
    MetricsRegistry, MetricsSink, ProviderRegistry, RunControl, RunDriver, RunState, SharedClock, SimulationConfig,
    SimulationStore, SurveySpec, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManagerError {
    #[error("run {0} not found")]
    NotFound(String),
    #[error("run {0} belongs to another user")]
    Forbidden(String),
    #[error("{0}")]
    Conflict(String),
    #[error("invalid request")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for ManagerError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => ManagerError::NotFound(what),
            other => ManagerError::Store(other),
        }
    }
}

fn invalid(subject: &str, message: impl Into<String>) -> ManagerError {
    let mut r = ValidationReport::new();
    r.push(subject, message);
    ManagerError::Invalid(r)
}

/// Body of `POST /runs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartRequest {
    pub config: SimulationConfig,
    pub survey_upload: String,
    #[serde(default)]
    pub population_upload: Option<String>,
    /// Repeating a start with the same key returns the run it created.
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

/// One state change, as applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub run_id: String,
    pub from: RunState,
    pub to: RunState,
}

struct Active {
    user_id: String,
    control: RunControl,
    done: watch::Receiver<bool>,
}

#[derive(Default)]
struct Inner {
    active: HashMap<String, Active>,
    idempotency: HashMap<(String, String), String>,
    transitions: Vec<Transition>,
}

pub struct RunManager {
    store: Arc<SimulationStore>,
    metrics: Arc<MetricsRegistry>,
    providers: ProviderRegistry,
    clock: SharedClock,
    inner: Mutex<Inner>,
}

fn fresh_run_id() -> String {
    let bytes: [u8; 8] = rand::rng().random();
    format!("r{}", hex::encode(bytes))
}

impl RunManager {
    /// Runs left active by a previous process have no task behind them;
    /// they are moved to a resumable terminal state.
    pub fn new(
        store: Arc<SimulationStore>,
        metrics: Arc<MetricsRegistry>,
        providers: ProviderRegistry,
        clock: SharedClock,
    ) -> Arc<Self> {
        for meta in store.all_runs() {
            let next = match meta.state {
                RunState::Running => RunState::Failed,
                RunState::Cancelling => RunState::Cancelled,
                _ => continue,
            };
            let _ = store.update_run(&meta.user_id, &meta.run_id, |m| {
                m.state = next;
                if next == RunState::Failed {
                    m.error = Some("interrupted by a service restart".into());
                }
            });
        }
        Arc::new(Self {
            store,
            metrics,
            providers,
            clock,
            inner: Mutex::new(Inner::default()),
        })
    }

    pub fn store(&self) -> &Arc<SimulationStore> {
        &self.store
    }

    pub fn metrics(&self) -> &Arc<MetricsRegistry> {
        &self.metrics
    }

    /// Every transition applied so far, in order.
    pub fn transitions(&self) -> Vec<Transition> {
        self.inner.lock().transitions.clone()
    }

    /// The run's metadata, if `user` owns it.
    pub fn owned(&self, user: &str, run: &str) -> Result<RunMeta, ManagerError> {
        match self.store.run_owner(run) {
            None => Err(ManagerError::NotFound(run.to_owned())),
            Some(owner) if owner != user => Err(ManagerError::Forbidden(run.to_owned())),
            Some(_) => Ok(self.store.run_meta(user, run)?),
        }
    }

    fn transition(&self, inner: &mut Inner, user: &str, run: &str, to: RunState) -> Result<RunMeta, ManagerError> {
        let from = self.store.run_meta(user, run)?.state;
        if !from.can_transition_to(to) {
            return Err(ManagerError::Conflict(format!(
                "run {run} is {}, cannot move to {}",
                from.name(),
                to.name()
            )));
        }
        let meta = self.store.update_run(user, run, |m| {
            m.state = to;
            if to == RunState::Running {
                m.error = None;
            }
        })?;
        inner.transitions.push(Transition {
            run_id: run.to_owned(),
            from,
            to,
        });
        Ok(meta)
    }

    fn load_survey(&self, user: &str, upload: &str) -> Result<SurveySpec, ManagerError> {
        let (meta, bytes) = self
            .store
            .upload(user, upload)
            .map_err(|_| invalid("survey_upload", format!("no upload {upload:?}")))?;
        if meta.kind != UploadKind::Survey {
            return Err(invalid("survey_upload", "upload is not a survey"));
        }
        let format: SurveyFormat = meta.format.parse().map_err(|e: String| invalid("survey_upload", e))?;
        parse_survey_document(&bytes, format).map_err(|e| invalid("survey_upload", e.to_string()))
    }

    fn load_population(
        &self,
        user: &str,
        upload: &str,
        config: &SimulationConfig,
    ) -> Result<Vec<AgentProfile>, ManagerError> {
        let (meta, bytes) = self
            .store
            .upload(user, upload)
            .map_err(|_| invalid("population_upload", format!("no upload {upload:?}")))?;
        if meta.kind != UploadKind::Population {
            return Err(invalid("population_upload", "upload is not a population"));
        }
        let population = load_population(&config.profile_schema, &bytes, &meta.format)
            .map_err(|e| invalid("population_upload", e.to_string()))?;
        if population.len() != config.population_size {
            return Err(invalid(
                "population_size",
                format!("must equal the uploaded population's size ({})", population.len()),
            ));
        }
        Ok(population)
    }

    /// Validates, creates, and launches a run. Returns immediately.
    pub fn start(self: &Arc<Self>, user: &str, req: StartRequest) -> Result<RunMeta, ManagerError> {
        let mut inner = self.inner.lock();
        if let Some(key) = &req.idempotency_key {
            if let Some(run) = inner.idempotency.get(&(user.to_owned(), key.clone())) {
                return Ok(self.store.run_meta(user, run)?);
            }
        }
        let provider = match self.providers.create(&req.config) {
            Ok(p) => p,
            Err(e) => return Err(invalid("provider_id", e.detail)),
        };
        let report = validate_config_for(&req.config, &provider.caps());
        if !report.is_empty() {
            return Err(ManagerError::Invalid(report));
        }
        let survey = self.load_survey(user, &req.survey_upload)?;
        let population = match &req.population_upload {
            Some(id) => Some(self.load_population(user, id, &req.config)?),
            None => None,
        };

        let run_id = fresh_run_id();
        let mut meta = new_run_meta(&run_id, user, req.config.clone(), survey, self.clock.unix_secs());
        meta.survey_upload = Some(req.survey_upload.clone());
        meta.population_upload = req.population_upload.clone();
        self.store.create_run(meta)?;
        if let Some(p) = population {
            self.store.save_population(user, &run_id, Arc::new(p))?;
        }
        let meta = self.transition(&mut inner, user, &run_id, RunState::Running)?;
        if let Some(key) = req.idempotency_key {
            inner.idempotency.insert((user.to_owned(), key), run_id.clone());
        }
        self.launch(&mut inner, user, &meta, provider, false);
        Ok(meta)
    }

    fn launch(
        self: &Arc<Self>,
        inner: &mut Inner,
        user: &str,
        meta: &RunMeta,
        provider: panelsim_core::SharedProvider,
        resume: bool,
    ) {
        let hub = self
            .metrics
            .open(&meta.run_id, meta.config.pricing.clone(), Arc::clone(&self.clock));
        let control = RunControl::new();
        let (done_tx, done_rx) = watch::channel(false);
        inner.active.insert(
            meta.run_id.clone(),
            Active {
                user_id: user.to_owned(),
                control: control.clone(),
                done: done_rx,
            },
        );
        let driver = RunDriver {
            store: Arc::clone(&self.store),
            user_id: user.to_owned(),
            run_id: meta.run_id.clone(),
            provider,
            clock: Arc::clone(&self.clock),
            metrics: hub.clone(),
            control,
        };
        let this = Arc::clone(self);
        let (user, run) = (user.to_owned(), meta.run_id.clone());
        tokio::spawn(async move {
            let result = driver.drive(resume).await;
            this.finish(&user, &run, result);
            if !hub.snapshot().terminal {
                hub.record(this.clock.now(), MetricsEvent::Finished);
            }
            let _ = done_tx.send(true);
        });
    }

    fn finish(&self, user: &str, run: &str, result: Result<RunOutcome, RunnerError>) {
        let mut inner = self.inner.lock();
        inner.active.remove(run);
        let (target, error) = match &result {
            Ok(outcome) => (terminal_state(outcome), failure_reason(outcome)),
            Err(e) => (RunState::Failed, Some(e.to_string())),
        };
        match result {
            Ok(_) => tracing::info!(run, state = target.name(), "run ended"),
            Err(e) => tracing::warn!(run, error = %e, "run failed"),
        }
        // The run may have been purged while it was winding down.
        let Ok(current) = self.store.run_meta(user, run) else {
            return;
        };
        let target = if current.state.can_transition_to(target) {
            target
        } else {
            RunState::Failed
        };
        if self.transition(&mut inner, user, run, target).is_ok() {
            let _ = self.store.update_run(user, run, |m| m.error = error);
        }
    }

    pub fn cancel(&self, user: &str, run: &str) -> Result<RunMeta, ManagerError> {
        self.owned(user, run)?;
        let mut inner = self.inner.lock();
        let meta = self.transition(&mut inner, user, run, RunState::Cancelling)?;
        if let Some(active) = inner.active.get(run) {
            active.control.cancel();
        }
        Ok(meta)
    }

    pub fn resume(self: &Arc<Self>, user: &str, run: &str) -> Result<RunMeta, ManagerError> {
        let meta = self.owned(user, run)?;
        let mut inner = self.inner.lock();
        let state = self.store.run_meta(user, run)?.state;
        if !matches!(state, RunState::Failed | RunState::Cancelled) {
            return Err(ManagerError::Conflict(format!(
                "run {run} is {}, only failed or cancelled runs resume",
                state.name()
            )));
        }
        if self.store.latest_manifest(user, run)?.is_none() {
            return Err(ManagerError::Conflict(format!("run {run} has no manifest to resume from")));
        }
        let provider = self
            .providers
            .create(&meta.config)
            .map_err(|e| invalid("provider_id", e.detail))?;
        let meta = self.transition(&mut inner, user, run, RunState::Running)?;
        self.launch(&mut inner, user, &meta, provider, true);
        Ok(meta)
    }

    /// Resolves once the run has no background task.
    pub async fn wait_idle(&self, run: &str) {
        let done = self.inner.lock().active.get(run).map(|a| a.done.clone());
        if let Some(mut done) = done {
            let _ = done.wait_for(|d| *d).await;
        }
    }

    /// Stops the user's runs, then deletes everything stored for them.
    pub async fn purge(&self, user: &str) -> Result<PurgeReport, ManagerError> {
        let waits: Vec<_> = {
            let mut inner = self.inner.lock();
            let runs: Vec<String> = inner
                .active
                .iter()
                .filter(|(_, a)| a.user_id == user)
                .map(|(r, _)| r.clone())
                .collect();
            for run in &runs {
                let _ = self.transition(&mut inner, user, run, RunState::Cancelling);
                inner.active[run].control.cancel();
            }
            runs.iter().map(|r| inner.active[r].done.clone()).collect()
        };
        for mut done in waits {
            let _ = done.wait_for(|d| *d).await;
        }
        let mut inner = self.inner.lock();
        for meta in self.store.list_runs(user) {
            self.metrics.remove(&meta.run_id);
        }
        inner.idempotency.retain(|(u, _), _| u != user);
        Ok(self.store.purge_user(user)?)
    }
}
