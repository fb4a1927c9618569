//! Persistence, partitioned by user.
//!
//! Two independent stores: [`CredentialStore`] for accounts and sessions,
//! and [`SimulationStore`] for everything a user's runs produce. Each user's
//! simulation data lives under its own directory, so a purge is one
//! recursive delete.
//!
//! ```text
//! <root>/sim/<user>/runs/<run>/run.json
//!                              answers.jsonl
//!                              manifest.log
//!                              population.json
//! <root>/sim/<user>/uploads/<upload>.json
//! <root>/sim/<user>/uploads/<upload>.bin
//! ```

mod credentials;
mod export;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::profile::AgentProfile;
use crate::prompt::FORMAT_DIRECTIVE_VERSION;
use crate::scheduler::{encode_checkpoint, latest_checkpoint, AnswerRecord, AnswerSink, CheckpointSink, RunManifest, SinkError};
use crate::survey::{JobId, SimulationConfig, SurveySpec};

pub use credentials::{AuthError, CredentialStore, HashCost, Session, UserId};
pub use export::{export_csv, export_jsonl, ExportFormat, ExportMeta, CSV_HEADER};

const MANIFEST_LOG_LIMIT: u64 = 8 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} already exists")]
    Exists(String),
    #[error("invalid identifier {0:?}")]
    BadId(String),
    #[error("storage failure: {0}")]
    Io(String),
    #[error("unreadable stored data: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

impl From<StoreError> for SinkError {
    fn from(e: StoreError) -> Self {
        SinkError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Draft,
    Running,
    Cancelling,
    Completed,
    Failed,
    Cancelled,
}

impl RunState {
    pub const ALL: [RunState; 6] = [
        RunState::Draft,
        RunState::Running,
        RunState::Cancelling,
        RunState::Completed,
        RunState::Failed,
        RunState::Cancelled,
    ];

    pub fn can_transition_to(self, next: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, next),
            (Draft, Running)
                | (Draft, Failed)
                | (Running, Completed)
                | (Running, Failed)
                | (Running, Cancelling)
                | (Cancelling, Cancelled)
                | (Cancelling, Completed)
                | (Cancelling, Failed)
                | (Failed, Running)
                | (Cancelled, Running)
        )
    }

    pub fn is_active(self) -> bool {
        matches!(self, RunState::Running | RunState::Cancelling)
    }

    pub fn name(self) -> &'static str {
        match self {
            RunState::Draft => "draft",
            RunState::Running => "running",
            RunState::Cancelling => "cancelling",
            RunState::Completed => "completed",
            RunState::Failed => "failed",
            RunState::Cancelled => "cancelled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub user_id: UserId,
    pub state: RunState,
    pub config: SimulationConfig,
    pub config_hash: String,
    pub directive_version: String,
    pub survey: SurveySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survey_upload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population_upload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: u64,
}

impl RunMeta {
    pub fn export_meta(&self) -> ExportMeta {
        ExportMeta {
            config_hash: self.config_hash.clone(),
            directive_version: self.directive_version.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UploadKind {
    Survey,
    Population,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadMeta {
    pub upload_id: String,
    pub kind: UploadKind,
    pub format: String,
    pub size: usize,
    pub sha256: String,
}

/// What a purge removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurgeReport {
    pub runs: usize,
    pub answers: usize,
    pub uploads: usize,
    pub manifests: usize,
    pub populations: usize,
}

#[derive(Debug, Clone)]
struct RunData {
    meta: RunMeta,
    answers: Vec<AnswerRecord>,
    keys: HashSet<JobId>,
    manifest: Option<RunManifest>,
    manifest_log_len: u64,
    population: Option<Arc<Vec<AgentProfile>>>,
}

#[derive(Debug, Default)]
struct Partition {
    runs: BTreeMap<String, RunData>,
    uploads: BTreeMap<String, (UploadMeta, Arc<Vec<u8>>)>,
}

#[derive(Default)]
struct State {
    users: HashMap<UserId, Partition>,
    owners: HashMap<String, UserId>,
}

pub struct SimulationStore {
    root: Option<PathBuf>,
    state: Mutex<State>,
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_owned()))
    }
}

fn corrupt(e: impl std::fmt::Display) -> StoreError {
    StoreError::Corrupt(e.to_string())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(bytes)?;
    Ok(())
}

impl SimulationStore {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            state: Mutex::new(State::default()),
        }
    }

    /// Opens (and replays) the store under `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let sim = root.join("sim");
        fs::create_dir_all(&sim)?;
        let mut state = State::default();
        for user in fs::read_dir(&sim)? {
            let user = user?;
            let user_id = user.file_name().to_string_lossy().into_owned();
            if check_id(&user_id).is_err() || !user.file_type()?.is_dir() {
                continue;
            }
            let part = load_partition(&user.path())?;
            for run_id in part.runs.keys() {
                state.owners.insert(run_id.clone(), user_id.clone());
            }
            state.users.insert(user_id, part);
        }
        Ok(Self {
            root: Some(root),
            state: Mutex::new(state),
        })
    }

    fn user_dir(&self, user: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join("sim").join(user))
    }

    fn run_dir(&self, user: &str, run: &str) -> Option<PathBuf> {
        self.user_dir(user).map(|d| d.join("runs").join(run))
    }

    /// Which user a run belongs to, if it exists at all.
    pub fn run_owner(&self, run_id: &str) -> Option<UserId> {
        self.state.lock().owners.get(run_id).cloned()
    }

    pub fn save_upload(&self, user: &str, kind: UploadKind, format: &str, bytes: Vec<u8>) -> Result<UploadMeta, StoreError> {
        check_id(user)?;
        let sha = hex::encode(Sha256::digest(&bytes));
        let mut state = self.state.lock();
        let part = state.users.entry(user.to_owned()).or_default();
        let upload_id = format!("up{}-{}", part.uploads.len() + 1, &sha[..12]);
        let meta = UploadMeta {
            upload_id: upload_id.clone(),
            kind,
            format: format.to_owned(),
            size: bytes.len(),
            sha256: sha,
        };
        if let Some(dir) = self.user_dir(user) {
            let dir = dir.join("uploads");
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(format!("{upload_id}.bin")), &bytes)?;
            write_atomic(
                &dir.join(format!("{upload_id}.json")),
                &serde_json::to_vec(&meta).map_err(corrupt)?,
            )?;
        }
        part.uploads.insert(upload_id, (meta.clone(), Arc::new(bytes)));
        Ok(meta)
    }

    pub fn upload(&self, user: &str, upload_id: &str) -> Result<(UploadMeta, Arc<Vec<u8>>), StoreError> {
        self.state
            .lock()
            .users
            .get(user)
            .and_then(|p| p.uploads.get(upload_id))
            .cloned()
            .ok_or_else(|| StoreError::NotFound(format!("upload {upload_id}")))
    }

    pub fn create_run(&self, meta: RunMeta) -> Result<(), StoreError> {
        check_id(&meta.user_id)?;
        check_id(&meta.run_id)?;
        let mut state = self.state.lock();
        if state.owners.contains_key(&meta.run_id) {
            return Err(StoreError::Exists(format!("run {}", meta.run_id)));
        }
        if let Some(dir) = self.run_dir(&meta.user_id, &meta.run_id) {
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&meta).map_err(corrupt)?)?;
        }
        state.owners.insert(meta.run_id.clone(), meta.user_id.clone());
        state.users.entry(meta.user_id.clone()).or_default().runs.insert(
            meta.run_id.clone(),
            RunData {
                meta,
                answers: Vec::new(),
                keys: HashSet::new(),
                manifest: None,
                manifest_log_len: 0,
                population: None,
            },
        );
        Ok(())
    }

    fn with_run<T>(&self, user: &str, run: &str, f: impl FnOnce(&mut RunData) -> Result<T, StoreError>) -> Result<T, StoreError> {
        let mut state = self.state.lock();
        let data = state
            .users
            .get_mut(user)
            .and_then(|p| p.runs.get_mut(run))
            .ok_or_else(|| StoreError::NotFound(format!("run {run}")))?;
        f(data)
    }

    pub fn run_meta(&self, user: &str, run: &str) -> Result<RunMeta, StoreError> {
        self.with_run(user, run, |d| Ok(d.meta.clone()))
    }

    pub fn list_runs(&self, user: &str) -> Vec<RunMeta> {
        self.state
            .lock()
            .users
            .get(user)
            .map(|p| p.runs.values().map(|d| d.meta.clone()).collect())
            .unwrap_or_default()
    }

    /// Every run of every user.
    pub fn all_runs(&self) -> Vec<RunMeta> {
        self.state
            .lock()
            .users
            .values()
            .flat_map(|p| p.runs.values().map(|d| d.meta.clone()))
            .collect()
    }

    pub fn update_run(&self, user: &str, run: &str, f: impl FnOnce(&mut RunMeta)) -> Result<RunMeta, StoreError> {
        let dir = self.run_dir(user, run);
        self.with_run(user, run, |d| {
            let mut next = d.meta.clone();
            f(&mut next);
            if let Some(dir) = dir {
                write_atomic(&dir.join("run.json"), &serde_json::to_vec_pretty(&next).map_err(corrupt)?)?;
            }
            d.meta = next.clone();
            Ok(next)
        })
    }

    pub fn save_population(&self, user: &str, run: &str, population: Arc<Vec<AgentProfile>>) -> Result<(), StoreError> {
        let dir = self.run_dir(user, run);
        self.with_run(user, run, |d| {
            if let Some(dir) = dir {
                write_atomic(&dir.join("population.json"), &serde_json::to_vec(&*population).map_err(corrupt)?)?;
            }
            d.population = Some(population);
            Ok(())
        })
    }

    pub fn population(&self, user: &str, run: &str) -> Result<Option<Arc<Vec<AgentProfile>>>, StoreError> {
        self.with_run(user, run, |d| Ok(d.population.clone()))
    }

    /// Idempotent per (agent, question): a repeated save is a no-op.
    pub fn save_answer(&self, user: &str, run: &str, record: &AnswerRecord) -> Result<bool, StoreError> {
        let dir = self.run_dir(user, run);
        self.with_run(user, run, |d| {
            let key = record.job_id();
            if d.keys.contains(&key) {
                return Ok(false);
            }
            if let Some(dir) = dir {
                let mut line = serde_json::to_vec(record).map_err(corrupt)?;
                line.push(b'\n');
                append(&dir.join("answers.jsonl"), &line)?;
            }
            d.keys.insert(key);
            d.answers.push(record.clone());
            Ok(true)
        })
    }

    /// Stored answers in stream order (agent-major).
    pub fn answers(&self, user: &str, run: &str) -> Result<Vec<AnswerRecord>, StoreError> {
        self.with_run(user, run, |d| {
            let mut out = d.answers.clone();
            out.sort_by_key(|r| (r.agent_index, r.question_index));
            Ok(out)
        })
    }

    pub fn answered_keys(&self, user: &str, run: &str) -> Result<HashSet<JobId>, StoreError> {
        self.with_run(user, run, |d| Ok(d.keys.clone()))
    }

    pub fn save_manifest(&self, user: &str, run: &str, manifest: &RunManifest) -> Result<(), StoreError> {
        let dir = self.run_dir(user, run);
        self.with_run(user, run, |d| {
            if let Some(dir) = dir {
                let line = encode_checkpoint(manifest);
                let path = dir.join("manifest.log");
                if d.manifest_log_len + line.len() as u64 > MANIFEST_LOG_LIMIT {
                    write_atomic(&path, line.as_bytes())?;
                    d.manifest_log_len = line.len() as u64;
                } else {
                    append(&path, line.as_bytes())?;
                    d.manifest_log_len += line.len() as u64;
                }
            }
            d.manifest = Some(manifest.clone());
            Ok(())
        })
    }

    pub fn latest_manifest(&self, user: &str, run: &str) -> Result<Option<RunManifest>, StoreError> {
        self.with_run(user, run, |d| Ok(d.manifest.clone()))
    }

    pub fn export(&self, user: &str, run: &str, format: ExportFormat) -> Result<Vec<u8>, StoreError> {
        let meta = self.run_meta(user, run)?;
        match format {
            ExportFormat::Csv => Ok(export_csv(&self.answers(user, run)?, &meta.export_meta())),
            ExportFormat::Jsonl => Ok(export_jsonl(&self.answers(user, run)?, &meta.export_meta())),
            ExportFormat::Manifest => {
                let m = self
                    .latest_manifest(user, run)?
                    .ok_or_else(|| StoreError::NotFound(format!("manifest of run {run}")))?;
                let mut bytes = serde_json::to_vec_pretty(&m).map_err(corrupt)?;
                bytes.push(b'\n');
                Ok(bytes)
            }
        }
    }

    /// Answer and checkpoint sinks bound to one run.
    pub fn run_sinks(self: &Arc<Self>, user: &str, run: &str) -> Arc<RunSinks> {
        Arc::new(RunSinks {
            store: Arc::clone(self),
            user: user.to_owned(),
            run: run.to_owned(),
        })
    }

    /// Deletes everything stored for `user`: runs, answers, manifests,
    /// populations and uploads. Other users are untouched.
    pub fn purge_user(&self, user: &str) -> Result<PurgeReport, StoreError> {
        check_id(user)?;
        let mut state = self.state.lock();
        let part = state.users.remove(user).unwrap_or_default();
        let mut report = PurgeReport {
            runs: part.runs.len(),
            uploads: part.uploads.len(),
            ..Default::default()
        };
        for (run_id, d) in &part.runs {
            state.owners.remove(run_id);
            report.answers += d.answers.len();
            report.manifests += d.manifest.is_some() as usize;
            report.populations += d.population.is_some() as usize;
        }
        if let Some(dir) = self.user_dir(user) {
            match fs::remove_dir_all(&dir) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(report)
    }

    /// Whether anything at all is stored for `user`, in memory or on disk.
    pub fn holds_data_for(&self, user: &str) -> bool {
        let in_memory = self.state.lock().users.get(user).is_some_and(|p| !p.runs.is_empty() || !p.uploads.is_empty());
        let on_disk = self.user_dir(user).is_some_and(|d| d.exists());
        in_memory || on_disk
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }
}

fn load_partition(dir: &Path) -> Result<Partition, StoreError> {
    let mut part = Partition::default();
    let runs = dir.join("runs");
    if runs.is_dir() {
        for entry in fs::read_dir(&runs)? {
            let entry = entry?;
            let run_dir = entry.path();
            let Ok(meta_bytes) = fs::read(run_dir.join("run.json")) else { continue };
            let meta: RunMeta = serde_json::from_slice(&meta_bytes).map_err(corrupt)?;
            let mut data = RunData {
                meta,
                answers: Vec::new(),
                keys: HashSet::new(),
                manifest: None,
                manifest_log_len: 0,
                population: None,
            };
            if let Ok(text) = fs::read_to_string(run_dir.join("answers.jsonl")) {
                // A torn final line from an interrupted append is skipped.
                for line in text.lines() {
                    if let Ok(r) = serde_json::from_str::<AnswerRecord>(line) {
                        if data.keys.insert(r.job_id()) {
                            data.answers.push(r);
                        }
                    }
                }
            }
            if let Ok(text) = fs::read_to_string(run_dir.join("manifest.log")) {
                data.manifest_log_len = text.len() as u64;
                data.manifest = latest_checkpoint(&text);
            }
            if let Ok(bytes) = fs::read(run_dir.join("population.json")) {
                let pop: Vec<AgentProfile> = serde_json::from_slice(&bytes).map_err(corrupt)?;
                data.population = Some(Arc::new(pop));
            }
            part.runs.insert(data.meta.run_id.clone(), data);
        }
    }
    let uploads = dir.join("uploads");
    if uploads.is_dir() {
        for entry in fs::read_dir(&uploads)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let meta: UploadMeta = serde_json::from_slice(&fs::read(&path)?).map_err(corrupt)?;
            let bytes = fs::read(path.with_extension("bin"))?;
            part.uploads.insert(meta.upload_id.clone(), (meta, Arc::new(bytes)));
        }
    }
    Ok(part)
}

pub struct RunSinks {
    store: Arc<SimulationStore>,
    user: String,
    run: String,
}

impl AnswerSink for RunSinks {
    fn save_answer(&self, record: &AnswerRecord) -> Result<(), SinkError> {
        self.store.save_answer(&self.user, &self.run, record)?;
        Ok(())
    }
}

impl CheckpointSink for RunSinks {
    fn persist(&self, manifest: &RunManifest) -> Result<(), SinkError> {
        Ok(self.store.save_manifest(&self.user, &self.run, manifest)?)
    }
}

/// Fresh run metadata in the draft state.
pub fn new_run_meta(run_id: &str, user_id: &str, config: SimulationConfig, survey: SurveySpec, created_at: u64) -> RunMeta {
    RunMeta {
        run_id: run_id.to_owned(),
        user_id: user_id.to_owned(),
        state: RunState::Draft,
        config_hash: crate::survey::config_hash(&config),
        directive_version: FORMAT_DIRECTIVE_VERSION.to_owned(),
        config,
        survey,
        survey_upload: None,
        population_upload: None,
        error: None,
        created_at,
    }
}

#[cfg(test)]
mod tests;
