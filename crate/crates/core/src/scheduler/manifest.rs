//! Run manifests, their checksummed on-disk encoding, and resume planning.

use std::collections::{BTreeSet, HashSet};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SinkError;
use crate::prompt::FORMAT_DIRECTIVE_VERSION;
use crate::survey::{config_hash, Cursor, JobId, JobStream, SimulationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncompletedState {
    /// Retries or repairs ran out, or the provider failed fatally.
    Exhausted,
    /// Never sent.
    NotAttempted,
    /// Attempted, still retryable, but the run stopped first.
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncompletedJob {
    pub job_id: JobId,
    pub state: UncompletedState,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "end", rename_all = "kebab-case")]
pub enum RunEnd {
    Finished,
    Cancelled,
    Aborted { reason: String },
}

/// Durable progress record of one run.
///
/// At every checkpoint, `completed`, `uncompleted` and the not yet streamed
/// suffix starting at `cursor` partition the job cross product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub directive_version: String,
    pub total_jobs: usize,
    pub completed: BTreeSet<JobId>,
    pub uncompleted: Vec<UncompletedJob>,
    pub cursor: Cursor,
    /// Checkpoint counter within the run.
    pub sequence: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<RunEnd>,
}

impl RunManifest {
    pub fn new(run_id: &str, config: &SimulationConfig, total_jobs: usize) -> Self {
        Self {
            run_id: run_id.to_owned(),
            config_hash: config_hash(config),
            directive_version: FORMAT_DIRECTIVE_VERSION.to_owned(),
            total_jobs,
            completed: BTreeSet::new(),
            uncompleted: Vec::new(),
            cursor: Cursor::default(),
            sequence: 0,
            end: None,
        }
    }

    pub fn exhausted(&self) -> impl Iterator<Item = &UncompletedJob> {
        self.uncompleted
            .iter()
            .filter(|u| u.state == UncompletedState::Exhausted)
    }

    pub fn is_partial(&self) -> bool {
        self.completed.len() < self.total_jobs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ResumeError {
    #[error("configuration changed since the run started (manifest {expected}, now {actual})")]
    ConfigMismatch { expected: String, actual: String },
    #[error("manifest lists {manifest} jobs but population x survey has {actual}")]
    ShapeMismatch { manifest: usize, actual: usize },
}

/// Plans the continuation of an interrupted run: the stream minus every job
/// the manifest or the answer store already records, and the manifest the
/// continuation starts from.
pub fn plan_resume(
    manifest: &RunManifest,
    config: &SimulationConfig,
    jobs: JobStream,
    answered: &HashSet<JobId>,
) -> Result<(JobStream, RunManifest), ResumeError> {
    let actual = config_hash(config);
    if actual != manifest.config_hash {
        return Err(ResumeError::ConfigMismatch {
            expected: manifest.config_hash.clone(),
            actual,
        });
    }
    if jobs.total() != manifest.total_jobs {
        return Err(ResumeError::ShapeMismatch {
            manifest: manifest.total_jobs,
            actual: jobs.total(),
        });
    }
    let all: HashSet<JobId> = jobs.all_ids().collect();
    let done: BTreeSet<JobId> = manifest
        .completed
        .iter()
        .chain(answered.iter())
        .filter(|id| all.contains(id))
        .cloned()
        .collect();
    let start = RunManifest {
        completed: done.clone(),
        uncompleted: Vec::new(),
        cursor: Cursor::default(),
        sequence: manifest.sequence,
        end: None,
        ..manifest.clone()
    };
    Ok((jobs.skipping(done.into_iter().collect()), start))
}

pub trait CheckpointSink: Send + Sync {
    fn persist(&self, manifest: &RunManifest) -> Result<(), SinkError>;
}

/// Keeps every checkpoint in memory.
#[derive(Default)]
pub struct MemoryCheckpoints {
    saved: Mutex<Vec<RunManifest>>,
}

impl MemoryCheckpoints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn latest(&self) -> Option<RunManifest> {
        self.saved.lock().last().cloned()
    }

    pub fn count(&self) -> usize {
        self.saved.lock().len()
    }
}

impl CheckpointSink for MemoryCheckpoints {
    fn persist(&self, manifest: &RunManifest) -> Result<(), SinkError> {
        self.saved.lock().push(manifest.clone());
        Ok(())
    }
}

/// One checkpoint as a line: hex sha256 of the JSON, a space, the JSON.
pub fn encode_checkpoint(manifest: &RunManifest) -> String {
    let json = serde_json::to_string(manifest).expect("manifest serializes");
    let sum = hex::encode(Sha256::digest(json.as_bytes()));
    format!("{sum} {json}\n")
}

fn decode_line(line: &str) -> Option<RunManifest> {
    let (sum, json) = line.split_once(' ')?;
    if hex::encode(Sha256::digest(json.as_bytes())) != sum {
        return None;
    }
    serde_json::from_str(json).ok()
}

/// The newest intact checkpoint in a log; torn or corrupted lines are
/// skipped.
pub fn latest_checkpoint(log: &str) -> Option<RunManifest> {
    log.lines().rev().find_map(decode_line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{generate_population, AttributeSpec, ProfileSchema};
    use crate::survey::{expand_jobs, AnswerSchema, SurveyQuestion, SurveySpec};
    use std::sync::Arc;

    fn setup() -> (SimulationConfig, JobStream) {
        let schema = ProfileSchema::new(vec![AttributeSpec::integer("age", 18, 90)]);
        let config = SimulationConfig::example(schema.clone());
        let pop = generate_population(&schema, 3, 0).unwrap();
        let survey = SurveySpec {
            questions: (0..2)
                .map(|i| SurveyQuestion {
                    question_id: format!("q{i}"),
                    text: "?".into(),
                    answer_instruction: String::new(),
                    answer_schema: AnswerSchema::FreeText,
                })
                .collect(),
        };
        (config, expand_jobs(Arc::new(pop), Arc::new(survey)))
    }

    #[test]
    fn checksum_round_trip_and_torn_tail() {
        let (config, _) = setup();
        let mut m = RunManifest::new("r", &config, 6);
        m.completed.insert(JobId::new("a0", "q0"));
        let first = encode_checkpoint(&m);
        m.sequence = 1;
        m.completed.insert(JobId::new("a0", "q1"));
        let second = encode_checkpoint(&m);
        let log = format!("{first}{}", &second[..second.len() / 2]);
        assert_eq!(latest_checkpoint(&log).unwrap().sequence, 0);
        let full = format!("{first}{second}");
        assert_eq!(latest_checkpoint(&full).unwrap(), m);
        let flipped = full.replacen("a0", "b0", 2);
        assert_eq!(latest_checkpoint(&flipped), None);
    }

    #[test]
    fn resume_skips_recorded_jobs() {
        let (config, jobs) = setup();
        let mut m = RunManifest::new("r", &config, 6);
        m.completed.insert(JobId::new("a0", "q0"));
        let answered = HashSet::from([JobId::new("a1", "q1"), JobId::new("zz", "q0")]);
        let (rest, start) = plan_resume(&m, &config, jobs, &answered).unwrap();
        let ids: Vec<_> = rest.map(|j| j.job_id).collect();
        assert_eq!(ids.len(), 4);
        assert!(!ids.contains(&JobId::new("a1", "q1")));
        assert_eq!(start.completed.len(), 2);
    }

    #[test]
    fn resume_refuses_changed_config() {
        let (mut config, jobs) = setup();
        let m = RunManifest::new("r", &config, 6);
        config.temperature = 0.5;
        assert!(matches!(
            plan_resume(&m, &config, jobs, &HashSet::new()),
            Err(ResumeError::ConfigMismatch { .. })
        ));
    }
}
