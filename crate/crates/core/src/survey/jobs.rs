use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::SurveySpec;
use crate::profile::AgentProfile;
use crate::prompt::PromptPayload;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobId {
    pub agent_id: String,
    pub question_id: String,
}

impl JobId {
    pub fn new(agent_id: impl Into<String>, question_id: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            question_id: question_id.into(),
        }
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.agent_id, self.question_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobStatus {
    Pending,
    InFlight,
    Completed,
    Exhausted,
}

impl JobStatus {
    pub fn can_transition_to(self, next: JobStatus) -> bool {
        use JobStatus::*;
        matches!(
            (self, next),
            (Pending, InFlight) | (InFlight, Pending) | (InFlight, Completed) | (InFlight, Exhausted)
        )
    }
}

/// One (agent, question) unit of work.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestJob {
    pub job_id: JobId,
    pub agent_index: usize,
    pub question_index: usize,
    /// Built at dispatch time, not when the job is streamed.
    pub prompt: Option<PromptPayload>,
    pub attempt: u32,
    pub status: JobStatus,
}

impl RequestJob {
    /// Moves to `next`, refusing transitions outside
    /// pending -> in-flight -> {pending, completed, exhausted}.
    pub fn transition(&mut self, next: JobStatus) -> Result<(), (JobStatus, JobStatus)> {
        if self.status.can_transition_to(next) {
            self.status = next;
            Ok(())
        } else {
            Err((self.status, next))
        }
    }
}

/// Position in the agent-major cross product.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cursor {
    pub agent_index: usize,
    pub question_index: usize,
}

impl Cursor {
    pub fn new(agent_index: usize, question_index: usize) -> Self {
        Self {
            agent_index,
            question_index,
        }
    }
}

/// Lazy, agent-major source of jobs over population x survey.
///
/// Jobs are created one at a time as the stream is pulled; nothing is
/// precomputed. A skip set drops already finished jobs on resume.
#[derive(Debug, Clone)]
pub struct JobStream {
    population: Arc<Vec<AgentProfile>>,
    survey: Arc<SurveySpec>,
    next: usize,
    skip: Arc<HashSet<JobId>>,
}

pub fn expand_jobs(population: Arc<Vec<AgentProfile>>, survey: Arc<SurveySpec>) -> JobStream {
    JobStream {
        population,
        survey,
        next: 0,
        skip: Arc::default(),
    }
}

impl JobStream {
    pub fn starting_at(mut self, cursor: Cursor) -> Self {
        let q = self.survey.len();
        self.next = (cursor.agent_index * q + cursor.question_index).min(self.total());
        self
    }

    pub fn skipping(mut self, done: HashSet<JobId>) -> Self {
        self.skip = Arc::new(done);
        self
    }

    pub fn population(&self) -> &Arc<Vec<AgentProfile>> {
        &self.population
    }

    pub fn survey(&self) -> &Arc<SurveySpec> {
        &self.survey
    }

    /// Size of the full cross product.
    pub fn total(&self) -> usize {
        self.population.len() * self.survey.len()
    }

    /// Position of the next job to be yielded (or the end).
    pub fn cursor(&self) -> Cursor {
        let q = self.survey.len().max(1);
        Cursor::new(self.next / q, self.next % q)
    }

    fn job_at(&self, flat: usize) -> RequestJob {
        let q = self.survey.len();
        let (a, qi) = (flat / q, flat % q);
        RequestJob {
            job_id: JobId::new(
                self.population[a].agent_id.clone(),
                self.survey.questions[qi].question_id.clone(),
            ),
            agent_index: a,
            question_index: qi,
            prompt: None,
            attempt: 0,
            status: JobStatus::Pending,
        }
    }

    /// Every job id of the cross product, in stream order.
    pub fn all_ids(&self) -> impl Iterator<Item = JobId> + '_ {
        (0..self.total()).map(|i| self.job_at(i).job_id)
    }
}

impl Iterator for JobStream {
    type Item = RequestJob;

    fn next(&mut self) -> Option<RequestJob> {
        while self.next < self.total() {
            let job = self.job_at(self.next);
            self.next += 1;
            if !self.skip.contains(&job.job_id) {
                return Some(job);
            }
        }
        None
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (0, Some(self.total() - self.next))
    }
}
