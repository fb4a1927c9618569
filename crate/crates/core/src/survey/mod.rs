//! Questionnaires, run configuration and the job stream.

mod config;
mod jobs;
mod parse;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::validation::ValidationReport;

pub use config::{
    config_hash, validate_config, validate_config_for, Pricing, RetryPolicy, SimulationConfig,
    DEFAULT_BUFFER_SIZE, DEFAULT_REPAIR_ATTEMPTS,
};
pub use jobs::{expand_jobs, Cursor, JobId, JobStatus, JobStream, RequestJob};
pub use parse::{parse_survey_document, survey_to_csv, survey_to_json, SurveyFormat, SurveyParseError, PositionedError};

/// The answer contract a response must satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnswerSchema {
    SingleChoice { options: Vec<String> },
    MultiChoice { options: Vec<String> },
    Likert { low: i64, high: i64 },
    NumericRange { low: f64, high: f64 },
    FreeText,
}

impl AnswerSchema {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnswerSchema::SingleChoice { .. } => "single-choice",
            AnswerSchema::MultiChoice { .. } => "multi-choice",
            AnswerSchema::Likert { .. } => "likert",
            AnswerSchema::NumericRange { .. } => "numeric-range",
            AnswerSchema::FreeText => "free-text",
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        match self {
            AnswerSchema::SingleChoice { options } | AnswerSchema::MultiChoice { options } => {
                if options.len() < 2 {
                    report.push("options", "choice questions need at least 2 options");
                }
                let mut seen = HashSet::new();
                for o in options {
                    let trimmed = o.trim();
                    if trimmed.is_empty() {
                        report.push("options", "empty option label");
                    } else if trimmed != o {
                        report.push("options", format!("option {o:?} has surrounding whitespace"));
                    }
                    if o.contains('|') || o.contains(',') || o.contains('\n') {
                        report.push("options", format!("option {o:?} contains a reserved character"));
                    }
                    if !seen.insert(o.as_str()) {
                        report.push("options", format!("duplicate option {o:?}"));
                    }
                }
            }
            AnswerSchema::Likert { low, high } => {
                if low >= high {
                    report.push("scale", format!("likert bounds need low < high, got {low}..{high}"));
                }
            }
            AnswerSchema::NumericRange { low, high } => {
                if !low.is_finite() || !high.is_finite() || low > high {
                    report.push("bounds", format!("invalid numeric bounds {low}..{high}"));
                }
            }
            AnswerSchema::FreeText => {}
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyQuestion {
    pub question_id: String,
    pub text: String,
    #[serde(default)]
    pub answer_instruction: String,
    pub answer_schema: AnswerSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveySpec {
    pub questions: Vec<SurveyQuestion>,
}

impl SurveySpec {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn question(&self, id: &str) -> Option<&SurveyQuestion> {
        self.questions.iter().find(|q| q.question_id == id)
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        if self.questions.is_empty() {
            report.push("survey", "no questions found");
        }
        let mut seen = HashSet::new();
        for q in &self.questions {
            if q.question_id.trim().is_empty() {
                report.push("question_id", "empty question id");
            }
            if !seen.insert(q.question_id.as_str()) {
                report.push(&q.question_id, "duplicate question_id");
            }
            if q.text.trim().is_empty() {
                report.push(&q.question_id, "question text is empty");
            }
            for issue in q.answer_schema.validate().issues {
                report.push(&q.question_id, format!("{}: {}", issue.subject, issue.message));
            }
        }
        report
    }
}
