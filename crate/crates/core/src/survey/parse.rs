//! Survey uploads: a comma-separated table with a header row, or a structured
//! document (`{"questions": [...]}`) in JSON or TOML.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AnswerSchema, SurveyQuestion, SurveySpec};
use crate::format::DocFormat;

pub const TABLE_HEADER: [&str; 5] = ["question_id", "text", "answer_kind", "options", "answer_instruction"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurveyFormat {
    DelimitedTable,
    StructuredText,
}

impl std::str::FromStr for SurveyFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "delimited-table" | "csv" => Ok(SurveyFormat::DelimitedTable),
            "structured-text" | "json" | "toml" => Ok(SurveyFormat::StructuredText),
            other => Err(format!("unknown survey format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionedError {
    /// 1-based line of the table, or 1-based entry of a structured document.
    /// Zero means the document as a whole.
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub struct SurveyParseError {
    pub errors: Vec<PositionedError>,
}

impl fmt::Display for SurveyParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            if e.position == 0 {
                write!(f, "{}", e.message)?;
            } else {
                write!(f, "line {}: {}", e.position, e.message)?;
            }
        }
        Ok(())
    }
}

impl SurveyParseError {
    fn whole(message: impl Into<String>) -> Self {
        Self {
            errors: vec![PositionedError {
                position: 0,
                message: message.into(),
            }],
        }
    }
}

fn split_cell(cell: &str) -> Vec<String> {
    cell.split('|').map(|s| s.trim().to_owned()).collect()
}

fn schema_from_cells(kind: &str, options: &str) -> Result<AnswerSchema, String> {
    let bounds = |what: &str| -> Result<(String, String), String> {
        let parts = split_cell(options);
        match parts.as_slice() {
            [lo, hi] => Ok((lo.clone(), hi.clone())),
            _ => Err(format!("{what} needs \"low|high\", got {options:?}")),
        }
    };
    match kind.trim() {
        "single-choice" => Ok(AnswerSchema::SingleChoice {
            options: split_cell(options),
        }),
        "multi-choice" => Ok(AnswerSchema::MultiChoice {
            options: split_cell(options),
        }),
        "likert" => {
            let (lo, hi) = bounds("likert scale")?;
            Ok(AnswerSchema::Likert {
                low: lo.parse().map_err(|_| format!("likert low {lo:?} is not an integer"))?,
                high: hi.parse().map_err(|_| format!("likert high {hi:?} is not an integer"))?,
            })
        }
        "numeric-range" => {
            let (lo, hi) = bounds("numeric range")?;
            Ok(AnswerSchema::NumericRange {
                low: lo.parse().map_err(|_| format!("range low {lo:?} is not a number"))?,
                high: hi.parse().map_err(|_| format!("range high {hi:?} is not a number"))?,
            })
        }
        "free-text" => Ok(AnswerSchema::FreeText),
        other => Err(format!("unknown answer kind {other:?}")),
    }
}

fn options_cell(schema: &AnswerSchema) -> String {
    match schema {
        AnswerSchema::SingleChoice { options } | AnswerSchema::MultiChoice { options } => options.join("|"),
        AnswerSchema::Likert { low, high } => format!("{low}|{high}"),
        AnswerSchema::NumericRange { low, high } => format!("{low}|{high}"),
        AnswerSchema::FreeText => String::new(),
    }
}

fn parse_table(bytes: &[u8]) -> Result<Vec<(usize, SurveyQuestion)>, SurveyParseError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::Headers)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| SurveyParseError::whole(format!("unreadable header: {e}")))?
        .clone();
    let col: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let missing: Vec<_> = TABLE_HEADER[..4].iter().filter(|h| !col.contains_key(*h)).collect();
    if !missing.is_empty() {
        return Err(SurveyParseError::whole(format!(
            "header is missing column(s): {}",
            missing.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
        )));
    }

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for result in reader.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                errors.push(PositionedError {
                    position: line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        let get = |name: &str| col.get(name).and_then(|i| record.get(*i)).unwrap_or("").to_owned();
        match schema_from_cells(&get("answer_kind"), &get("options")) {
            Ok(answer_schema) => rows.push((
                line,
                SurveyQuestion {
                    question_id: get("question_id").trim().to_owned(),
                    text: get("text"),
                    answer_instruction: get("answer_instruction"),
                    answer_schema,
                },
            )),
            Err(message) => errors.push(PositionedError { position: line, message }),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(SurveyParseError { errors })
    }
}

fn parse_structured(bytes: &[u8]) -> Result<Vec<(usize, SurveyQuestion)>, SurveyParseError> {
    let text = std::str::from_utf8(bytes).map_err(|_| SurveyParseError::whole("document is not UTF-8"))?;
    let trimmed = text.trim_start();
    let format = if trimmed.starts_with('{') {
        DocFormat::Json
    } else {
        DocFormat::Toml
    };
    // Parse loosely first so one bad entry does not hide the others.
    #[derive(Deserialize)]
    struct Loose {
        #[serde(default)]
        questions: Vec<serde_json::Value>,
    }
    let loose: Loose = match format {
        DocFormat::Json => serde_json::from_str(text).map_err(|e| SurveyParseError::whole(e.to_string()))?,
        DocFormat::Toml => {
            let v: toml::Value = toml::from_str(text).map_err(|e| SurveyParseError::whole(e.to_string()))?;
            serde_json::to_value(v)
                .and_then(serde_json::from_value)
                .map_err(|e| SurveyParseError::whole(e.to_string()))?
        }
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, entry) in loose.questions.into_iter().enumerate() {
        match serde_json::from_value::<SurveyQuestion>(entry) {
            Ok(q) => rows.push((i + 1, q)),
            Err(e) => errors.push(PositionedError {
                position: i + 1,
                message: e.to_string(),
            }),
        }
    }
    if errors.is_empty() {
        Ok(rows)
    } else {
        Err(SurveyParseError { errors })
    }
}

/// Parses an uploaded questionnaire. Every row either becomes a question or
/// produces an error carrying its position; nothing is dropped silently.
pub fn parse_survey_document(bytes: &[u8], format: SurveyFormat) -> Result<SurveySpec, SurveyParseError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(SurveyParseError::whole("no questions found"));
    }
    let rows = match format {
        SurveyFormat::DelimitedTable => parse_table(bytes)?,
        SurveyFormat::StructuredText => parse_structured(bytes)?,
    };
    if rows.is_empty() {
        return Err(SurveyParseError::whole("no questions found"));
    }

    let mut errors = Vec::new();
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (pos, q) in &rows {
        if let Some(first) = first_seen.get(q.question_id.as_str()) {
            errors.push(PositionedError {
                position: *pos,
                message: format!("duplicate question_id {:?} (first on line {first})", q.question_id),
            });
        } else {
            first_seen.insert(&q.question_id, *pos);
        }
        if q.question_id.is_empty() {
            errors.push(PositionedError {
                position: *pos,
                message: "empty question_id".into(),
            });
        }
        if q.text.trim().is_empty() {
            errors.push(PositionedError {
                position: *pos,
                message: "question text is empty".into(),
            });
        }
        for issue in q.answer_schema.validate().issues {
            errors.push(PositionedError {
                position: *pos,
                message: format!("{}: {}", issue.subject, issue.message),
            });
        }
    }
    if !errors.is_empty() {
        return Err(SurveyParseError { errors });
    }
    Ok(SurveySpec {
        questions: rows.into_iter().map(|(_, q)| q).collect(),
    })
}

pub fn survey_to_csv(spec: &SurveySpec) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER).expect("in-memory write");
    for q in &spec.questions {
        w.write_record([
            q.question_id.as_str(),
            q.text.as_str(),
            q.answer_schema.kind_name(),
            options_cell(&q.answer_schema).as_str(),
            q.answer_instruction.as_str(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

pub fn survey_to_json(spec: &SurveySpec) -> String {
    serde_json::to_string_pretty(spec).expect("survey serializes")
}
