use std::str::FromStr;

use serde::Serialize;

use crate::prompt::AnswerValue;
use crate::providers::Usage;
use crate::scheduler::{AnswerRecord, AnswerStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Jsonl,
    Manifest,
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Csv => "text/csv; charset=utf-8",
            ExportFormat::Jsonl => "application/x-ndjson",
            ExportFormat::Manifest => "application/json",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ExportFormat::Csv => "results.csv",
            ExportFormat::Jsonl => "results.jsonl",
            ExportFormat::Manifest => "manifest.json",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            "manifest" => Ok(ExportFormat::Manifest),
            other => Err(format!("unknown export format {other:?} (csv, jsonl, manifest)")),
        }
    }
}

/// Run-level facts stamped onto every exported row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportMeta {
    pub config_hash: String,
    pub directive_version: String,
}

pub const CSV_HEADER: [&str; 11] = [
    "agent_id",
    "question_id",
    "status",
    "answer",
    "reasoning",
    "attempts",
    "format_repairs",
    "input_tokens",
    "output_tokens",
    "config_hash",
    "directive_version",
];

fn status_name(s: AnswerStatus) -> &'static str {
    match s {
        AnswerStatus::Ok => "ok",
        AnswerStatus::Exhausted => "exhausted",
    }
}

/// Records must already be in stream order.
pub fn export_csv(records: &[AnswerRecord], meta: &ExportMeta) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in records {
        w.write_record([
            r.agent_id.as_str(),
            &r.question_id,
            status_name(r.status),
            &r.value.as_ref().map(ToString::to_string).unwrap_or_default(),
            r.reasoning.as_deref().unwrap_or(""),
            &r.attempts.to_string(),
            &r.format_repairs.to_string(),
            &r.usage.input_tokens.to_string(),
            &r.usage.output_tokens.to_string(),
            &meta.config_hash,
            &meta.directive_version,
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[derive(Serialize)]
struct JsonRow<'a> {
    agent_id: &'a str,
    question_id: &'a str,
    status: &'static str,
    answer: Option<&'a AnswerValue>,
    reasoning: Option<&'a str>,
    raw_response: &'a str,
    attempts: u32,
    format_repairs: u32,
    usage: Usage,
    config_hash: &'a str,
    directive_version: &'a str,
}

pub fn export_jsonl(records: &[AnswerRecord], meta: &ExportMeta) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let row = JsonRow {
            agent_id: &r.agent_id,
            question_id: &r.question_id,
            status: status_name(r.status),
            answer: r.value.as_ref(),
            reasoning: r.reasoning.as_deref(),
            raw_response: &r.raw_response,
            attempts: r.attempts,
            format_repairs: r.format_repairs,
            usage: r.usage,
            config_hash: &meta.config_hash,
            directive_version: &meta.directive_version,
        };
        serde_json::to_writer(&mut out, &row).expect("in-memory write");
        out.push(b'\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(a: &str, value: AnswerValue) -> AnswerRecord {
        AnswerRecord {
            run_id: "r".into(),
            agent_id: a.into(),
            question_id: "q0".into(),
            agent_index: 0,
            question_index: 0,
            status: AnswerStatus::Ok,
            value: Some(value),
            reasoning: Some("because, \"quoted\"".into()),
            raw_response: "```answer\nanswer: x\n```".into(),
            attempts: 1,
            format_repairs: 0,
            usage: Usage {
                input_tokens: 10,
                output_tokens: 4,
            },
            dispatched_at: 1.5,
            completed_at: 2.5,
        }
    }

    fn meta() -> ExportMeta {
        ExportMeta {
            config_hash: "abc".into(),
            directive_version: "v1".into(),
        }
    }

    #[test]
    fn csv_round_trips_through_a_reader() {
        let recs = vec![
            record("a0", AnswerValue::Choices(vec!["x".into(), "y".into()])),
            record("a1", AnswerValue::Integer(3)),
        ];
        let bytes = export_csv(&recs, &meta());
        let mut rd = csv::Reader::from_reader(bytes.as_slice());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(&rows[0][3], "x, y");
        assert_eq!(&rows[0][4], "because, \"quoted\"");
        assert_eq!(&rows[1][3], "3");
        assert_eq!(&rows[1][9], "abc");
    }

    #[test]
    fn jsonl_has_no_run_specific_fields() {
        let bytes = export_jsonl(&[record("a0", AnswerValue::Number(0.5))], &meta());
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 1);
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["answer"]["value"], 0.5);
        assert!(v.get("run_id").is_none() && v.get("completed_at").is_none());
    }

    #[test]
    fn format_names() {
        assert_eq!("csv".parse::<ExportFormat>(), Ok(ExportFormat::Csv));
        assert!("xml".parse::<ExportFormat>().is_err());
    }
}
