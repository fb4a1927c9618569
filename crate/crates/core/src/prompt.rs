//! Prompt payloads and response parsing.
//!
//! A payload carries the persona as system text and the question plus a fixed
//! format directive as user text. Responses are expected as a fenced
//! key-value block with `answer` and `reasoning` fields; prose around the
//! block is ignored and the answer is checked against the question's schema.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::profile::{render_profile_prompt, AgentProfile, ProfileError};
use crate::survey::{AnswerSchema, SimulationConfig, SurveyQuestion};

/// Version tag of the directive wording below. Stored with every run.
pub const FORMAT_DIRECTIVE_VERSION: &str = "kv-answer/1";

const ROLE_FRAMING: &str = "You are taking part in a survey. Answer every question as the person \
described below would, staying consistent with that description.";

const DIRECTIVE_HEAD: &str = "Reply with a fenced block in exactly this form:\n\
```answer\n\
answer: (your answer)\n\
reasoning: (a brief explanation)\n\
```";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl ModelParams {
    pub fn from_config(config: &SimulationConfig) -> Self {
        Self {
            model_name: config.model_name.clone(),
            temperature: config.temperature,
            top_p: config.top_p,
            max_output_tokens: config.max_output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub system_text: String,
    pub user_text: String,
    /// The directive appended to `user_text`, kept for repair prompts.
    pub format_directive: String,
    pub model_params: ModelParams,
    pub estimated_tokens: u64,
}

/// Pre-dispatch token estimate: one token per four characters, rounded up.
pub fn estimate_tokens(texts: &[&str]) -> u64 {
    let chars: usize = texts.iter().map(|t| t.chars().count()).sum();
    chars.div_ceil(4) as u64
}

fn option_list(options: &[String]) -> String {
    options.join(" | ")
}

/// The schema-specific sentence of the format directive.
pub fn answer_rule(schema: &AnswerSchema) -> String {
    match schema {
        AnswerSchema::SingleChoice { options } => format!(
            "The answer must be exactly one of the following options: {}.",
            option_list(options)
        ),
        AnswerSchema::MultiChoice { options } => format!(
            "The answer must be one or more of the following options, separated by commas: {}.",
            option_list(options)
        ),
        AnswerSchema::Likert { low, high } => {
            format!("The answer must be an integer from {low} to {high}.")
        }
        AnswerSchema::NumericRange { low, high } => {
            format!("The answer must be a number from {low} to {high}.")
        }
        AnswerSchema::FreeText => "The answer must be a single line of text.".to_owned(),
    }
}

pub fn format_directive(schema: &AnswerSchema) -> String {
    format!("{DIRECTIVE_HEAD}\n{}", answer_rule(schema))
}

/// Recovers the answer schema from a directive written by [`format_directive`].
pub fn schema_from_directive(text: &str) -> Option<AnswerSchema> {
    let line = text.lines().rev().find(|l| l.starts_with("The answer must be"))?;
    let rest = line.strip_prefix("The answer must be ")?.strip_suffix('.')?;
    let labels = |s: &str| s.split(" | ").map(str::to_owned).collect::<Vec<_>>();
    let range = |s: &str| {
        let (lo, hi) = s.split_once(" to ")?;
        Some((lo.to_owned(), hi.to_owned()))
    };
    if let Some(opts) = rest.strip_prefix("exactly one of the following options: ") {
        Some(AnswerSchema::SingleChoice { options: labels(opts) })
    } else if let Some(opts) = rest.strip_prefix("one or more of the following options, separated by commas: ") {
        Some(AnswerSchema::MultiChoice { options: labels(opts) })
    } else if let Some(r) = rest.strip_prefix("an integer from ") {
        let (lo, hi) = range(r)?;
        Some(AnswerSchema::Likert {
            low: lo.parse().ok()?,
            high: hi.parse().ok()?,
        })
    } else if let Some(r) = rest.strip_prefix("a number from ") {
        let (lo, hi) = range(r)?;
        Some(AnswerSchema::NumericRange {
            low: lo.parse().ok()?,
            high: hi.parse().ok()?,
        })
    } else if rest == "a single line of text" {
        Some(AnswerSchema::FreeText)
    } else {
        None
    }
}

/// Builds the payload for one (agent, question) pair. Deterministic in its
/// inputs; nothing outside the profile, question, configuration and the fixed
/// framing and directive text enters the prompt.
pub fn build_prompt(
    profile: &AgentProfile,
    question: &SurveyQuestion,
    config: &SimulationConfig,
) -> Result<PromptPayload, ProfileError> {
    let schema = &config.profile_schema;
    let persona = render_profile_prompt(profile, schema, &schema.effective_template())?;
    let system_text = format!("{ROLE_FRAMING}\n\n{persona}");
    let directive = format_directive(&question.answer_schema);
    let mut user_text = question.text.clone();
    if !question.answer_instruction.trim().is_empty() {
        user_text.push_str("\n\n");
        user_text.push_str(&question.answer_instruction);
    }
    user_text.push_str("\n\n");
    user_text.push_str(&directive);
    let estimated_tokens = estimate_tokens(&[&system_text, &user_text]);
    Ok(PromptPayload {
        system_text,
        user_text,
        format_directive: directive,
        model_params: ModelParams::from_config(config),
        estimated_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum AnswerValue {
    Choice(String),
    Choices(Vec<String>),
    Integer(i64),
    Number(f64),
    Text(String),
}

impl AnswerValue {
    pub fn satisfies(&self, schema: &AnswerSchema) -> bool {
        match (self, schema) {
            (AnswerValue::Choice(c), AnswerSchema::SingleChoice { options }) => options.contains(c),
            (AnswerValue::Choices(cs), AnswerSchema::MultiChoice { options }) => {
                !cs.is_empty()
                    && cs.iter().all(|c| options.contains(c))
                    && cs.iter().enumerate().all(|(i, c)| !cs[..i].contains(c))
            }
            (AnswerValue::Integer(v), AnswerSchema::Likert { low, high }) => low <= v && v <= high,
            (AnswerValue::Number(v), AnswerSchema::NumericRange { low, high }) => {
                v.is_finite() && *low <= *v && *v <= *high
            }
            (AnswerValue::Text(t), AnswerSchema::FreeText) => {
                !t.trim().is_empty() && !t.contains('\n')
            }
            _ => false,
        }
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerValue::Choice(c) | AnswerValue::Text(c) => f.write_str(c),
            AnswerValue::Choices(cs) => f.write_str(&cs.join(", ")),
            AnswerValue::Integer(v) => write!(f, "{v}"),
            AnswerValue::Number(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub value: AnswerValue,
    pub reasoning: Option<String>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatErrorKind {
    MissingField,
    UnparsableValue,
    OutOfDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{}: {detail}", match kind { FormatErrorKind::MissingField => "missing field", FormatErrorKind::UnparsableValue => "unparsable value", FormatErrorKind::OutOfDomain => "out of domain" })]
pub struct FormatError {
    pub kind: FormatErrorKind,
    pub detail: String,
    pub raw: String,
}

fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip the info string (e.g. ```answer) up to the end of the line.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                blocks.push(body);
                break;
            }
        }
    }
    blocks
}

fn split_field(line: &str) -> Option<(String, &str)> {
    let line = line.trim().trim_start_matches(['-', '*', '>']).trim_start();
    let idx = line.find([':', '='])?;
    let key = line[..idx].trim().trim_matches(['*', '_', '"', '`']).to_ascii_lowercase();
    if key.is_empty() || key.contains(' ') {
        return None;
    }
    Some((key, line[idx + 1..].trim()))
}

fn fields(block: &str) -> (Option<String>, Option<String>) {
    let mut answer = None;
    let mut reasoning: Option<String> = None;
    let mut in_reasoning = false;
    for line in block.lines() {
        match split_field(line) {
            Some((key, value)) if key == "answer" && answer.is_none() => {
                answer = Some(value.to_owned());
                in_reasoning = false;
            }
            Some((key, value)) if key == "reasoning" && reasoning.is_none() => {
                reasoning = Some(value.to_owned());
                in_reasoning = true;
            }
            Some(_) => in_reasoning = false,
            None if in_reasoning && !line.trim().is_empty() => {
                let r = reasoning.get_or_insert_with(String::new);
                if !r.is_empty() {
                    r.push(' ');
                }
                r.push_str(line.trim());
            }
            None => {}
        }
    }
    (answer, reasoning)
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\'', '`'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

/// Extracts and validates the answer in a model reply.
pub fn parse_response(raw: &str, schema: &AnswerSchema) -> Result<ParsedAnswer, FormatError> {
    let err = |kind, detail: String| FormatError {
        kind,
        detail,
        raw: raw.to_owned(),
    };
    let block = fenced_blocks(raw)
        .into_iter()
        .find(|b| fields(b).0.is_some())
        .unwrap_or(raw);
    let (answer, reasoning) = fields(block);
    let Some(answer) = answer else {
        return Err(err(FormatErrorKind::MissingField, "no \"answer\" field".into()));
    };
    let text = unquote(&answer);
    if text.is_empty() {
        return Err(err(FormatErrorKind::UnparsableValue, "empty answer".into()));
    }
    let value = match schema {
        AnswerSchema::SingleChoice { options } => {
            if !options.iter().any(|o| o == text) {
                return Err(err(FormatErrorKind::OutOfDomain, format!("{text:?} is not an option")));
            }
            AnswerValue::Choice(text.to_owned())
        }
        AnswerSchema::MultiChoice { options } => {
            let picks: Vec<String> = text.split(',').map(|s| unquote(s).to_owned()).collect();
            if let Some(bad) = picks.iter().find(|p| !options.contains(p)) {
                return Err(err(FormatErrorKind::OutOfDomain, format!("{bad:?} is not an option")));
            }
            if picks.iter().enumerate().any(|(i, p)| picks[..i].contains(p)) {
                return Err(err(FormatErrorKind::UnparsableValue, "repeated option".into()));
            }
            AnswerValue::Choices(picks)
        }
        AnswerSchema::Likert { low, high } => {
            let v: i64 = text
                .parse()
                .map_err(|_| err(FormatErrorKind::UnparsableValue, format!("{text:?} is not an integer")))?;
            if v < *low || v > *high {
                return Err(err(FormatErrorKind::OutOfDomain, format!("{v} outside {low}..{high}")));
            }
            AnswerValue::Integer(v)
        }
        AnswerSchema::NumericRange { low, high } => {
            let v: f64 = text
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| err(FormatErrorKind::UnparsableValue, format!("{text:?} is not a number")))?;
            if v < *low || v > *high {
                return Err(err(FormatErrorKind::OutOfDomain, format!("{v} outside {low}..{high}")));
            }
            AnswerValue::Number(v)
        }
        AnswerSchema::FreeText => AnswerValue::Text(text.to_owned()),
    };
    Ok(ParsedAnswer {
        value,
        reasoning: reasoning.filter(|r| !r.is_empty()),
        raw: raw.to_owned(),
    })
}

/// Follow-up prompt after a reply failed format checks: the original prompt,
/// the rejected reply verbatim, what was wrong, and the directive again.
/// Repairs run at temperature 0.
pub fn build_repair_prompt(
    original: &PromptPayload,
    raw: &str,
    error: &FormatError,
    attempt: u32,
) -> PromptPayload {
    let problem = FormatError {
        raw: String::new(),
        ..error.clone()
    };
    let user_text = format!(
        "{}\n\nYour previous reply could not be accepted ({problem}). Correction {attempt}. \
Your previous reply was:\n{raw}\n\nAnswer the same question again.\n{}",
        original.user_text, original.format_directive
    );
    let mut model_params = original.model_params.clone();
    model_params.temperature = 0.0;
    PromptPayload {
        estimated_tokens: estimate_tokens(&[&original.system_text, &user_text]),
        system_text: original.system_text.clone(),
        user_text,
        format_directive: original.format_directive.clone(),
        model_params,
    }
}
