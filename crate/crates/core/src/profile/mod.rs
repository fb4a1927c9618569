//! Synthetic respondent profiles.
//!
//! A [`ProfileSchema`] declares an ordered list of attributes plus constraints
//! that shape which combinations are drawn. [`generate_population`] turns a
//! schema and a seed into a reproducible population of [`AgentProfile`]s and
//! [`render_profile_prompt`] turns a profile into persona text.

mod render;
mod sample;
mod table;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::validation::ValidationReport;

pub use render::{render_profile_prompt, render_value, trait_band, TraitBand};
pub use sample::{
    agent_id, generate_population, mix_seed, sample_conditional, splitmix64, MAX_SAMPLING_ATTEMPTS,
};
pub use table::{load_population, population_from_csv, population_from_json, population_to_csv};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("invalid profile schema:\n{0}")]
    InvalidSchema(ValidationReport),
    #[error("constraints unsatisfiable after {attempts} attempts: {}", constraints.join("; "))]
    Unsatisfiable {
        attempts: u32,
        constraints: Vec<String>,
    },
    #[error("unknown placeholder <{0}>")]
    UnknownPlaceholder(String),
    #[error("population table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryOption {
    pub value: String,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl CategoryOption {
    pub fn new(value: impl Into<String>, weight: f64) -> Self {
        Self {
            value: value.into(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttributeKind {
    Categorical { options: Vec<CategoryOption> },
    IntegerRange { low: i64, high: i64 },
    RealRange { low: f64, high: f64 },
    Big5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: AttributeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl AttributeSpec {
    pub fn categorical<S: Into<String>>(name: &str, options: impl IntoIterator<Item = (S, f64)>) -> Self {
        Self {
            name: name.to_owned(),
            kind: AttributeKind::Categorical {
                options: options
                    .into_iter()
                    .map(|(v, w)| CategoryOption::new(v, w))
                    .collect(),
            },
            units: None,
        }
    }

    pub fn integer(name: &str, low: i64, high: i64) -> Self {
        Self {
            name: name.to_owned(),
            kind: AttributeKind::IntegerRange { low, high },
            units: None,
        }
    }

    pub fn real(name: &str, low: f64, high: f64) -> Self {
        Self {
            name: name.to_owned(),
            kind: AttributeKind::RealRange { low, high },
            units: None,
        }
    }

    pub fn big5(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            kind: AttributeKind::Big5,
            units: None,
        }
    }

    pub fn with_units(mut self, units: &str) -> Self {
        self.units = Some(units.to_owned());
        self
    }

    /// Whether `value` lies in this attribute's declared domain.
    pub fn contains(&self, value: &AttributeValue) -> bool {
        match (&self.kind, value) {
            (AttributeKind::Categorical { options }, AttributeValue::Category(v)) => {
                options.iter().any(|o| &o.value == v)
            }
            (AttributeKind::IntegerRange { low, high }, AttributeValue::Integer(v)) => {
                low <= v && v <= high
            }
            (AttributeKind::RealRange { low, high }, AttributeValue::Real(v)) => {
                *low <= *v && *v <= *high
            }
            (AttributeKind::Big5, AttributeValue::Big5(t)) => {
                t.values().iter().all(|x| (0.0..=1.0).contains(x))
            }
            _ => false,
        }
    }
}

/// The five personality traits, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Big5Traits {
    pub openness: f64,
    pub conscientiousness: f64,
    pub extraversion: f64,
    pub agreeableness: f64,
    pub neuroticism: f64,
}

impl Big5Traits {
    pub const NAMES: [&'static str; 5] = [
        "openness",
        "conscientiousness",
        "extraversion",
        "agreeableness",
        "neuroticism",
    ];

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            openness: v[0],
            conscientiousness: v[1],
            extraversion: v[2],
            agreeableness: v[3],
            neuroticism: v[4],
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [
            self.openness,
            self.conscientiousness,
            self.extraversion,
            self.agreeableness,
            self.neuroticism,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttributeValue {
    Integer(i64),
    Real(f64),
    Category(String),
    Big5(Big5Traits),
}

impl AttributeValue {
    fn as_number(&self) -> Option<f64> {
        match self {
            AttributeValue::Integer(v) => Some(*v as f64),
            AttributeValue::Real(v) => Some(*v),
            _ => None,
        }
    }
}

/// One clause of a constraint predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TermTest {
    Equals { equals: String },
    Within { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub attribute: String,
    #[serde(flatten)]
    pub test: TermTest,
}

impl Term {
    pub fn equals(attribute: &str, value: &str) -> Self {
        Self {
            attribute: attribute.to_owned(),
            test: TermTest::Equals {
                equals: value.to_owned(),
            },
        }
    }

    pub fn within(attribute: &str, low: f64, high: f64) -> Self {
        Self {
            attribute: attribute.to_owned(),
            test: TermTest::Within { low, high },
        }
    }

    pub fn matches(&self, value: &AttributeValue) -> bool {
        match &self.test {
            TermTest::Equals { equals } => {
                matches!(value, AttributeValue::Category(v) if v == equals)
            }
            TermTest::Within { low, high } => value
                .as_number()
                .is_some_and(|v| *low <= v && v <= *high),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.test {
            TermTest::Equals { equals } => write!(f, "{}={}", self.attribute, equals),
            TermTest::Within { low, high } => write!(f, "{} in [{}, {}]", self.attribute, low, high),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintKind {
    /// No sampled profile may satisfy the predicate.
    Forbid,
    /// Scales the weight of the predicate's final categorical term when every
    /// earlier term is already satisfied.
    WeightMultiplier { factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(flatten)]
    pub kind: ConstraintKind,
    pub when: Vec<Term>,
}

impl Constraint {
    pub fn forbid(when: Vec<Term>) -> Self {
        Self {
            kind: ConstraintKind::Forbid,
            when,
        }
    }

    pub fn multiplier(factor: f64, when: Vec<Term>) -> Self {
        Self {
            kind: ConstraintKind::WeightMultiplier { factor },
            when,
        }
    }

    pub fn matches(&self, attributes: &BTreeMap<String, AttributeValue>) -> bool {
        self.when
            .iter()
            .all(|t| attributes.get(&t.attribute).is_some_and(|v| t.matches(v)))
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<String> = self.when.iter().map(|t| t.to_string()).collect();
        match self.kind {
            ConstraintKind::Forbid => write!(f, "forbid({})", terms.join(" & ")),
            ConstraintKind::WeightMultiplier { factor } => {
                write!(f, "multiply({}; x{})", terms.join(" & "), factor)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NarrativeMode {
    #[default]
    Mechanistic,
    Storytelling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSchema {
    pub attributes: Vec<AttributeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub narrative_mode: NarrativeMode,
    /// Persona template with `<NAME>` placeholders. When absent a template
    /// listing every attribute is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl ProfileSchema {
    pub fn new(attributes: Vec<AttributeSpec>) -> Self {
        Self {
            attributes,
            constraints: Vec::new(),
            narrative_mode: NarrativeMode::Mechanistic,
            template: None,
        }
    }

    pub fn with_constraints(mut self, constraints: Vec<Constraint>) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn with_template(mut self, template: &str) -> Self {
        self.template = Some(template.to_owned());
        self
    }

    pub fn with_mode(mut self, mode: NarrativeMode) -> Self {
        self.narrative_mode = mode;
        self
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// The template in effect: the declared one, or one line per attribute.
    pub fn effective_template(&self) -> String {
        if let Some(t) = &self.template {
            return t.clone();
        }
        let mut out = String::from("You have the following characteristics:");
        for attr in &self.attributes {
            out.push_str("\n- ");
            out.push_str(&attr.name.replace('_', " "));
            out.push_str(": <");
            out.push_str(&placeholder_key(&attr.name));
            out.push('>');
            if let Some(units) = &attr.units {
                out.push(' ');
                out.push_str(units);
            }
        }
        out
    }
}

/// Canonical placeholder spelling of an attribute or placeholder name.
pub(crate) fn placeholder_key(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_uppercase(),
        })
        .collect()
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Checks every schema invariant. An empty report means the schema is usable.
pub fn validate_schema(schema: &ProfileSchema) -> ValidationReport {
    let mut report = ValidationReport::new();
    let mut seen = HashSet::new();

    for attr in &schema.attributes {
        if !is_identifier(&attr.name) {
            report.push(&attr.name, "attribute name must be an identifier");
        }
        if !seen.insert(attr.name.as_str()) {
            report.push(&attr.name, "duplicate attribute name");
            continue;
        }
        match &attr.kind {
            AttributeKind::Categorical { options } => {
                if options.is_empty() {
                    report.push(&attr.name, "categorical attribute has no options");
                    continue;
                }
                let mut values = HashSet::new();
                for opt in options {
                    if !values.insert(opt.value.as_str()) {
                        report.push(&attr.name, format!("duplicate option {:?}", opt.value));
                    }
                    if !opt.weight.is_finite() || opt.weight < 0.0 {
                        report.push(
                            &attr.name,
                            format!("option {:?} has a negative or non-finite weight", opt.value),
                        );
                    }
                }
                let total: f64 = options.iter().map(|o| o.weight.max(0.0)).sum();
                if total <= 0.0 {
                    report.push(&attr.name, "weights sum to zero");
                }
            }
            AttributeKind::IntegerRange { low, high } => {
                if low > high {
                    report.push(&attr.name, format!("bounds out of order: {low} > {high}"));
                }
            }
            AttributeKind::RealRange { low, high } => {
                if !low.is_finite() || !high.is_finite() {
                    report.push(&attr.name, "bounds must be finite");
                } else if low > high {
                    report.push(&attr.name, format!("bounds out of order: {low} > {high}"));
                }
            }
            AttributeKind::Big5 => {}
        }
    }

    for (i, constraint) in schema.constraints.iter().enumerate() {
        let label = format!("constraint {i} {constraint}");
        if constraint.when.is_empty() {
            report.push(&label, "constraint has no terms");
            continue;
        }
        let mut ok = true;
        for term in &constraint.when {
            let Some(attr) = schema.attribute(&term.attribute) else {
                report.push(&label, format!("references undeclared attribute {:?}", term.attribute));
                ok = false;
                continue;
            };
            match (&term.test, &attr.kind) {
                (TermTest::Equals { equals }, AttributeKind::Categorical { options }) => {
                    if !options.iter().any(|o| &o.value == equals) {
                        report.push(
                            &label,
                            format!("{:?} is not an option of {}", equals, attr.name),
                        );
                        ok = false;
                    }
                }
                (
                    TermTest::Within { low, high },
                    AttributeKind::IntegerRange { .. } | AttributeKind::RealRange { .. },
                ) => {
                    if low > high {
                        report.push(&label, "interval bounds out of order");
                        ok = false;
                    }
                }
                _ => {
                    report.push(
                        &label,
                        format!("term kind does not fit attribute {}", attr.name),
                    );
                    ok = false;
                }
            }
        }
        if let ConstraintKind::WeightMultiplier { factor } = constraint.kind {
            if !factor.is_finite() || factor < 0.0 {
                report.push(&label, "factor must be a nonnegative finite number");
            }
            if ok {
                let target = sample::multiplier_target(schema, constraint);
                if !matches!(target.map(|t| &t.test), Some(TermTest::Equals { .. })) {
                    report.push(
                        &label,
                        "the last-declared attribute of a multiplier must be a categorical equality",
                    );
                }
            }
        }
    }

    let template = schema.effective_template();
    for name in render::placeholders(&template) {
        if !schema
            .attributes
            .iter()
            .any(|a| placeholder_key(&a.name) == placeholder_key(&name))
        {
            report.push("template", format!("unknown placeholder <{name}>"));
        }
    }
    report
}

/// One synthetic respondent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: String,
    pub attributes: BTreeMap<String, AttributeValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
    pub seed: u64,
}
