//! Fixtures shared by the benchmarks.

use panelsim_core::profile::{AttributeSpec, Constraint, ProfileSchema, Term};
use panelsim_core::{AnswerSchema, SimulationConfig, SurveyQuestion, SurveySpec};

pub fn schema() -> ProfileSchema {
    ProfileSchema::new(vec![
        AttributeSpec::categorical("gender", [("male", 1.0), ("female", 1.0)]),
        AttributeSpec::categorical("orientation", [("straight", 0.8), ("gay", 0.1), ("lesbian", 0.1)]),
        AttributeSpec::integer("age", 18, 90),
        AttributeSpec::real("income", 0.0, 250_000.0).with_units("USD"),
        AttributeSpec::big5("personality"),
    ])
    .with_constraints(vec![Constraint::forbid(vec![
        Term::equals("gender", "male"),
        Term::equals("orientation", "lesbian"),
    ])])
}

pub fn survey(questions: usize) -> SurveySpec {
    SurveySpec {
        questions: (0..questions)
            .map(|i| SurveyQuestion {
                question_id: format!("q{i}"),
                text: format!("How strongly do you agree with statement {i}?"),
                answer_instruction: String::new(),
                answer_schema: if i % 2 == 0 {
                    AnswerSchema::Likert { low: 1, high: 7 }
                } else {
                    AnswerSchema::SingleChoice {
                        options: vec!["yes".into(), "no".into(), "unsure".into()],
                    }
                },
            })
            .collect(),
    }
}

pub fn config(agents: usize) -> SimulationConfig {
    let mut c = SimulationConfig::example(schema());
    c.population_size = agents;
    c.rpm_limit = 1_000_000;
    c.tpm_limit = 1_000_000_000;
    c.max_concurrency = 16;
    c
}
