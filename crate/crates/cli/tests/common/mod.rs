#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use panelsim_core::profile::{AttributeSpec, ProfileSchema};
use panelsim_core::providers::MockScript;
use panelsim_core::survey::survey_to_csv;
use panelsim_core::{AnswerSchema, SimulationConfig, SurveyQuestion, SurveySpec};

pub fn schema() -> ProfileSchema {
    ProfileSchema::new(vec![
        AttributeSpec::integer("age", 18, 90),
        AttributeSpec::categorical("region", [("north", 2.0), ("south", 1.0)]),
        AttributeSpec::big5("personality"),
    ])
}

pub fn config(population: usize) -> SimulationConfig {
    let mut c = SimulationConfig::example(schema());
    c.population_size = population;
    c.max_concurrency = 3;
    c.retry.jitter_fraction = 0.0;
    c
}

pub fn survey() -> SurveySpec {
    SurveySpec {
        questions: vec![
            SurveyQuestion {
                question_id: "trust".into(),
                text: "How much do you trust strangers?".into(),
                answer_instruction: String::new(),
                answer_schema: AnswerSchema::Likert { low: 1, high: 7 },
            },
            SurveyQuestion {
                question_id: "pet".into(),
                text: "Which pet would you pick?".into(),
                answer_instruction: String::new(),
                answer_schema: AnswerSchema::SingleChoice {
                    options: vec!["cat".into(), "dog".into(), "fish".into()],
                },
            },
            SurveyQuestion {
                question_id: "hours".into(),
                text: "Hours of sleep last night?".into(),
                answer_instruction: String::new(),
                answer_schema: AnswerSchema::NumericRange { low: 0.0, high: 14.0 },
            },
        ],
    }
}

/// Input files in a fresh directory.
pub struct Inputs {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub survey: PathBuf,
}

impl Inputs {
    pub fn new(config: &SimulationConfig, survey: &SurveySpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("config.json");
        fs::write(&config_path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
        let survey_path = dir.path().join("survey.csv");
        fs::write(&survey_path, survey_to_csv(survey)).unwrap();
        Self {
            dir,
            config: config_path,
            survey: survey_path,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn script(&self, name: &str, script: &MockScript) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, serde_json::to_vec(script).unwrap()).unwrap();
        p
    }

    pub fn run(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            "run".to_owned(),
            "--config".into(),
            self.config.display().to_string(),
            "--survey".into(),
            self.survey.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--mock".into(),
            "--simulated-clock".into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        panelsim(&args)
    }
}

pub fn panelsim<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelsim")).args(args).output().unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
