use std::collections::HashSet;
use std::sync::Arc;

use panelsim_core::metrics::NullMetrics;
use panelsim_core::profile::{AttributeSpec, ProfileSchema};
use panelsim_core::providers::{make_mock, MockScript};
use panelsim_core::runner::terminal_state;
use panelsim_core::store::new_run_meta;
use panelsim_core::{
    AnswerSchema, ExportFormat, RunControl, RunDriver, RunState, RuntimeClock, SimulationConfig, SimulationStore,
    SurveyQuestion, SurveySpec,
};

const USER: &str = "u1";
const RUN: &str = "r1";

fn config() -> SimulationConfig {
    let mut c = SimulationConfig::example(ProfileSchema::new(vec![
        AttributeSpec::integer("age", 18, 90),
        AttributeSpec::categorical("region", [("north", 2.0), ("south", 1.0)]),
    ]));
    c.population_size = 8;
    c.max_concurrency = 3;
    c
}

fn survey() -> SurveySpec {
    SurveySpec {
        questions: vec![
            SurveyQuestion {
                question_id: "trust".into(),
                text: "How much do you trust strangers?".into(),
                answer_instruction: String::new(),
                answer_schema: AnswerSchema::Likert { low: 1, high: 5 },
            },
            SurveyQuestion {
                question_id: "pet".into(),
                text: "Cat or dog?".into(),
                answer_instruction: String::new(),
                answer_schema: AnswerSchema::SingleChoice {
                    options: vec!["cat".into(), "dog".into()],
                },
            },
        ],
    }
}

fn driver(store: &Arc<SimulationStore>, control: RunControl) -> RunDriver {
    let clock = RuntimeClock::shared();
    let script = MockScript {
        failure_rate: 0.2,
        malformed_rate: 0.2,
        ..MockScript::default()
    };
    RunDriver {
        store: Arc::clone(store),
        user_id: USER.into(),
        run_id: RUN.into(),
        provider: Arc::new(make_mock(script, config().run_seed, clock.clone())),
        clock,
        metrics: Arc::new(NullMetrics),
        control,
    }
}

#[tokio::test(start_paused = true)]
async fn fresh_run_answers_every_job_once() {
    let store = Arc::new(SimulationStore::in_memory());
    store.create_run(new_run_meta(RUN, USER, config(), survey(), 0)).unwrap();
    let outcome = driver(&store, RunControl::new()).drive(false).await.unwrap();
    assert_eq!(terminal_state(&outcome), RunState::Completed);
    let answers = store.answers(USER, RUN).unwrap();
    assert_eq!(answers.len(), 16);
    let keys: HashSet<_> = answers.iter().map(|a| a.job_id()).collect();
    assert_eq!(keys.len(), 16);
    let csv = String::from_utf8(store.export(USER, RUN, ExportFormat::Csv).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[tokio::test(start_paused = true)]
async fn crashed_run_resumes_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Arc::new(SimulationStore::open(dir.path()).unwrap());
        store.create_run(new_run_meta(RUN, USER, config(), survey(), 0)).unwrap();
        let crashed = driver(&store, RunControl::new().crash_at_step(9)).drive(false).await;
        assert!(crashed.is_err());
    }
    let store = Arc::new(SimulationStore::open(dir.path()).unwrap());
    let before = store.answered_keys(USER, RUN).unwrap();
    assert!(before.len() < 16);
    let outcome = driver(&store, RunControl::new()).drive(true).await.unwrap();
    assert_eq!(terminal_state(&outcome), RunState::Completed);
    let after = store.answers(USER, RUN).unwrap();
    assert_eq!(after.len(), 16);
    assert!(before.iter().all(|k| after.iter().any(|a| a.job_id() == *k)));
}
