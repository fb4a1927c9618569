use super::*;
use crate::profile::{generate_population, AttributeSpec, ProfileSchema};
use crate::prompt::AnswerValue;
use crate::providers::Usage;
use crate::scheduler::AnswerStatus;
use crate::survey::{AnswerSchema, SurveyQuestion};
use proptest::prelude::*;

fn meta(run: &str, user: &str) -> RunMeta {
    let schema = ProfileSchema::new(vec![AttributeSpec::integer("age", 18, 90)]);
    let survey = SurveySpec {
        questions: vec![SurveyQuestion {
            question_id: "q0".into(),
            text: "?".into(),
            answer_instruction: String::new(),
            answer_schema: AnswerSchema::Likert { low: 1, high: 5 },
        }],
    };
    new_run_meta(run, user, SimulationConfig::example(schema), survey, 0)
}

fn record(run: &str, agent: usize, question: usize) -> AnswerRecord {
    AnswerRecord {
        run_id: run.into(),
        agent_id: format!("a{agent}"),
        question_id: format!("q{question}"),
        agent_index: agent,
        question_index: question,
        status: AnswerStatus::Ok,
        value: Some(AnswerValue::Integer((agent % 5) as i64 + 1)),
        reasoning: Some("r".into()),
        raw_response: "answer: 1".into(),
        attempts: 1,
        format_repairs: 0,
        usage: Usage {
            input_tokens: 5,
            output_tokens: 2,
        },
        dispatched_at: 0.0,
        completed_at: 0.0,
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return out;
    }
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn state_machine_edges() {
    use RunState::*;
    assert!(Draft.can_transition_to(Running));
    assert!(Failed.can_transition_to(Running));
    assert!(Cancelled.can_transition_to(Running));
    assert!(!Completed.can_transition_to(Running));
    assert!(!Running.can_transition_to(Cancelled));
    assert!(!Cancelling.can_transition_to(Running));
}

#[test]
fn answers_are_idempotent_and_ordered() {
    let s = SimulationStore::in_memory();
    s.create_run(meta("r1", "u1")).unwrap();
    assert!(s.save_answer("u1", "r1", &record("r1", 2, 0)).unwrap());
    assert!(s.save_answer("u1", "r1", &record("r1", 0, 0)).unwrap());
    assert!(!s.save_answer("u1", "r1", &record("r1", 2, 0)).unwrap());
    let order: Vec<_> = s.answers("u1", "r1").unwrap().iter().map(|r| r.agent_index).collect();
    assert_eq!(order, vec![0, 2]);
}

#[test]
fn users_cannot_reach_each_other() {
    let s = SimulationStore::in_memory();
    s.create_run(meta("r1", "u1")).unwrap();
    assert!(matches!(s.run_meta("u2", "r1"), Err(StoreError::NotFound(_))));
    assert!(s.save_answer("u2", "r1", &record("r1", 0, 0)).is_err());
    assert_eq!(s.run_owner("r1").as_deref(), Some("u1"));
    let up = s.save_upload("u1", UploadKind::Survey, "csv", b"x".to_vec()).unwrap();
    assert!(s.upload("u2", &up.upload_id).is_err());
    assert!(s.create_run(meta("r1", "u2")).is_err());
}

#[test]
fn identifiers_cannot_escape_the_root() {
    let s = SimulationStore::in_memory();
    assert!(matches!(s.create_run(meta("../x", "u1")), Err(StoreError::BadId(_))));
    assert!(matches!(s.purge_user("u1/../.."), Err(StoreError::BadId(_))));
}

#[test]
fn reopen_replays_and_skips_torn_lines() {
    let dir = tempfile::tempdir().unwrap();
    {
        let s = Arc::new(SimulationStore::open(dir.path()).unwrap());
        s.create_run(meta("r1", "u1")).unwrap();
        let sinks = s.run_sinks("u1", "r1");
        for a in 0..3 {
            sinks.save_answer(&record("r1", a, 0)).unwrap();
        }
        let mut m = RunManifest::new("r1", &meta("r1", "u1").config, 3);
        m.completed.insert(JobId::new("a0", "q0"));
        sinks.persist(&m).unwrap();
        let pop = generate_population(&ProfileSchema::new(vec![AttributeSpec::integer("age", 1, 2)]), 3, 0).unwrap();
        s.save_population("u1", "r1", Arc::new(pop)).unwrap();
        s.update_run("u1", "r1", |m| m.state = RunState::Failed).unwrap();
    }
    let run_dir = dir.path().join("sim/u1/runs/r1");
    append(&run_dir.join("answers.jsonl"), b"{\"run_id\":\"r1\",\"agent_").unwrap();
    append(&run_dir.join("manifest.log"), b"0123 {\"torn").unwrap();

    let s = SimulationStore::open(dir.path()).unwrap();
    assert_eq!(s.answers("u1", "r1").unwrap().len(), 3);
    assert_eq!(s.latest_manifest("u1", "r1").unwrap().unwrap().completed.len(), 1);
    assert_eq!(s.population("u1", "r1").unwrap().unwrap().len(), 3);
    assert_eq!(s.run_meta("u1", "r1").unwrap().state, RunState::Failed);
    assert_eq!(s.run_owner("r1").as_deref(), Some("u1"));
}

#[test]
fn export_reads_back_what_was_stored() {
    let s = SimulationStore::in_memory();
    s.create_run(meta("r1", "u1")).unwrap();
    for a in [1, 0] {
        s.save_answer("u1", "r1", &record("r1", a, 0)).unwrap();
    }
    let csv_bytes = s.export("u1", "r1", ExportFormat::Csv).unwrap();
    let expect = export_csv(&s.answers("u1", "r1").unwrap(), &s.run_meta("u1", "r1").unwrap().export_meta());
    assert_eq!(csv_bytes, expect);
    assert!(matches!(s.export("u1", "r1", ExportFormat::Manifest), Err(StoreError::NotFound(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn purge_is_exact(
        a_runs in 0usize..4,
        b_runs in 1usize..4,
        a_answers in 0usize..6,
        b_answers in 0usize..6,
        a_uploads in 0usize..3,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let s = SimulationStore::open(dir.path()).unwrap();
        for (user, runs, answers, uploads) in [("ua", a_runs, a_answers, a_uploads), ("ub", b_runs, b_answers, 1)] {
            for r in 0..runs {
                let run = format!("{user}-r{r}");
                s.create_run(meta(&run, user)).unwrap();
                for a in 0..answers {
                    s.save_answer(user, &run, &record(&run, a, 0)).unwrap();
                }
                s.save_manifest(user, &run, &RunManifest::new(&run, &meta(&run, user).config, answers)).unwrap();
            }
            for u in 0..uploads {
                s.save_upload(user, UploadKind::Survey, "csv", vec![u as u8; 10]).unwrap();
            }
        }
        let b_before = tree(&dir.path().join("sim/ub"));
        let b_runs_before = s.list_runs("ub");

        let report = s.purge_user("ua").unwrap();
        prop_assert_eq!(report.runs, a_runs);
        prop_assert_eq!(report.answers, a_runs * a_answers);
        prop_assert_eq!(report.uploads, a_uploads);
        prop_assert_eq!(report.manifests, a_runs);

        prop_assert!(!s.holds_data_for("ua"));
        prop_assert!(s.list_runs("ua").is_empty());
        for r in 0..a_runs {
            prop_assert_eq!(s.run_owner(&format!("ua-r{r}")), None);
        }
        prop_assert_eq!(tree(&dir.path().join("sim/ub")), b_before);
        prop_assert_eq!(s.list_runs("ub"), b_runs_before);

        let reopened = SimulationStore::open(dir.path()).unwrap();
        prop_assert!(!reopened.holds_data_for("ua"));
        prop_assert_eq!(reopened.list_runs("ub").len(), b_runs);
    }
}
