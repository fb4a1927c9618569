#![allow(dead_code)]

//! Random API call sequences and the checks applied after each one.

use std::collections::HashMap;
use std::time::Duration;

use axum::http::StatusCode;
use panelsim_core::providers::{LatencyModel, MockOutcome, MockScript};
use panelsim_core::{JobId, RunState};
use proptest::prelude::*;

use super::*;

#[derive(Debug, Clone)]
pub enum Op {
    Start { failing: bool },
    Cancel(usize),
    Resume(usize),
    Get(usize),
    Wait(u64),
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => any::<bool>().prop_map(|failing| Op::Start { failing }),
        3 => (0usize..4).prop_map(Op::Cancel),
        3 => (0usize..4).prop_map(Op::Resume),
        1 => (0usize..4).prop_map(Op::Get),
        3 => (0u64..4000).prop_map(Op::Wait),
    ]
}

pub async fn exercise(ops: Vec<Op>) -> Result<(), TestCaseError> {
    let script = MockScript {
        latency: LatencyModel::Fixed { secs: 0.5 },
        ..MockScript::default()
    }
    .script(JobId::new("a3", "q0"), vec![MockOutcome::Fatal]);
    let app = app(script);
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(1)).await;
    let mut runs: Vec<String> = Vec::new();

    for op in ops {
        match op {
            Op::Start { failing } => {
                let r = app.start(&t, &config(if failing { 4 } else { 3 }), &s).await;
                prop_assert_eq!(r.status, StatusCode::ACCEPTED);
                prop_assert_eq!(r.run().state, RunState::Running);
                runs.push(r.run().run_id);
            }
            Op::Cancel(i) | Op::Resume(i) | Op::Get(i) if runs.is_empty() => {
                let _ = i;
            }
            Op::Cancel(i) => {
                let run = &runs[i % runs.len()];
                let r = app.call("POST", &format!("/runs/{run}/cancel"), Some(&t), None).await;
                match r.status {
                    StatusCode::ACCEPTED => prop_assert_eq!(r.run().state, RunState::Cancelling),
                    StatusCode::CONFLICT => {}
                    other => prop_assert!(false, "cancel answered {}", other),
                }
            }
            Op::Resume(i) => {
                let run = &runs[i % runs.len()];
                let r = app.call("POST", &format!("/runs/{run}/resume"), Some(&t), None).await;
                match r.status {
                    StatusCode::ACCEPTED => prop_assert_eq!(r.run().state, RunState::Running),
                    StatusCode::CONFLICT => {}
                    other => prop_assert!(false, "resume answered {}", other),
                }
            }
            Op::Get(i) => {
                let run = &runs[i % runs.len()];
                prop_assert_eq!(&app.get(&t, run).await.run_id, run);
            }
            Op::Wait(ms) => tokio::time::sleep(Duration::from_millis(ms)).await,
        }
    }

    let mut last: HashMap<String, RunState> = HashMap::new();
    for run in &runs {
        app.settle(&t, run).await;
    }
    for tr in app.state.runs.transitions() {
        prop_assert!(tr.from.can_transition_to(tr.to), "{:?} -> {:?}", tr.from, tr.to);
        let prev = last.get(&tr.run_id).copied().unwrap_or(RunState::Draft);
        prop_assert_eq!(prev, tr.from, "broken chain for {}", tr.run_id);
        last.insert(tr.run_id.clone(), tr.to);
    }
    for run in &runs {
        let v = app.get(&t, run).await;
        prop_assert_eq!(Some(&v.state), last.get(run));
        prop_assert!(matches!(v.state, RunState::Completed | RunState::Failed | RunState::Cancelled));
    }
    Ok(())
}

