mod common;

use std::sync::Arc;

use axum::http::StatusCode;
use common::*;
use panelsim_core::providers::{LatencyModel, MockOutcome, MockScript};
use panelsim_core::scheduler::{RunManifest, UncompletedState};
use panelsim_core::store::{ExportFormat, CSV_HEADER};
use panelsim_core::{JobId, RunState, SimulationStore};
use serde_json::json;

fn slow() -> MockScript {
    MockScript {
        latency: LatencyModel::Fixed { secs: 1.0 },
        ..MockScript::default()
    }
}

#[tokio::test(start_paused = true)]
async fn requests_without_a_session_are_denied() {
    let app = app(MockScript::default());
    for (m, p) in [("GET", "/runs"), ("POST", "/runs"), ("GET", "/runs/r1"), ("DELETE", "/me/data")] {
        assert_eq!(app.call(m, p, None, None).await.status, StatusCode::UNAUTHORIZED, "{m} {p}");
        assert_eq!(app.call(m, p, Some("nope"), None).await.status, StatusCode::UNAUTHORIZED);
    }
    let bad = json!({ "login": "ada", "secret": "wrong secret" });
    assert_eq!(app.call("POST", "/auth/login", None, Some(bad)).await.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test(start_paused = true)]
async fn valid_start_runs_to_completion() {
    let app = app(MockScript::default());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(3)).await;
    let r = app.start(&t, &config(4), &s).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text());
    let v = r.run();
    assert_eq!(v.state, RunState::Running);

    let done = app.settle(&t, &v.run_id).await;
    assert_eq!(done.state, RunState::Completed);
    assert_eq!(done.completed, 12);
    let csv = app.call("GET", &format!("/runs/{}/results?format=csv", v.run_id), Some(&t), None).await;
    assert_eq!(csv.status, StatusCode::OK);
    assert_eq!(csv.text().lines().count(), 13);
    assert!(csv.text().starts_with(&CSV_HEADER.join(",")));
    let jsonl = app.call("GET", &format!("/runs/{}/results?format=jsonl", v.run_id), Some(&t), None).await;
    assert_eq!(jsonl.text().lines().count(), 12);
    let bogus = app.call("GET", &format!("/runs/{}/results?format=xml", v.run_id), Some(&t), None).await;
    assert_eq!(bogus.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(start_paused = true)]
async fn invalid_config_creates_no_run() {
    let app = app(MockScript::default());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(1)).await;
    let mut c = config(3);
    c.max_concurrency = 0;
    let r = app.start(&t, &c, &s).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["issues"].as_array().unwrap().iter().any(|i| i["subject"] == "max_concurrency"));

    let mut c = config(3);
    c.provider_id = "nobody".into();
    assert_eq!(app.start(&t, &c, &s).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(app.start(&t, &config(3), "missing").await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let junk = app.call("POST", "/runs", Some(&t), Some(json!({ "config": 5 }))).await;
    assert_eq!(junk.status, StatusCode::UNPROCESSABLE_ENTITY);

    let runs = app.call("GET", "/runs", Some(&t), None).await.json();
    assert_eq!(runs.as_array().unwrap().len(), 0);
    assert!(app.state.runs.transitions().is_empty());
}

#[tokio::test(start_paused = true)]
async fn malformed_survey_upload_reports_positions() {
    let app = app(MockScript::default());
    let t = app.user("ada").await;
    let doc = b"question_id,text,answer_kind,options,answer_instruction\nq1,Fine?,likert,1|5,\nq2,Broken?,likert,7|3,\n";
    let r = app.upload(&t, "survey", "csv", doc).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.text().contains("line 3"), "{}", r.text());
    assert_eq!(app.upload(&t, "bogus", "csv", doc).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(app.upload(&t, "population", "xml", doc).await.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(start_paused = true)]
async fn duplicate_starts_create_one_run() {
    let app = app(MockScript::default());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(1)).await;
    let body = json!({ "config": config(2), "survey_upload": s, "idempotency_key": "launch-1" });
    let (a, b) = tokio::join!(
        app.call("POST", "/runs", Some(&t), Some(body.clone())),
        app.call("POST", "/runs", Some(&t), Some(body.clone())),
    );
    assert_eq!(a.run().run_id, b.run().run_id);
    let runs = app.call("GET", "/runs", Some(&t), None).await.json();
    assert_eq!(runs.as_array().unwrap().len(), 1);
}

#[tokio::test(start_paused = true)]
async fn cancel_then_resume_completes_the_cross_product() {
    let app = app(slow());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(2)).await;
    let mut c = config(10);
    c.max_concurrency = 1;
    let run = app.start(&t, &c, &s).await.run().run_id;
    tokio::time::sleep(std::time::Duration::from_millis(4500)).await;

    let r = app.call("POST", &format!("/runs/{run}/cancel"), Some(&t), None).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    assert_eq!(r.run().state, RunState::Cancelling);
    let v = app.settle(&t, &run).await;
    assert_eq!(v.state, RunState::Cancelled);
    assert!(v.completed > 0 && v.completed < 20, "{}", v.completed);
    let manifest = app.call("GET", &format!("/runs/{run}/results?format=manifest"), Some(&t), None).await;
    let m: RunManifest = serde_json::from_slice(&manifest.body).unwrap();
    assert_eq!(m.completed.len() + m.uncompleted.len(), 20);

    let again = app.call("POST", &format!("/runs/{run}/cancel"), Some(&t), None).await;
    assert_eq!(again.status, StatusCode::CONFLICT);

    let r = app.call("POST", &format!("/runs/{run}/resume"), Some(&t), None).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text());
    let v = app.settle(&t, &run).await;
    assert_eq!(v.state, RunState::Completed);
    assert_eq!(v.completed, 20);

    let r = app.call("POST", &format!("/runs/{run}/resume"), Some(&t), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "state-conflict");

    use RunState::*;
    let states: Vec<_> = app.state.runs.transitions().iter().map(|t| (t.from, t.to)).collect();
    assert_eq!(
        states,
        vec![(Draft, Running), (Running, Cancelling), (Cancelling, Cancelled), (Cancelled, Running), (Running, Completed)]
    );
}

#[tokio::test(start_paused = true)]
async fn failed_run_download_matches_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SimulationStore::open(dir.path()).unwrap());
    let script = MockScript::default().script(JobId::new("a9", "q0"), vec![MockOutcome::Fatal]);
    let app = app_with_store(script, store.clone());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(1)).await;
    let mut c = config(10);
    c.max_concurrency = 1;
    let run = app.start(&t, &c, &s).await.run().run_id;
    let v = app.settle(&t, &run).await;
    assert_eq!(v.state, RunState::Failed);
    assert!(v.error.is_some());

    let csv = app.call("GET", &format!("/runs/{run}/results?format=csv"), Some(&t), None).await;
    assert_eq!(csv.text().lines().count(), 1 + 9);
    let manifest = app.call("GET", &format!("/runs/{run}/results?format=manifest"), Some(&t), None).await;
    let m: RunManifest = serde_json::from_slice(&manifest.body).unwrap();
    assert_eq!(m.completed.len(), 9);
    assert_eq!(m.uncompleted.len(), 1);
    assert_eq!(m.uncompleted[0].job_id, JobId::new("a9", "q0"));
    assert_eq!(m.uncompleted[0].state, UncompletedState::Exhausted);

    // What is served is what was persisted: reopen the store from disk.
    let user = store.run_owner(&run).unwrap();
    let reopened = SimulationStore::open(dir.path()).unwrap();
    for (format, served) in [("csv", &csv.body), ("manifest", &manifest.body)] {
        let f: ExportFormat = format.parse().unwrap();
        assert_eq!(&reopened.export(&user, &run, f).unwrap(), served, "{format}");
    }
    let jsonl = app.call("GET", &format!("/runs/{run}/results?format=jsonl"), Some(&t), None).await;
    assert_eq!(reopened.export(&user, &run, ExportFormat::Jsonl).unwrap(), jsonl.body);
}

#[tokio::test(start_paused = true)]
async fn finished_run_streams_one_terminal_snapshot() {
    let app = app(MockScript::default());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(2)).await;
    let run = app.start(&t, &config(3), &s).await.run().run_id;
    app.settle(&t, &run).await;
    let (status, snaps) = app.snapshots(&t, &run).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(snaps.len(), 1);
    assert!(snaps[0].terminal);
    assert_eq!(snaps[0].completed, 6);
    assert!(snaps[0].is_conserved());
}

#[tokio::test(start_paused = true)]
async fn live_stream_ends_with_terminal_snapshot() {
    let app = app(slow());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(2)).await;
    let run = app.start(&t, &config(4), &s).await.run().run_id;
    let (_, snaps) = app.snapshots(&t, &run).await;
    assert!(snaps.len() > 1);
    assert!(snaps.iter().all(|s| s.is_conserved()));
    assert!(snaps.windows(2).all(|w| w[0].completed <= w[1].completed && w[0].at_secs <= w[1].at_secs));
    let last = snaps.last().unwrap();
    assert!(last.terminal && last.completed == 8);
    assert_eq!(snaps.iter().filter(|s| s.terminal).count(), 1);
}

#[tokio::test(start_paused = true)]
async fn users_cannot_touch_each_others_runs() {
    let app = app(MockScript::default());
    let (a, b) = (app.user("ada").await, app.user("bob").await);
    let s = app.upload_survey(&a, &survey(1)).await;
    let run = app.start(&a, &config(2), &s).await.run().run_id;
    app.settle(&a, &run).await;
    for (m, p) in [
        ("GET", format!("/runs/{run}")),
        ("GET", format!("/runs/{run}/results?format=csv")),
        ("GET", format!("/runs/{run}/metrics")),
        ("POST", format!("/runs/{run}/cancel")),
        ("POST", format!("/runs/{run}/resume")),
    ] {
        assert_eq!(app.call(m, &p, Some(&b), None).await.status, StatusCode::FORBIDDEN, "{m} {p}");
    }
    assert_eq!(app.start(&b, &config(2), &s).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(app.call("GET", "/runs/rnothere", Some(&b), None).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test(start_paused = true)]
async fn purge_stops_runs_and_spares_others() {
    let app = app(slow());
    let (a, b) = (app.user("ada").await, app.user("bob").await);
    let sa = app.upload_survey(&a, &survey(2)).await;
    let sb = app.upload_survey(&b, &survey(2)).await;
    let ra = app.start(&a, &config(6), &sa).await.run().run_id;
    let rb = app.start(&b, &config(3), &sb).await.run().run_id;
    tokio::time::sleep(std::time::Duration::from_secs(2)).await;

    let r = app.call("DELETE", "/me/data", Some(&a), None).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(r.json()["runs"], 1);
    assert_eq!(r.json()["uploads"], 1);
    assert_eq!(app.call("GET", &format!("/runs/{ra}"), Some(&a), None).await.status, StatusCode::NOT_FOUND);
    assert!(!app.state.runs.store().holds_data_for(&app.state.credentials.authenticate(&a).unwrap()));

    let v = app.settle(&b, &rb).await;
    assert_eq!((v.state, v.completed), (RunState::Completed, 6));
}

#[tokio::test(start_paused = true)]
async fn uploaded_population_is_used() {
    let app = app(MockScript::default());
    let t = app.user("ada").await;
    let s = app.upload_survey(&t, &survey(1)).await;
    let c = config(3);
    let pop = panelsim_core::generate_population(&c.profile_schema, 3, 99).unwrap();
    let csv = panelsim_core::profile::population_to_csv(&c.profile_schema, &pop);
    let r = app.upload(&t, "population", "csv", csv.as_bytes()).await;
    let up = r.json()["upload_id"].as_str().unwrap().to_owned();

    let body = json!({ "config": c, "survey_upload": s, "population_upload": up });
    let run = app.call("POST", "/runs", Some(&t), Some(body)).await.run().run_id;
    app.settle(&t, &run).await;
    let user = app.state.credentials.authenticate(&t).unwrap();
    assert_eq!(app.state.runs.store().population(&user, &run).unwrap().unwrap().as_ref(), &pop);

    let mut wrong = config(5);
    wrong.run_seed = 2;
    let body = json!({ "config": wrong, "survey_upload": s, "population_upload": up });
    let r = app.call("POST", "/runs", Some(&t), Some(body)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}
