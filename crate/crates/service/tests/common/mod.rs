#![allow(dead_code)]

pub mod model;

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use panelsim_core::profile::{AttributeSpec, ProfileSchema};
use panelsim_core::providers::{standard_registry, MockScript};
use panelsim_core::store::HashCost;
use panelsim_core::survey::survey_to_csv;
use panelsim_core::{
    AnswerSchema, CredentialStore, MetricsSnapshot, RuntimeClock, SimulationConfig, SimulationStore, SurveyQuestion,
    SurveySpec,
};
use panelsim_service::{router, AppState, RunView};

pub struct TestApp {
    pub router: Router,
    pub state: Arc<AppState>,
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }

    pub fn run(&self) -> RunView {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub fn app(script: MockScript) -> TestApp {
    app_with_store(script, Arc::new(SimulationStore::in_memory()))
}

pub fn app_with_store(script: MockScript, store: Arc<SimulationStore>) -> TestApp {
    let clock = RuntimeClock::shared();
    let credentials = CredentialStore::open(None, HashCost::FAST, clock.clone(), Duration::from_secs(3600)).unwrap();
    app_from_parts(script, store, credentials, clock)
}

pub fn app_from_parts(
    script: MockScript,
    store: Arc<SimulationStore>,
    credentials: CredentialStore,
    clock: panelsim_core::SharedClock,
) -> TestApp {
    let providers = standard_registry(clock.clone(), script);
    let state = AppState::new(credentials, store, providers, clock);
    TestApp {
        router: router(state.clone()),
        state,
    }
}

pub fn survey(questions: usize) -> SurveySpec {
    SurveySpec {
        questions: (0..questions)
            .map(|i| SurveyQuestion {
                question_id: format!("q{i}"),
                text: format!("Question {i}?"),
                answer_instruction: String::new(),
                answer_schema: AnswerSchema::Likert { low: 1, high: 5 },
            })
            .collect(),
    }
}

pub fn config(population: usize) -> SimulationConfig {
    let schema = ProfileSchema::new(vec![
        AttributeSpec::integer("age", 18, 90),
        AttributeSpec::categorical("region", [("north", 1.0), ("south", 1.0)]),
    ]);
    let mut c = SimulationConfig::example(schema);
    c.population_size = population;
    c.max_concurrency = 2;
    c.retry.jitter_fraction = 0.0;
    c
}

pub fn multipart(fields: &[(&str, &[u8])]) -> (String, Vec<u8>) {
    let boundary = "panelsimboundary7f3a";
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(format!("--{boundary}\r\n").as_bytes());
        if *name == "file" {
            body.extend_from_slice(
                b"Content-Disposition: form-data; name=\"file\"; filename=\"doc\"\r\nContent-Type: application/octet-stream\r\n\r\n",
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        }
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

impl TestApp {
    pub async fn send(&self, req: Request<Body>) -> Reply {
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, body }
    }

    pub async fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> Reply {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(&b).unwrap())),
            None => req.body(Body::empty()),
        };
        self.send(req.unwrap()).await
    }

    /// Registers `login` and returns a bearer token.
    pub async fn user(&self, login: &str) -> String {
        let creds = json!({ "login": login, "secret": "long enough secret" });
        assert_eq!(self.call("POST", "/auth/register", None, Some(creds.clone())).await.status, StatusCode::CREATED);
        let r = self.call("POST", "/auth/login", None, Some(creds)).await;
        assert_eq!(r.status, StatusCode::OK);
        r.json()["token"].as_str().unwrap().to_owned()
    }

    pub async fn upload(&self, token: &str, kind: &str, format: &str, bytes: &[u8]) -> Reply {
        let (ct, body) = multipart(&[("kind", kind.as_bytes()), ("format", format.as_bytes()), ("file", bytes)]);
        let req = Request::post("/uploads")
            .header("authorization", format!("Bearer {token}"))
            .header("content-type", ct)
            .body(Body::from(body))
            .unwrap();
        self.send(req).await
    }

    pub async fn upload_survey(&self, token: &str, spec: &SurveySpec) -> String {
        let r = self.upload(token, "survey", "csv", survey_to_csv(spec).as_bytes()).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
        r.json()["upload_id"].as_str().unwrap().to_owned()
    }

    pub async fn start(&self, token: &str, config: &SimulationConfig, survey_upload: &str) -> Reply {
        let body = json!({ "config": config, "survey_upload": survey_upload });
        self.call("POST", "/runs", Some(token), Some(body)).await
    }

    pub async fn get(&self, token: &str, run: &str) -> RunView {
        self.call("GET", &format!("/runs/{run}"), Some(token), None).await.run()
    }

    /// Polls until the run leaves running and cancelling.
    pub async fn settle(&self, token: &str, run: &str) -> RunView {
        for _ in 0..100_000 {
            let v = self.get(token, run).await;
            if !v.state.is_active() {
                return v;
            }
            tokio::time::sleep(Duration::from_millis(500)).await;
        }
        panic!("run {run} never settled");
    }

    pub async fn snapshots(&self, token: &str, run: &str) -> (StatusCode, Vec<MetricsSnapshot>) {
        let r = self.call("GET", &format!("/runs/{run}/metrics"), Some(token), None).await;
        let snaps = r
            .text()
            .lines()
            .filter_map(|l| l.strip_prefix("data:"))
            .map(|d| serde_json::from_str(d.trim()).unwrap())
            .collect();
        (r.status, snaps)
    }
}
