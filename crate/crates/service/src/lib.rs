//! HTTP backend: accounts, document uploads, run control, live metrics over
//! server-sent events, and result downloads.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/auth/register` | `{login, secret}` → `{user_id}` |
//! | POST | `/auth/login` | `{login, secret}` → session with bearer token |
//! | POST | `/uploads` | multipart `kind`, `format`, `file` |
//! | POST | `/runs` | [`StartRequest`] → run view |
//! | GET | `/runs` | the caller's runs |
//! | GET | `/runs/{id}` | run view |
//! | POST | `/runs/{id}/cancel` | |
//! | POST | `/runs/{id}/resume` | |
//! | GET | `/runs/{id}/metrics` | event stream of metrics snapshots |
//! | GET | `/runs/{id}/results?format=csv\|jsonl\|manifest` | export |
//! | DELETE | `/me/data` | purge every run and upload of the caller |

mod api;
mod error;
mod manager;

use std::sync::Arc;

use axum::extract::DefaultBodyLimit;
use axum::routing::{delete, get, post};
use axum::Router;

use panelsim_core::{CredentialStore, MetricsRegistry, ProviderRegistry, SharedClock, SimulationStore};

pub use api::{AuthUser, Credentials, RunView};
pub use error::ApiError;
pub use manager::{ManagerError, RunManager, StartRequest, Transition};

const MAX_BODY: usize = 64 << 20;

pub struct AppState {
    pub credentials: CredentialStore,
    pub runs: Arc<RunManager>,
}

impl AppState {
    pub fn new(
        credentials: CredentialStore,
        store: Arc<SimulationStore>,
        providers: ProviderRegistry,
        clock: SharedClock,
    ) -> Arc<Self> {
        let runs = RunManager::new(store, Arc::new(MetricsRegistry::new()), providers, clock);
        Arc::new(Self { credentials, runs })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/auth/register", post(api::register))
        .route("/auth/login", post(api::login))
        .route("/uploads", post(api::upload))
        .route("/runs", post(api::start_run).get(api::list_runs))
        .route("/runs/{id}", get(api::get_run))
        .route("/runs/{id}/cancel", post(api::cancel_run))
        .route("/runs/{id}/resume", post(api::resume_run))
        .route("/runs/{id}/metrics", get(api::stream_metrics))
        .route("/runs/{id}/results", get(api::download_results))
        .route("/me/data", delete(api::purge))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
