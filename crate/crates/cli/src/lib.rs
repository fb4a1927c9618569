//! Headless front end: run simulations, generate populations, and validate
//! inputs from local files, without accounts or a server.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use futures::StreamExt;
use serde::de::DeserializeOwned;

use panelsim_core::metrics::MetricsEvent;
use panelsim_core::profile::{population_to_csv, validate_schema};
use panelsim_core::providers::{standard_registry, MockScript};
use panelsim_core::runner::{failure_reason, terminal_state};
use panelsim_core::scheduler::RunManifest;
use panelsim_core::store::{new_run_meta, HashCost};
use panelsim_core::survey::{parse_survey_document, validate_config_for, SurveyFormat};
use panelsim_core::{
    generate_population, CredentialStore, ExportFormat, MetricsHub, MetricsSink, ProfileSchema, RunControl, RunDriver,
    RunState, RuntimeClock, SharedClock, SimulationConfig, SimulationStore, SurveySpec, ValidationReport,
    FORMAT_DIRECTIVE_VERSION,
};

/// The user every CLI run is stored under.
pub const LOCAL_USER: &str = "local";

pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_JSONL_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIRECTIVE_FILE: &str = "prompt-directive-version";
pub const STORE_DIR: &str = "store";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    Invalid = 1,
    Partial = 2,
    Fatal = 3,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

#[derive(Debug, Parser)]
#[command(name = "panelsim", version, about = "Survey simulation with synthetic respondents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a survey against a simulated population.
    Run(RunArgs),
    /// Sample a population and write it as a table.
    GenerateProfiles(GenerateArgs),
    /// Check a configuration and survey without running anything.
    Validate(ValidateArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Simulation configuration (.json or .toml).
    #[arg(long)]
    pub config: PathBuf,
    /// Survey document (.csv, .json or .toml).
    #[arg(long)]
    pub survey: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration's run_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue the run described by this manifest.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use the mock provider instead of the configured one.
    #[arg(long)]
    pub mock: bool,
    /// Mock behaviour (JSON); implies --mock.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Population table (.csv or .json) to use instead of sampling one.
    #[arg(long)]
    pub population: Option<PathBuf>,
    /// Let time jump forward whenever every task is waiting. Only
    /// meaningful with the mock provider.
    #[arg(long)]
    pub simulated_clock: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Profile schema (.json or .toml).
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub survey: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory for accounts and simulation data.
    #[arg(long)]
    pub data: PathBuf,
    /// Behaviour of the `mock` provider (JSON).
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
}

/// A command that stopped early, with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub message: String,
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        exit: Exit::Invalid,
        message: message.into(),
    }
}

fn fatal(message: impl std::fmt::Display) -> Failure {
    Failure {
        exit: Exit::Fatal,
        message: message.to_string(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

/// Reads JSON or TOML by file extension.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| invalid(format!("{}: not UTF-8", path.display())))?;
    let parsed = if extension(path) == "toml" {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn read_survey(path: &Path) -> Result<SurveySpec, Failure> {
    let format = match extension(path).as_str() {
        "csv" | "tsv" => SurveyFormat::DelimitedTable,
        _ => SurveyFormat::StructuredText,
    };
    parse_survey_document(&read(path)?, format).map_err(|e| invalid(format!("{}:\n{e}", path.display())))
}

/// Every problem with a configuration and survey, checked against the
/// provider the run would use.
pub fn check_inputs(config: &SimulationConfig, survey: &SurveySpec, script: MockScript) -> ValidationReport {
    let registry = standard_registry(RuntimeClock::shared(), script);
    let mut report = survey.validate();
    match registry.create(config) {
        Ok(p) => report.extend(validate_config_for(config, &p.caps())),
        Err(e) => {
            report.push("provider_id", e.detail);
            report.extend(validate_config_for(config, &Default::default()));
        }
    }
    report
}

pub fn dispatch(cli: Cli) -> Exit {
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::GenerateProfiles(args) => cmd_generate_profiles(&args),
        Command::Validate(args) => cmd_validate(&args),
        Command::Serve(args) => cmd_serve(&args),
    };
    match result {
        Ok(exit) => exit,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.exit
        }
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<Exit, Failure> {
    let config: SimulationConfig = read_document(&args.config)?;
    let survey = read_survey(&args.survey)?;
    let report = check_inputs(&config, &survey, MockScript::default());
    if report.is_empty() {
        println!("ok: {} agents x {} questions", config.population_size, survey.len());
        Ok(Exit::Success)
    } else {
        Err(invalid(format!("{} problem(s)\n{report}", report.len())))
    }
}

pub fn cmd_generate_profiles(args: &GenerateArgs) -> Result<Exit, Failure> {
    let schema: ProfileSchema = read_document(&args.schema)?;
    let report = validate_schema(&schema);
    if !report.is_empty() {
        return Err(invalid(report.to_string()));
    }
    let population = generate_population(&schema, args.n, args.seed).map_err(|e| invalid(e.to_string()))?;
    fs::write(&args.out, population_to_csv(&schema, &population)).map_err(|e| fatal(format!("{}: {e}", args.out.display())))?;
    Ok(Exit::Success)
}

fn runtime(simulated: bool) -> Result<tokio::runtime::Runtime, Failure> {
    let built = if simulated {
        tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .start_paused(true)
            .build()
    } else {
        tokio::runtime::Builder::new_multi_thread().enable_all().build()
    };
    built.map_err(fatal)
}

/// Run id derived from the configuration, so identical inputs produce
/// identical output directories.
pub fn run_id_for(config_hash: &str) -> String {
    format!("run-{}", &config_hash[..config_hash.len().min(16)])
}

pub fn cmd_run(args: &RunArgs) -> Result<Exit, Failure> {
    let mut config: SimulationConfig = read_document(&args.config)?;
    if let Some(seed) = args.seed {
        config.run_seed = seed;
    }
    let script = match &args.mock_script {
        Some(p) => {
            let s: MockScript = read_document(p)?;
            s.validate().map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            s
        }
        None => MockScript::default(),
    };
    if args.mock || args.mock_script.is_some() {
        config.provider_id = "mock".into();
    }
    let survey = read_survey(&args.survey)?;
    let report = check_inputs(&config, &survey, script.clone());
    if !report.is_empty() {
        return Err(invalid(format!("{} problem(s)\n{report}", report.len())));
    }
    let population = match &args.population {
        Some(p) => {
            let format = if extension(p) == "json" { "json" } else { "csv" };
            let pop = panelsim_core::profile::load_population(&config.profile_schema, &read(p)?, format)
                .map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            config.population_size = pop.len();
            Some(pop)
        }
        None => None,
    };

    fs::create_dir_all(&args.out).map_err(fatal)?;
    let store = Arc::new(SimulationStore::open(args.out.join(STORE_DIR)).map_err(fatal)?);
    let (run_id, resume) = match &args.resume {
        Some(path) => {
            let manifest: RunManifest = read_document(path)?;
            let meta = store
                .run_meta(LOCAL_USER, &manifest.run_id)
                .map_err(|_| invalid(format!("{} has no stored run {}", args.out.display(), manifest.run_id)))?;
            if meta.config_hash != manifest.config_hash {
                return Err(invalid("manifest was produced by a different configuration"));
            }
            if store.latest_manifest(LOCAL_USER, &manifest.run_id).map_err(fatal)?.is_none() {
                store.save_manifest(LOCAL_USER, &manifest.run_id, &manifest).map_err(fatal)?;
            }
            (manifest.run_id, true)
        }
        None => {
            let meta = new_run_meta("pending", LOCAL_USER, config.clone(), survey.clone(), 0);
            let run_id = run_id_for(&meta.config_hash);
            if store.run_owner(&run_id).is_some() {
                return Err(invalid(format!(
                    "{} already holds this run; pass --resume {}",
                    args.out.display(),
                    args.out.join(MANIFEST_FILE).display()
                )));
            }
            let clock = RuntimeClock::shared();
            let meta = new_run_meta(&run_id, LOCAL_USER, config.clone(), survey, clock.unix_secs());
            store.create_run(meta).map_err(fatal)?;
            if let Some(pop) = population {
                store.save_population(LOCAL_USER, &run_id, Arc::new(pop)).map_err(fatal)?;
            }
            (run_id, false)
        }
    };
    store
        .update_run(LOCAL_USER, &run_id, |m| m.state = RunState::Running)
        .map_err(fatal)?;

    let rt = runtime(args.simulated_clock)?;
    let outcome = rt.block_on(drive(Arc::clone(&store), &run_id, &config, script, &args.out, resume));
    let (state, error) = match &outcome {
        Ok(o) => (terminal_state(o), failure_reason(o)),
        Err(e) => (RunState::Failed, Some(e.clone())),
    };
    store
        .update_run(LOCAL_USER, &run_id, |m| {
            m.state = state;
            m.error = error.clone();
        })
        .map_err(fatal)?;
    write_outputs(&store, &run_id, &args.out)?;

    let manifest_path = args.out.join(MANIFEST_FILE);
    match (outcome, state) {
        (Ok(_), RunState::Completed) => {
            println!("completed: {}", args.out.join(RESULTS_FILE).display());
            Ok(Exit::Success)
        }
        (Ok(_), _) => {
            eprintln!("run {}: {}", state.name(), error.unwrap_or_default());
            println!("partial results; manifest: {}", manifest_path.display());
            Ok(Exit::Partial)
        }
        (Err(e), _) => {
            if manifest_path.exists() {
                println!("manifest: {}", manifest_path.display());
            }
            Err(fatal(e))
        }
    }
}

async fn drive(
    store: Arc<SimulationStore>,
    run_id: &str,
    config: &SimulationConfig,
    script: MockScript,
    out: &Path,
    resume: bool,
) -> Result<panelsim_core::RunOutcome, String> {
    let clock: SharedClock = RuntimeClock::shared();
    let provider = standard_registry(Arc::clone(&clock), script)
        .create(config)
        .map_err(|e| e.to_string())?;
    let hub = Arc::new(MetricsHub::new(run_id, config.pricing.clone(), Arc::clone(&clock)));
    let mut snapshots = Box::pin(hub.subscribe());
    let metrics_path = out.join(METRICS_FILE);
    let writer = tokio::spawn(async move {
        let mut lines = String::new();
        while let Some(s) = snapshots.next().await {
            lines.push_str(&serde_json::to_string(&s).expect("snapshot serializes"));
            lines.push('\n');
        }
        fs::write(metrics_path, lines)
    });

    let control = RunControl::new();
    let on_interrupt = control.clone();
    let interrupt = tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("interrupted; stopping after in-flight requests");
            on_interrupt.cancel();
        }
    });
    let driver = RunDriver {
        store,
        user_id: LOCAL_USER.to_owned(),
        run_id: run_id.to_owned(),
        provider,
        clock: Arc::clone(&clock),
        metrics: hub.clone(),
        control,
    };
    let result = driver.drive(resume).await.map_err(|e| e.to_string());
    interrupt.abort();
    if !hub.snapshot().terminal {
        hub.record(clock.now(), MetricsEvent::Finished);
    }
    drop(hub);
    match tokio::time::timeout(Duration::from_secs(5), writer).await {
        Ok(Ok(Ok(()))) => {}
        Ok(Ok(Err(e))) => eprintln!("warning: metrics not written: {e}"),
        _ => eprintln!("warning: metrics writer did not finish"),
    }
    result
}

fn write_outputs(store: &SimulationStore, run_id: &str, out: &Path) -> Result<(), Failure> {
    let files = [
        (RESULTS_FILE, ExportFormat::Csv),
        (RESULTS_JSONL_FILE, ExportFormat::Jsonl),
        (MANIFEST_FILE, ExportFormat::Manifest),
    ];
    for (name, format) in files {
        match store.export(LOCAL_USER, run_id, format) {
            Ok(bytes) => fs::write(out.join(name), bytes).map_err(fatal)?,
            Err(e) if format == ExportFormat::Manifest => eprintln!("warning: no manifest: {e}"),
            Err(e) => return Err(fatal(e)),
        }
    }
    fs::write(out.join(DIRECTIVE_FILE), format!("{FORMAT_DIRECTIVE_VERSION}\n")).map_err(fatal)?;
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs) -> Result<Exit, Failure> {
    let script = match &args.mock_script {
        Some(p) => read_document(p)?,
        None => MockScript::default(),
    };
    let rt = runtime(false)?;
    rt.block_on(async {
        let clock = RuntimeClock::shared();
        let credentials = CredentialStore::open(
            Some(args.data.join("credentials")),
            HashCost::default(),
            Arc::clone(&clock),
            Duration::from_secs(12 * 3600),
        )
        .map_err(fatal)?;
        let store = Arc::new(SimulationStore::open(&args.data).map_err(fatal)?);
        let providers = standard_registry(Arc::clone(&clock), script);
        let state = panelsim_service::AppState::new(credentials, store, providers, clock);
        let listener = tokio::net::TcpListener::bind(&args.addr).await.map_err(fatal)?;
        tracing::info!(addr = %args.addr, "listening");
        panelsim_service::serve(listener, state).await.map_err(fatal)?;
        Ok(Exit::Success)
    })
}
