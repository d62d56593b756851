use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cshi_core::crs::{BuiltinCrs, CrsAdapter, CrsFactory, ExternalCrs};
use cshi_core::dataset::Dataset;
use cshi_core::domain::Catalog;
use cshi_core::harness::{
    audit_records, build_report, plan_annotated, plan_fresh, read_sessions, run_sessions, write_outputs,
    DenominatorPolicy, FailureTurns, Mode, RunContext, ScenarioConfig, SimulatorKind,
};
use cshi_core::llm::{open_replay, ChatBackend, RemoteBackend, RemoteConfig, ReplayMode, ScriptedBackend};
use cshi_core::plugins::{build_pipeline, default_pipeline_config};
use cshi_core::prompts::PromptTemplates;

/// Exit code when a run or metrics call has no sessions to report on.
const EXIT_EMPTY: u8 = 3;

#[derive(Parser)]
#[command(name = "cshi", version, about = "LLM user simulator for evaluating conversational recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate sessions against a CRS and write report.json, sessions.jsonl and per_turn.csv.
    Run(RunArgs),
    /// Re-run the leakage audit over archived sessions.
    Audit {
        #[arg(long)]
        sessions: PathBuf,
        /// Write the refreshed flags back to the file.
        #[arg(long)]
        write: bool,
    },
    /// Recompute metrics from archived sessions.
    Metrics {
        #[arg(long)]
        sessions: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
        #[arg(long, value_enum, default_value_t = ScenarioArg::Fresh)]
        scenario: ScenarioArg,
        #[arg(long)]
        max_turns: Option<u32>,
        /// Directory for report.json and per_turn.csv; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve live sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Fresh,
    Annotated,
}

impl From<ScenarioArg> for Mode {
    fn from(s: ScenarioArg) -> Mode {
        match s {
            ScenarioArg::Fresh => Mode::Fresh,
            ScenarioArg::Annotated => Mode::Annotated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SimulatorArg {
    Cshi,
    CshiNofilter,
    SinglePrompt,
    SinglePromptUi,
}

impl From<SimulatorArg> for SimulatorKind {
    fn from(s: SimulatorArg) -> SimulatorKind {
        match s {
            SimulatorArg::Cshi => SimulatorKind::Cshi,
            SimulatorArg::CshiNofilter => SimulatorKind::CshiNofilter,
            SimulatorArg::SinglePrompt => SimulatorKind::SinglePrompt,
            SimulatorArg::SinglePromptUi => SimulatorKind::SinglePromptUi,
        }
    }
}

#[derive(Args)]
struct MetricArgs {
    /// Cutoffs for Recall@k, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Drop leaked successes from the denominator instead of counting them as failures.
    #[arg(long)]
    shrink: bool,
    /// Leave failed sessions out of the average turn count.
    #[arg(long)]
    exclude_failures: bool,
}

impl MetricArgs {
    fn apply(&self, cfg: &mut ScenarioConfig) {
        if let Some(k) = &self.k {
            cfg.k_values = k.clone();
        }
        if self.shrink {
            cfg.denominator = DenominatorPolicy::Shrink;
        }
        if self.exclude_failures {
            cfg.failure_turns = FailureTurns::Exclude;
        }
    }
}

#[derive(Args)]
struct Backend {
    /// `scripted:PATH` for a rule file, or `remote` for an OpenAI-compatible endpoint.
    #[arg(long, default_value = "remote")]
    backend: String,
    #[arg(long, default_value = "https://api.openai.com/v1")]
    llm_url: String,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Requests per minute; 0 disables throttling.
    #[arg(long, default_value_t = 60)]
    rpm: u32,
    /// Record every completion to this file (calls go through to the backend).
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Answer every completion from a recorded file; misses are errors.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// `builtin`, or the URL of an external CRS endpoint.
    #[arg(long, default_value = "builtin")]
    crs: String,
    /// Directory of prompt template overrides (`<name>.txt`).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Plugin pipeline configuration (JSON).
    #[arg(long)]
    plugins: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::Fresh)]
    scenario: ScenarioArg,
    /// Full scenario configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long)]
    conversations: Option<PathBuf>,
    #[command(flatten)]
    backend: Backend,
    #[arg(long, value_enum)]
    simulator: Option<SimulatorArg>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    k2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_turns: Option<u32>,
    /// Held-out ratings per user (fresh scenario).
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    metrics: MetricArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    items: PathBuf,
    #[command(flatten)]
    backend: Backend,
    /// Default scenario configuration for new sessions (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "sessions")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Require `Authorization: Bearer <token>` on every request.
    #[arg(long, env = "CSHI_TOKEN")]
    token: Option<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn context(b: &Backend, catalog: Catalog, temperature: f64) -> Result<RunContext> {
    let llm: Arc<dyn ChatBackend> = if let Some(path) = b.backend.strip_prefix("scripted:") {
        Arc::new(ScriptedBackend::from_path(Path::new(path))?)
    } else if b.backend == "remote" {
        let mut cfg = RemoteConfig::new(&b.llm_url, &b.model);
        cfg.api_key_env = b.api_key_env.clone();
        cfg.requests_per_minute = b.rpm;
        Arc::new(RemoteBackend::new(cfg))
    } else {
        bail!("--backend must be `remote` or `scripted:PATH`, got {:?}", b.backend);
    };
    let llm = match (&b.record, &b.replay) {
        (Some(p), _) => open_replay(ReplayMode::Record, p, llm)?,
        (_, Some(p)) => open_replay(ReplayMode::Replay, p, llm)?,
        _ => llm,
    };
    let templates = Arc::new(match &b.templates {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    });
    let pipeline = match &b.plugins {
        Some(p) => build_pipeline(&read_json(p)?)?,
        None => build_pipeline(&default_pipeline_config())?,
    };
    let crs: CrsFactory = if b.crs == "builtin" {
        let (llm, templates) = (llm.clone(), templates.clone());
        Arc::new(move || {
            Box::new(BuiltinCrs::new(llm.clone(), templates.clone()).with_temperature(temperature)) as Box<dyn CrsAdapter>
        })
    } else if b.crs.starts_with("http://") || b.crs.starts_with("https://") {
        let url = b.crs.clone();
        Arc::new(move || Box::new(ExternalCrs::new(url.clone())) as Box<dyn CrsAdapter>)
    } else {
        bail!("--crs must be `builtin` or an http(s) URL, got {:?}", b.crs);
    };
    Ok(RunContext {
        catalog: Arc::new(catalog),
        llm,
        templates,
        pipeline: Arc::new(pipeline),
        crs,
    })
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::for_mode(args.scenario.into()),
    };
    if let Some(s) = args.simulator {
        cfg.simulator = s.into();
    }
    if let Some(k1) = args.k1 {
        cfg.split.k1 = k1;
    }
    if let Some(k2) = args.k2 {
        cfg.split.k2 = k2;
    }
    if cfg.split.k1 < 0.0 || cfg.split.k2 < 0.0 || cfg.split.k1 + cfg.split.k2 > 1.0 + 1e-9 {
        bail!("k1 and k2 must be non-negative with k1 + k2 <= 1");
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(t) = args.max_turns {
        cfg.max_turns = t;
    }
    if let Some(h) = args.holdout {
        cfg.holdout = h;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    args.metrics.apply(&mut cfg);

    let data = Dataset::load(args.items.as_deref(), args.ratings.as_deref(), args.conversations.as_deref())?;
    let catalog = Catalog::new(data.items.clone())?;
    let specs = match cfg.mode {
        Mode::Fresh => plan_fresh(&data, &catalog, cfg.holdout)?,
        Mode::Annotated => plan_annotated(&data, &catalog)?,
    };
    tracing::info!(sessions = specs.len(), "planned");
    let ctx = context(&args.backend, catalog, cfg.temperature)?;
    let records = run_sessions(&ctx, &cfg, specs);
    let report = build_report(&records, &cfg);
    write_outputs(&args.out, &report, &records)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.is_empty() {
        eprintln!("no sessions to evaluate");
        return Ok(ExitCode::from(EXIT_EMPTY));
    }
    Ok(ExitCode::SUCCESS)
}

fn audit(sessions: &Path, write: bool) -> Result<ExitCode> {
    let mut records = read_sessions(sessions)?;
    audit_records(&mut records);
    let history = records.iter().filter(|r| r.state.leakage.history_leak).count();
    let response = records.iter().filter(|r| r.state.leakage.response_leak).count();
    for r in records.iter().filter(|r| !r.state.leakage.evidence.is_empty()) {
        println!("{}", serde_json::json!({"session_id": r.state.session_id, "leakage": r.state.leakage}));
    }
    println!(
        "{}",
        serde_json::json!({"sessions": records.len(), "history_leaks": history, "response_leaks": response})
    );
    if write {
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(sessions, out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn metrics(
    sessions: &Path,
    args: &MetricArgs,
    scenario: ScenarioArg,
    max_turns: Option<u32>,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let records = read_sessions(sessions)?;
    let mut cfg = ScenarioConfig::for_mode(scenario.into());
    // Sessions remember their own turn cap.
    cfg.max_turns = max_turns
        .or_else(|| records.iter().map(|r| r.state.max_turns).max())
        .unwrap_or(cfg.max_turns);
    args.apply(&mut cfg);
    let report = build_report(&records, &cfg);
    match out {
        Some(dir) => write_outputs(dir, &report, &records)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if report.is_empty() {
        eprintln!("no sessions to evaluate");
        return Ok(ExitCode::from(EXIT_EMPTY));
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let data = Dataset::load(Some(&args.items), None, None)?;
    let catalog = Catalog::new(data.items)?;
    let defaults = match &args.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::fresh(),
    };
    let ctx = context(&args.backend, catalog, defaults.temperature)?;
    let service = Arc::new(cshi_service::SessionService::open(ctx, defaults, &args.data_dir)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        cshi_service::serve(listener, service, args.token).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Audit { sessions, write } => audit(&sessions, write),
        Command::Metrics {
            sessions,
            metrics: m,
            scenario,
            max_turns,
            out,
        } => metrics(&sessions, &m, scenario, max_turns, out.as_deref()),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
