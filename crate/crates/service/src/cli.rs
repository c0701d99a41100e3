//! Batch commands. Each stage reads what the previous ones wrote to `--out`.

use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use dxloop_core::bench::{evaluate_system, sample_capability, simulate_visit, write_traces_csv};
use dxloop_core::cohort::{generate_with_table, load_cohort, split_clinical_aibench, Partition, SplitMode};
use dxloop_core::indicators::IndicatorTable;
use dxloop_core::pipeline::{
    apply_labels, build_examples, fit_openmax_bank, label_examples, train_backbones, train_exam_heads, PipelineConfig,
};
use dxloop_core::policy::PolicyEngine;

use crate::api::{router, ApiState};
use crate::artifacts::{self, ArtifactDir, Stage};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    RealWorld,
    Closed,
}

impl From<ModeArg> for SplitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::RealWorld => SplitMode::RealWorld,
            ModeArg::Closed => SplitMode::Closed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dxloop", version, about = "Open-set sequential diagnosis: training pipeline and session service")]
pub struct Cli {
    /// Pipeline configuration (JSON); omitted fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "PATH", default_value = "artifacts")]
    pub out: PathBuf,
    /// Indicator range table (JSON list of rows) replacing the shipped one.
    #[arg(long, global = true, value_name = "PATH")]
    pub indicators: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    GenCohort,
    /// Split the cohort into train, validation and test subjects.
    Split,
    /// Train the backbones' diagnosis branch.
    Train,
    /// Label next examinations and train the exam heads on them.
    LabelExams {
        /// Reuse an existing label file instead of relabeling.
        #[arg(long)]
        reuse: bool,
    },
    /// Calibrate the open-set layer on the training partition.
    FitOpenmax,
    /// Simulate the test partition and write report.json and traces.csv.
    Evaluate,
    /// Run sessions for every visit of a cohort file.
    Simulate {
        /// Cohort to simulate; defaults to the generated one.
        #[arg(long, value_name = "PATH")]
        cohort: Option<PathBuf>,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Append accepted requests to this JSONL file.
        #[arg(long, value_name = "PATH")]
        audit: Option<PathBuf>,
    },
}

/// Configuration after applying `--config`, `--mode` and `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::artifact(path, e))?;
            serde_json::from_str::<PipelineConfig>(&text).map_err(|e| CliError::artifact(path, e))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(mode) = cli.mode {
        config = config.with_mode(mode.into());
    }
    let seed = cli.seed.unwrap_or(config.seed);
    let config = config.seeded(seed);
    validate(&config)?;
    Ok(config)
}

fn validate(config: &PipelineConfig) -> Result<(), CliError> {
    let invalid = |m: &str| Err(CliError::Invalid(format!("config: {m}")));
    let t = &config.train;
    if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
        return invalid("train.learning_rate must be positive");
    }
    if t.batch_size == 0 || t.hidden == 0 {
        return invalid("train.batch_size and train.hidden must be positive");
    }
    if config.cohort.width == 0 {
        return invalid("cohort.width must be positive");
    }
    let a = config.evaluation.availability;
    if !(0.0..=1.0).contains(&a) {
        return invalid("evaluation.availability must lie in [0, 1]");
    }
    config.policy.thresholds.validate().map_err(|e| CliError::Invalid(format!("config: {e}")))?;
    Ok(())
}

fn indicator_table(cli: &Cli) -> Result<IndicatorTable, CliError> {
    match &cli.indicators {
        Some(path) => IndicatorTable::load(path).map_err(|e| CliError::artifact(path, e)),
        None => Ok(IndicatorTable::default()),
    }
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(&cli)?;
    let table = indicator_table(&cli)?;
    let dir = ArtifactDir::new(&cli.out);
    dir.create()?;
    match cli.command {
        Command::GenCohort => {
            let cohort = generate_with_table(&config.cohort, &table)?;
            wrote(&dir.save_cohort(&cohort)?);
        }
        Command::Split => {
            let cohort = dir.load_cohort()?;
            let split = split_clinical_aibench(&cohort, config.mode, config.split_seed())?;
            wrote(&dir.save_split(&split)?);
        }
        Command::Train => {
            let (cohort, split) = (dir.load_cohort()?, dir.load_split()?);
            let examples = build_examples(&cohort, &split, Partition::Train, &config)?;
            let backbones = train_backbones(&examples, &config)?;
            dir.save_backbones(Stage::One, &backbones)?.iter().filter(|p| p.exists()).for_each(|p| wrote(p));
        }
        Command::LabelExams { reuse } => {
            let (cohort, split) = (dir.load_cohort()?, dir.load_split()?);
            let mut examples = build_examples(&cohort, &split, Partition::Train, &config)?;
            let backbones = dir.load_backbones(Stage::One)?;
            if reuse {
                let records = dir.load_labels()?;
                let applied = apply_labels(&mut examples, &records);
                if applied != examples.len() {
                    return Err(CliError::Invalid(format!(
                        "{} covers {applied} of {} training strategies; relabel without --reuse",
                        dir.path(artifacts::LABELS).display(),
                        examples.len()
                    )));
                }
            } else {
                let records = label_examples(&mut examples, &backbones)?;
                wrote(&dir.save_labels(&records)?);
            }
            let trained = train_exam_heads(backbones, &examples, &config)?;
            dir.save_backbones(Stage::Two, &trained)?.iter().filter(|p| p.exists()).for_each(|p| wrote(p));
        }
        Command::FitOpenmax => {
            let (cohort, split) = (dir.load_cohort()?, dir.load_split()?);
            let backbones = dir.load_backbones(Stage::Two)?;
            let examples = build_examples(&cohort, &split, Partition::Train, &config)?;
            let bank = fit_openmax_bank(&cohort, &examples, &backbones, &table, &config)?;
            println!("{} indicator profiles calibrated", bank.calibrated());
            wrote(&dir.save_openmax(&bank)?);
        }
        Command::Evaluate => {
            let model = dir.load_engine_model(&table)?;
            let (cohort, split) = (dir.load_cohort()?, dir.load_split()?);
            let engine = PolicyEngine::new(model, config.policy.clone()).map_err(dxloop_core::Error::from)?;
            let (report, traces) = evaluate_system(&cohort, &split, &engine, &table, &config.evaluation)?;
            let json = report.to_json()?;
            wrote(&dir.write_bytes(artifacts::REPORT, json.as_bytes())?);
            let mut csv = Vec::new();
            write_traces_csv(&mut csv, &traces)?;
            wrote(&dir.write_bytes(artifacts::TRACES, &csv)?);
            print!("{}", report.summary_table());
        }
        Command::Simulate { cohort } => simulate(&dir, cohort.as_deref(), &config, &table)?,
        Command::Serve { listen, audit } => serve(&dir, listen, audit.as_deref(), &config, table)?,
    }
    Ok(())
}

fn simulate(dir: &ArtifactDir, cohort: Option<&Path>, config: &PipelineConfig, table: &IndicatorTable) -> Result<(), CliError> {
    let model = dir.load_engine_model(table)?;
    let cohort = match cohort {
        Some(path) => load_cohort(path).map_err(|e| CliError::artifact(path, e))?,
        None => dir.load_cohort()?,
    };
    let engine = PolicyEngine::new(model, config.policy.clone()).map_err(dxloop_core::Error::from)?;
    let path = dir.path(artifacts::SIMULATION);
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let mut sessions = 0;
    for subject in &cohort.subjects {
        for visit in &subject.visits {
            let capability = sample_capability(&config.evaluation, visit);
            let trace = simulate_visit(&engine, subject.history_before(visit.visit_index), visit, capability, table)?;
            serde_json::to_writer(&mut out, &trace).map_err(|e| CliError::runtime(&path, e))?;
            out.write_all(b"\n").map_err(|e| CliError::io(&path, e))?;
            sessions += 1;
        }
    }
    out.flush().map_err(|e| CliError::io(&path, e))?;
    println!("{sessions} sessions simulated");
    wrote(&path);
    Ok(())
}

fn serve(
    dir: &ArtifactDir,
    listen: SocketAddr,
    audit: Option<&Path>,
    config: &PipelineConfig,
    table: IndicatorTable,
) -> Result<(), CliError> {
    let model = dir.load_engine_model(&table)?;
    let width = model.main.width;
    let engine = PolicyEngine::new(model, config.policy.clone()).map_err(dxloop_core::Error::from)?;
    let mut state = ApiState::new(engine, table, width);
    if let Some(path) = audit {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        state = state.with_audit(Box::new(BufWriter::new(file)));
    }
    let app = router(Arc::new(state));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(format!("runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| CliError::Runtime(format!("bind {listen}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        tracing::info!(%local, "serving /v1");
        println!("listening on {local}");
        axum::serve(listener, app)
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(|e| CliError::Runtime(format!("server: {e}")))
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            tracing::warn!(error = %e, "cannot listen for ctrl-c");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
    tracing::info!("shutting down after in-flight requests");
}
