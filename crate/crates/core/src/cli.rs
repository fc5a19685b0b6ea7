//! Command-line front end: dataset generation, protocol runs, standalone
//! evaluation and the self-check suite.
//!
//! Exit codes: 0 success, 1 self-check failure, 2 configuration or input
//! error, 3 training failure, 4 evaluation failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ProtocolKind};
use crate::data::{default_domain_specs, generate_domain, io, DataError, DomainDataset, SyntheticDomainSpec};
use crate::encoder::{load_params, EncoderConfig, EncoderError};
use crate::eval::{self, EvalError, EvalReport, RecallMatrix};
use crate::selfcheck;
use crate::trainer::{checkpoint, run_protocol_with, LogRecord, RunLog, SeedEcho, TrainError};

#[derive(Debug, Parser)]
#[command(name = "pcpr", version, about = "Incremental point-cloud place recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic domains on disk.
    GenData {
        /// JSON domain spec, or a list of them. Defaults to the four built-in domains.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training protocol.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Step checkpoint directory to continue from.
        #[arg(long)]
        resume_from: Option<PathBuf>,
    },
    /// Evaluate a parameter checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; repeat for several domains.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        /// Treat the last manifest as a held-out domain.
        #[arg(long)]
        zero_shot: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,25")]
        recall_n: Vec<usize>,
        /// Experiment config whose encoder the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the report; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient, invariance and metric self-checks.
    Selfcheck,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error("self-check failed: {0}")]
    Selfcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Selfcheck(_) => 1,
            CliError::Config(_) => 2,
            CliError::Train(_) => 3,
            CliError::Eval(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        CliError::Eval(e.to_string())
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out } => gen_data(spec.as_deref(), &out).map(|_| ()),
        Command::Train {
            config,
            out,
            resume_from,
        } => train(&config, out.as_deref(), resume_from.as_deref()).map(|_| ()),
        Command::Eval {
            checkpoint,
            manifest,
            zero_shot,
            recall_n,
            config,
            out,
        } => {
            let report = evaluate(&checkpoint, &manifest, zero_shot, &recall_n, config.as_deref())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => write_file(&path, &json).map_err(CliError::Eval)?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Selfcheck => {
            let report = selfcheck::run();
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("{:.1} s", report.seconds);
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|c| c.name).collect();
                Err(CliError::Selfcheck(names.join(", ")))
            }
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_specs(path: &Path) -> Result<Vec<SyntheticDomainSpec>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Writes one dataset directory per domain, named after the domain.
pub fn gen_data(spec: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let specs = match spec {
        Some(p) => parse_specs(p)?,
        None => default_domain_specs(),
    };
    for s in &specs {
        s.validate()?;
    }
    let mut manifests = Vec::new();
    for s in &specs {
        let dataset = generate_domain(s)?;
        let path = io::save_dataset(&dataset, &out.join(&s.name))?;
        println!(
            "{}: {} train, {} database, {} queries -> {}",
            dataset.name,
            dataset.train.len(),
            dataset.test_database.len(),
            dataset.test_queries.len(),
            path.display()
        );
        manifests.push(path);
    }
    Ok(manifests)
}

/// Output file names inside the run directory.
pub const REPORT_FILE: &str = "report.json";
pub const MATRIX_FILE: &str = "recall_matrix.csv";
pub const RUNLOG_FILE: &str = "runlog.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.json";

pub fn train(config_path: &Path, out: Option<&Path>, resume_from: Option<&Path>) -> Result<EvalReport, CliError> {
    let raw = ExperimentConfig::load(config_path)?;
    let config = raw.resolved()?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .ok_or_else(|| CliError::Config("no output directory (use --out)".into()))?;
    let domains = config.load_domains()?;
    let holdout = config.load_holdout()?;
    fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    let echo = serde_json::to_value(&config).expect("config serializes");
    write_file(&out.join(CONFIG_ECHO_FILE), &serde_json::to_string_pretty(&echo).expect("json"))
        .map_err(CliError::Config)?;

    let (resume, mut log) = match resume_from {
        Some(dir) => {
            let (resume, log) = checkpoint::read_step(dir, &domains, &config.encoder)
                .map_err(|e| CliError::Config(format!("cannot resume: {e}")))?;
            (Some(resume), log)
        }
        None => {
            let mut log = RunLog::default();
            log.records.push(LogRecord::Header {
                seeds: SeedEcho {
                    root: config.seed,
                    encoder: config.encoder.seed,
                    trainer: config.train.seed,
                },
                config: echo.clone(),
            });
            (None, log)
        }
    };
    let result = run_protocol_with(
        &domains,
        &config.encoder,
        &config.train,
        config.protocol.training_protocol(),
        resume,
        &mut log,
        &mut |view| checkpoint::write_step(&out, view, &domains, &echo).map(|_| ()),
    );
    let flush = |log: &RunLog| write_file(&out.join(RUNLOG_FILE), &log.to_jsonl());
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            flush(&log).map_err(CliError::Train)?;
            return Err(CliError::Train(e.to_string()));
        }
    };
    flush(&log).map_err(CliError::Train)?;
    outcome.matrix.write_csv(&out.join(MATRIX_FILE))?;

    let groups: Vec<Vec<&DomainDataset>> = outcome
        .groups
        .iter()
        .map(|g| g.iter().map(|&d| &domains[d]).collect())
        .collect();
    let curves = eval::evaluate_groups(&outcome.state.student, &groups, &config.recall_n)?;
    let zero_shot = match (&holdout, config.protocol) {
        (Some(h), ProtocolKind::ZeroShot) => {
            let seen: Vec<&DomainDataset> = domains.iter().collect();
            Some(eval::zero_shot(&outcome.state.student, h, &seen, 1)?.recall.recall)
        }
        _ => None,
    };
    let report = EvalReport::assemble(Some(&outcome.matrix), &curves, zero_shot)?;
    report.write_json(&out.join(REPORT_FILE))?;
    println!("mR@1 {:.2}", report.mr_at_1.unwrap_or(f64::NAN));
    match report.forgetting {
        Some(f) => println!("F {f:.2}"),
        None => println!("F undefined (single step)"),
    }
    if let Some(z) = report.zero_shot {
        println!("zero-shot R@1 {z:.2}");
    }
    Ok(report)
}

/// Standalone evaluation. When the checkpoint sits in a step directory whose
/// recorded domains match the given manifests, earlier recall rows are
/// reused so forgetting is reported; the final row is recomputed.
pub fn evaluate(
    checkpoint_path: &Path,
    manifests: &[PathBuf],
    zero_shot: bool,
    recall_n: &[usize],
    config: Option<&Path>,
) -> Result<EvalReport, CliError> {
    if recall_n.is_empty() || recall_n.contains(&0) {
        return Err(CliError::Config("--recall-n needs values >= 1".into()));
    }
    let step_dir = checkpoint_path.parent().unwrap_or(Path::new("."));
    let expected: Option<EncoderConfig> = match config {
        Some(p) => Some(ExperimentConfig::load(p)?.encoder),
        None => {
            let echo = step_dir.join(checkpoint::CONFIG_FILE);
            if echo.is_file() {
                Some(ExperimentConfig::load(&echo)?.encoder)
            } else {
                None
            }
        }
    };
    let params = load_params(checkpoint_path, expected.as_ref())?;
    let datasets: Vec<DomainDataset> = manifests
        .iter()
        .map(|m| io::load_dataset(m))
        .collect::<Result<_, _>>()?;
    let (seen, holdout) = match (zero_shot, datasets.split_last()) {
        (true, Some((h, rest))) => (rest, Some(h)),
        _ => (&datasets[..], None),
    };

    let mut ns: Vec<usize> = recall_n.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let state = step_dir
        .join(checkpoint::STATE_FILE)
        .is_file()
        .then(|| checkpoint::read_step_manifest(step_dir))
        .transpose()
        .map_err(|e| CliError::Eval(e.to_string()))?;
    let history = state.filter(|s| {
        let mut recorded: Vec<u32> = s.groups[..s.step].iter().flatten().copied().collect();
        let mut given: Vec<u32> = seen.iter().map(|d| d.domain_id).collect();
        recorded.sort_unstable();
        given.sort_unstable();
        recorded == given
    });
    let (matrix, groups): (Option<RecallMatrix>, Vec<Vec<&DomainDataset>>) = match history {
        Some(s) => {
            let groups: Vec<Vec<&DomainDataset>> = s.groups[..s.step]
                .iter()
                .map(|g| g.iter().map(|id| seen.iter().find(|d| d.domain_id == *id).unwrap()).collect())
                .collect();
            let last = eval::evaluate_groups(&params, &groups, &[1])?;
            let mut rows = s.rows[..s.step - 1].to_vec();
            rows.push(last.iter().map(|c| c[&1]).collect());
            (Some(RecallMatrix::from_rows(s.labels.clone(), rows)?), groups)
        }
        None if seen.is_empty() => (None, Vec::new()),
        None => {
            let groups: Vec<Vec<&DomainDataset>> = seen.iter().map(|d| vec![d]).collect();
            let labels: Vec<String> = seen.iter().map(|d| d.name.clone()).collect();
            let row = eval::evaluate_groups(&params, &groups, &[1])?;
            let mut m = RecallMatrix::new(vec![labels.join("+")]);
            m.push_row(vec![row.iter().map(|c| c[&1]).sum::<f64>() / row.len() as f64])?;
            (Some(m), groups)
        }
    };
    let mut curves = eval::evaluate_groups(&params, &groups, &ns)?;
    let zero = match holdout {
        Some(h) => {
            if seen.iter().any(|d| d.domain_id == h.domain_id || d.name == h.name) {
                log::warn!("protocol violation: holdout '{}' was seen in training", h.name);
            }
            if groups.is_empty() {
                let outcome = eval::evaluate_domain(&params, h, &ns)?;
                curves.push(outcome.iter().map(|(&n, r)| (n, r.recall)).collect::<BTreeMap<_, _>>());
            }
            Some(eval::evaluate_domain(&params, h, &[1])?[&1].recall)
        }
        None => None,
    };
    Ok(EvalReport::assemble(matrix.as_ref(), &curves, zero)?)
}
