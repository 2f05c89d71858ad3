//! `cmap` command-line front end.
//!
//! Exit status is 0 on success, 1 on a usage error (bad flag, invalid
//! configuration) and 2 on a data error (missing or malformed input file,
//! state that does not match its corpus).

mod config;

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use cmap::evaluation::{self, EvalError, RecoveryScore};
use cmap::generator::{self, GroundTruth};
use cmap::sampler::{self, FitOptions, HeldoutScore, SamplingMode};
use cmap::{Corpus, CorpusError, IterationStats, Model, ModelError, SamplerConfig};
use log::info;
use serde::Serialize;

use config::{Cli, Command, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::PeriodLength(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn data_err(path: &Path) -> impl FnOnce(CorpusError) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn model_err(path: &Path) -> impl FnOnce(ModelError) -> Failure + '_ {
    move |e| match e {
        ModelError::Config(_) => Failure::Usage(e.to_string()),
        _ => Failure::Data(format!("{}: {e}", path.display())),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::load(path).map_err(data_err(path))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os()))
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, S>(argv: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => config::resolve_generate(a).and_then(cmd_generate),
        Command::Fit(a) => config::resolve_fit(a).and_then(cmd_fit),
        Command::Evaluate(a) => config::resolve_evaluate(a).and_then(cmd_evaluate),
        Command::Export(a) => config::resolve_export(a).and_then(cmd_export),
        Command::Stats(a) => config::resolve_stats(a).and_then(cmd_stats),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

#[derive(Serialize)]
struct GenerateSummary {
    num_users: usize,
    num_interactions: usize,
    num_links: usize,
    flagged_checks: usize,
    checks: generator::EmpiricalReport,
}

fn cmd_generate(cfg: config::GenerateConfig) -> Result<(), Failure> {
    create_dir(&cfg.out)?;
    RunConfig::Generate(cfg.clone()).write(&cfg.out)?;
    let (corpus, truth) = generator::generate(&cfg.generator)?;
    let corpus_path = cfg.out.join("corpus.jsonl");
    corpus.save(&corpus_path).map_err(data_err(&corpus_path))?;
    let truth_path = cfg.out.join("truth.jsonl");
    truth.save(&truth_path).map_err(model_err(&truth_path))?;
    let checks = generator::empirical_check(&corpus, &truth)?;
    if checks.flagged() > 0 {
        log::warn!("{} empirical checks exceed their thresholds", checks.flagged());
    }
    write_json(
        &cfg.out.join("summary.json"),
        &GenerateSummary {
            num_users: corpus.num_users(),
            num_interactions: corpus.interactions().len(),
            num_links: corpus.links().len(),
            flagged_checks: checks.flagged(),
            checks,
        },
    )?;
    info!("wrote {} interactions to {}", corpus.interactions().len(), corpus_path.display());
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    mode: SamplingMode,
    iterations: u64,
    final_log_lik: f64,
    live_tables: usize,
    profile_occupancy: Vec<usize>,
    converged_at: Option<u64>,
    skipped_links: usize,
    train_eta_t: Option<f64>,
    train_s_n: Option<f64>,
    heldout: Option<HeldoutScore<f64>>,
    wall_seconds: f64,
}

/// Appends one JSON line per iteration, flushed so the file can be tailed.
struct MetricsLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self, Failure> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self { out: BufWriter::new(file), error: None })
    }

    fn record(&mut self, stats: &IterationStats) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(stats).expect("iteration stats serialize");
        if let Err(e) = writeln!(self.out, "{line}").and_then(|_| self.out.flush()) {
            self.error = Some(e);
        }
    }
}

fn cmd_fit(cfg: config::FitConfig) -> Result<(), Failure> {
    let start = Instant::now();
    let full = load_corpus(&cfg.corpus)?;
    create_dir(&cfg.out)?;
    RunConfig::Fit(cfg.clone()).write(&cfg.out)?;

    let (train, test) = if cfg.holdout > 0.0 {
        let (train, test) = full.split_holdout(cfg.holdout, cfg.seed).map_err(data_err(&cfg.corpus))?;
        let train_path = cfg.out.join("train.jsonl");
        train.save(&train_path).map_err(data_err(&train_path))?;
        let test_path = cfg.out.join("heldout.jsonl");
        test.save(&test_path).map_err(data_err(&test_path))?;
        (train, Some(test))
    } else {
        (full, None)
    };

    let sampler_config = SamplerConfig {
        num_profiles: cfg.profiles,
        num_topics: cfg.topics,
        seed: cfg.seed,
        init: cfg.init,
        gamma: cfg.gamma,
        delta: cfg.delta,
    };
    let mode = match cfg.batch_size {
        None => SamplingMode::Serial,
        Some(batch_size) => SamplingMode::Batch { batch_size, workers: cfg.workers },
    };
    let checkpoint_dir = cfg.out.join("checkpoints");
    if cfg.checkpoint_every.is_some() {
        create_dir(&checkpoint_dir)?;
    }
    let options = FitOptions {
        iterations: cfg.iterations,
        burn_in: cfg.burn_in,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint_dir: cfg.checkpoint_every.map(|_| checkpoint_dir),
        mode,
        stop_on_convergence: false,
    };

    let metrics_path = cfg.out.join("metrics.jsonl");
    let mut metrics = MetricsLog::create(&metrics_path)?;
    let outcome = sampler::fit::<f64>(&train, &sampler_config, &options, |stats| {
        metrics.record(stats);
        if stats.iteration % 10 == 0 {
            info!("iteration {}: log-lik {:.3}, {} tables", stats.iteration, stats.log_lik, stats.live_tables);
        }
    })?;
    if let Some(e) = metrics.error {
        return Err(io_err(&metrics_path)(e));
    }

    let state = &outcome.state;
    let checkpoint_path = cfg.out.join("checkpoint.json");
    state.save_checkpoint(&checkpoint_path).map_err(model_err(&checkpoint_path))?;
    let heldout = match &test {
        Some(test) => Some(state.heldout_log_lik(&train, test)?),
        None => None,
    };
    let last = outcome.trace.last().expect("at least one iteration");
    let stats = evaluation::dataset_stats(&train, cfg.period_length)?;
    write_json(
        &cfg.out.join("summary.json"),
        &FitSummary {
            mode,
            iterations: state.iteration(),
            final_log_lik: last.log_lik,
            live_tables: last.live_tables,
            profile_occupancy: last.profile_occupancy.clone(),
            converged_at: outcome.converged_at,
            skipped_links: outcome.trace.iter().map(|s| s.skipped_links).sum(),
            train_eta_t: stats.eta_t,
            train_s_n: stats.s_n,
            heldout,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

fn load_model(path: &Path, corpus: &Corpus) -> Result<Model, Failure> {
    Model::load_checkpoint(path, corpus).map_err(model_err(path))
}

#[derive(Serialize)]
struct Evaluation {
    iteration: u64,
    log_lik: f64,
    live_tables: usize,
    recovery: Option<RecoveryScore>,
    heldout: Option<HeldoutScore<f64>>,
    eta_t: Option<f64>,
    s_n: Option<f64>,
}

fn cmd_evaluate(cfg: config::EvaluateConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&cfg.corpus)?;
    let state = load_model(&cfg.model, &corpus)?;
    let recovery = match &cfg.truth {
        Some(path) => {
            let truth = GroundTruth::load(path).map_err(model_err(path))?;
            Some(evaluation::recovery_score(&state.user_profiles(), &truth.true_profile)?)
        }
        None => None,
    };
    let heldout = match &cfg.heldout {
        Some(path) => Some(state.heldout_log_lik(&corpus, &load_corpus(path)?)?),
        None => None,
    };
    let stats = evaluation::dataset_stats(&corpus, cfg.period_length)?;
    create_dir(&cfg.out)?;
    RunConfig::Evaluate(cfg.clone()).write(&cfg.out)?;
    write_json(
        &cfg.out.join("evaluation.json"),
        &Evaluation {
            iteration: state.iteration(),
            log_lik: state.joint_log_lik(&corpus),
            live_tables: state.seating().live_tables(),
            recovery,
            heldout,
            eta_t: stats.eta_t,
            s_n: stats.s_n,
        },
    )
}

fn cmd_export(cfg: config::ExportConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&cfg.corpus)?;
    let state = match &cfg.model {
        Some(path) => load_model(path, &corpus)?,
        None => {
            log::warn!("no --model given; exporting a freshly initialized state");
            Model::initialize(
                &corpus,
                &SamplerConfig {
                    num_profiles: cfg.profiles,
                    num_topics: cfg.topics,
                    seed: cfg.seed,
                    init: cfg.init,
                    gamma: cfg.gamma,
                    delta: cfg.delta,
                },
            )?
        }
    };
    create_dir(&cfg.out)?;
    RunConfig::Export(cfg.clone()).write(&cfg.out)?;
    let path = cfg.out.join("representations.tsv");
    evaluation::export_representations(&state, &corpus, &path).map_err(model_err(&path))?;
    Ok(())
}

fn cmd_stats(cfg: config::StatsConfig) -> Result<(), Failure> {
    let corpus = load_corpus(&cfg.corpus)?;
    let stats = evaluation::dataset_stats(&corpus, cfg.period_length)?;
    create_dir(&cfg.out)?;
    RunConfig::Stats(cfg.clone()).write(&cfg.out)?;
    write_json(&cfg.out.join("stats.json"), &stats)
}
