//! Command-line arguments and the fully resolved run configurations.
//!
//! Every flag is optional at parse time. A run starts from the defaults,
//! overlays the `--config` file when one is given, then overlays the flags
//! that were passed explicitly. The result is written to `config.json` in the
//! output directory and can be fed back through `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cmap::generator::{CountSpec, GeneratorConfig};
use cmap::InitMode;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Parser)]
#[command(name = "cmap", version, about = "Latent user profiles from interaction logs and links")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic corpus with planted profiles.
    Generate(GenerateArgs),
    /// Run the sampler on a corpus.
    Fit(FitArgs),
    /// Score a fitted model against planted truth or held-out data.
    Evaluate(EvaluateArgs),
    /// Write per-user profile representations.
    Export(ExportArgs),
    /// Activity-skew and action-entropy statistics of a corpus.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Resolved configuration of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub profiles: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub actions: Option<usize>,
    #[arg(long)]
    pub labels: Option<usize>,
    /// Mean of the Poisson number of interactions per user.
    #[arg(long)]
    pub interactions: Option<f64>,
    /// Mean of the Poisson number of outgoing links per user.
    #[arg(long)]
    pub links: Option<f64>,
    /// Divisor of every planted Dirichlet concentration.
    #[arg(long)]
    pub separation: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of profiles R.
    #[arg(long)]
    pub profiles: Option<usize>,
    /// Number of behavior topics K.
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Iterations excluded from the convergence check.
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pitman-Yor discount.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Pitman-Yor concentration.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Users per batch; selects the batch sampler.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Worker threads; more than one selects the batch sampler.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Fraction of each user's interactions held out for scoring.
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<InitMode>,
    #[arg(long)]
    pub period_length: Option<f64>,
    /// Write `checkpoints/checkpoint-NNNNNN.json` every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus the model was fitted on.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint of the fitted model.
    #[arg(long, alias = "checkpoint")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Planted truth written by `generate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Held-out interactions written by `fit --holdout`.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub period_length: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint to export; without it a freshly initialized state is
    /// exported and marked as untrained.
    #[arg(long, alias = "checkpoint")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub profiles: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<InitMode>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub period_length: Option<f64>,
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    s.parse()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum RunConfig {
    Generate(GenerateConfig),
    Fit(FitConfig),
    Evaluate(EvaluateConfig),
    Export(ExportConfig),
    Stats(StatsConfig),
}

impl RunConfig {
    fn name(&self) -> &'static str {
        match self {
            RunConfig::Generate(_) => "generate",
            RunConfig::Fit(_) => "fit",
            RunConfig::Evaluate(_) => "evaluate",
            RunConfig::Export(_) => "export",
            RunConfig::Stats(_) => "stats",
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        crate::write_json(&dir.join("config.json"), self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub out: PathBuf,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub profiles: usize,
    pub topics: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub delta: f64,
    pub gamma: f64,
    /// `Some` selects the batch sampler.
    pub batch_size: Option<usize>,
    pub workers: usize,
    /// Zero disables the held-out split.
    pub holdout: f64,
    pub init: InitMode,
    pub period_length: f64,
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub corpus: PathBuf,
    pub model: PathBuf,
    pub out: PathBuf,
    pub truth: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub period_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub corpus: PathBuf,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub profiles: usize,
    pub topics: usize,
    pub seed: u64,
    pub delta: f64,
    pub gamma: f64,
    pub init: InitMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub period_length: f64,
}

/// Batch size used when only `--workers` asks for the batch sampler.
pub const DEFAULT_BATCH_SIZE: usize = 64;

fn load_base(path: Option<&PathBuf>, expected: &str) -> Result<Option<RunConfig>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if cfg.name() != expected {
        return Err(Failure::Usage(format!(
            "{} is a `{}` configuration, not `{expected}`",
            path.display(),
            cfg.name()
        )));
    }
    Ok(Some(cfg))
}

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    value.ok_or_else(|| Failure::Usage(format!("missing required flag --{flag}")))
}

fn check(ok: bool, message: impl FnOnce() -> String) -> Result<(), Failure> {
    if ok {
        Ok(())
    } else {
        Err(Failure::Usage(message()))
    }
}

fn check_period(period_length: f64) -> Result<(), Failure> {
    check(period_length > 0.0 && period_length <= 1.0, || {
        format!("--period-length must be in (0, 1], got {period_length}")
    })
}

fn check_crp(profiles: usize, topics: usize, gamma: f64, delta: f64) -> Result<(), Failure> {
    check(profiles >= 1, || "--profiles must be at least 1".into())?;
    check(topics >= 1, || "--topics must be at least 1".into())?;
    check(gamma > 0.0, || format!("--gamma must be positive, got {gamma}"))?;
    check((0.0..1.0).contains(&delta), || format!("--delta must be in [0, 1), got {delta}"))
}

pub fn resolve_generate(args: GenerateArgs) -> Result<GenerateConfig, Failure> {
    let base = match load_base(args.config.as_ref(), "generate")? {
        Some(RunConfig::Generate(c)) => Some(c),
        _ => None,
    };
    let out = match (args.out, &base) {
        (Some(o), _) => o,
        (None, Some(b)) => b.out.clone(),
        (None, None) => required(None, "out")?,
    };
    let mut g = base.map(|b| b.generator).unwrap_or_default();
    if let Some(v) = args.seed {
        g.seed = v;
    }
    if let Some(v) = args.users {
        g.num_users = v;
    }
    if let Some(v) = args.profiles {
        g.num_profiles = v;
    }
    if let Some(v) = args.topics {
        g.num_topics = v;
    }
    if let Some(v) = args.vocab {
        g.vocab_size = v;
    }
    if let Some(v) = args.actions {
        g.num_actions = v;
    }
    if let Some(v) = args.labels {
        g.num_labels = v;
    }
    if let Some(v) = args.interactions {
        g.interactions_per_user = CountSpec::Poisson { mean: v };
    }
    if let Some(v) = args.links {
        g.links_per_user = CountSpec::Poisson { mean: v };
    }
    if let Some(v) = args.separation {
        g.separation = v;
    }
    check_crp(g.num_profiles, g.num_topics, g.gamma, g.delta)?;
    check(g.num_users >= 1 && g.vocab_size >= 1 && g.num_actions >= 1 && g.num_labels >= 1, || {
        "--users, --vocab, --actions and --labels must be at least 1".into()
    })?;
    check(g.separation > 0.0, || format!("--separation must be positive, got {}", g.separation))?;
    Ok(GenerateConfig { out, generator: g })
}

pub fn resolve_fit(args: FitArgs) -> Result<FitConfig, Failure> {
    let base = match load_base(args.config.as_ref(), "fit")? {
        Some(RunConfig::Fit(c)) => Some(c),
        _ => None,
    };
    let mut c = match base {
        Some(c) => c,
        None => {
            let defaults = cmap::SamplerConfig::default();
            FitConfig {
                corpus: PathBuf::new(),
                out: PathBuf::new(),
                profiles: defaults.num_profiles,
                topics: defaults.num_topics,
                iterations: cmap::FitOptions::default().iterations,
                burn_in: 0,
                seed: defaults.seed,
                delta: defaults.delta,
                gamma: defaults.gamma,
                batch_size: None,
                workers: 1,
                holdout: 0.0,
                init: defaults.init,
                period_length: cmap::evaluation::DEFAULT_PERIOD_LENGTH,
                checkpoint_every: None,
            }
        }
    };
    let from_file = args.config.is_some();
    if let Some(v) = args.corpus {
        c.corpus = v;
    } else if !from_file {
        required(None, "corpus")?;
    }
    if let Some(v) = args.out {
        c.out = v;
    } else if !from_file {
        required(None, "out")?;
    }
    if let Some(v) = args.profiles {
        c.profiles = v;
    }
    if let Some(v) = args.topics {
        c.topics = v;
    }
    if let Some(v) = args.iters {
        c.iterations = v;
    }
    if let Some(v) = args.burn_in {
        c.burn_in = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.delta {
        c.delta = v;
    }
    if let Some(v) = args.gamma {
        c.gamma = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = Some(v);
    }
    if let Some(v) = args.workers {
        c.workers = v;
    }
    if let Some(v) = args.holdout {
        c.holdout = v;
    }
    if let Some(v) = args.init {
        c.init = v;
    }
    if let Some(v) = args.period_length {
        c.period_length = v;
    }
    if let Some(v) = args.checkpoint_every {
        c.checkpoint_every = Some(v);
    }
    if c.batch_size.is_none() && c.workers > 1 {
        c.batch_size = Some(DEFAULT_BATCH_SIZE);
    }

    check_crp(c.profiles, c.topics, c.gamma, c.delta)?;
    check(c.iterations >= 1, || "--iters must be at least 1".into())?;
    check(c.workers >= 1, || "--workers must be at least 1".into())?;
    check(c.batch_size != Some(0), || "--batch-size must be at least 1".into())?;
    check((0.0..1.0).contains(&c.holdout), || format!("--holdout must be in [0, 1), got {}", c.holdout))?;
    check(c.checkpoint_every != Some(0), || "--checkpoint-every must be at least 1".into())?;
    check_period(c.period_length)?;
    Ok(c)
}

pub fn resolve_evaluate(args: EvaluateArgs) -> Result<EvaluateConfig, Failure> {
    let base = match load_base(args.config.as_ref(), "evaluate")? {
        Some(RunConfig::Evaluate(c)) => Some(c),
        _ => None,
    };
    let c = match base {
        Some(b) => EvaluateConfig {
            corpus: args.corpus.unwrap_or(b.corpus),
            model: args.model.unwrap_or(b.model),
            out: args.out.unwrap_or(b.out),
            truth: args.truth.or(b.truth),
            heldout: args.heldout.or(b.heldout),
            period_length: args.period_length.unwrap_or(b.period_length),
        },
        None => EvaluateConfig {
            corpus: required(args.corpus, "corpus")?,
            model: required(args.model, "model")?,
            out: required(args.out, "out")?,
            truth: args.truth,
            heldout: args.heldout,
            period_length: args.period_length.unwrap_or(cmap::evaluation::DEFAULT_PERIOD_LENGTH),
        },
    };
    check_period(c.period_length)?;
    Ok(c)
}

pub fn resolve_export(args: ExportArgs) -> Result<ExportConfig, Failure> {
    let base = match load_base(args.config.as_ref(), "export")? {
        Some(RunConfig::Export(c)) => Some(c),
        _ => None,
    };
    let c = match base {
        Some(b) => ExportConfig {
            corpus: args.corpus.unwrap_or(b.corpus),
            model: args.model.or(b.model),
            out: args.out.unwrap_or(b.out),
            profiles: args.profiles.unwrap_or(b.profiles),
            topics: args.topics.unwrap_or(b.topics),
            seed: args.seed.unwrap_or(b.seed),
            delta: args.delta.unwrap_or(b.delta),
            gamma: args.gamma.unwrap_or(b.gamma),
            init: args.init.unwrap_or(b.init),
        },
        None => {
            let d = cmap::SamplerConfig::default();
            ExportConfig {
                corpus: required(args.corpus, "corpus")?,
                model: args.model,
                out: required(args.out, "out")?,
                profiles: args.profiles.unwrap_or(d.num_profiles),
                topics: args.topics.unwrap_or(d.num_topics),
                seed: args.seed.unwrap_or(d.seed),
                delta: args.delta.unwrap_or(d.delta),
                gamma: args.gamma.unwrap_or(d.gamma),
                init: args.init.unwrap_or(d.init),
            }
        }
    };
    check_crp(c.profiles, c.topics, c.gamma, c.delta)?;
    Ok(c)
}

pub fn resolve_stats(args: StatsArgs) -> Result<StatsConfig, Failure> {
    let base = match load_base(args.config.as_ref(), "stats")? {
        Some(RunConfig::Stats(c)) => Some(c),
        _ => None,
    };
    let c = match base {
        Some(b) => StatsConfig {
            corpus: args.corpus.unwrap_or(b.corpus),
            out: args.out.unwrap_or(b.out),
            period_length: args.period_length.unwrap_or(b.period_length),
        },
        None => StatsConfig {
            corpus: required(args.corpus, "corpus")?,
            out: required(args.out, "out")?,
            period_length: args.period_length.unwrap_or(cmap::evaluation::DEFAULT_PERIOD_LENGTH),
        },
    };
    check_period(c.period_length)?;
    Ok(c)
}
