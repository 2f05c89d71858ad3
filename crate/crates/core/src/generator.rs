//! Synthetic corpora drawn from the model's own generative process, with the
//! planted assignments and parameters kept as ground truth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Interaction, Link};
use crate::error::ModelError;
use crate::pycrp::{basic_seat_probs, PyParams, SeatingState};
use crate::real::{normalize_log_weights, sample_weighted};
use crate::rng::{self, StreamRng};

/// Distribution of a per-user or per-interaction count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "dist")]
pub enum CountSpec {
    Fixed { n: usize },
    Poisson { mean: f64 },
    /// Uniform on `min..=max`.
    Uniform { min: usize, max: usize },
    /// `P(x) ∝ x^(-exponent)` on `min..=max`.
    PowerLaw { exponent: f64, min: usize, max: usize },
}

impl CountSpec {
    fn validate(&self, what: &str) -> Result<(), ModelError> {
        let ok = match *self {
            Self::Fixed { .. } => true,
            Self::Poisson { mean } => mean >= 0.0 && mean.is_finite(),
            Self::Uniform { min, max } => min <= max,
            Self::PowerLaw { exponent, min, max } => min >= 1 && min <= max && exponent.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("invalid {what} distribution {self:?}")))
        }
    }

    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> usize {
        match *self {
            Self::Fixed { n } => n,
            Self::Poisson { mean } => {
                if mean == 0.0 {
                    0
                } else {
                    Poisson::new(mean).expect("validated mean").sample(rng) as usize
                }
            }
            Self::Uniform { min, max } => rng.random_range(min..=max),
            Self::PowerLaw { exponent, min, max } => {
                let w: Vec<f64> = (min..=max).map(|x| (x as f64).powf(-exponent)).collect();
                min + sample_weighted(&w, rng.random())
            }
        }
    }

    /// True when the distribution can produce a positive count.
    fn can_be_positive(&self) -> bool {
        match *self {
            Self::Fixed { n } => n > 0,
            Self::Poisson { mean } => mean > 0.0,
            Self::Uniform { max, .. } | Self::PowerLaw { max, .. } => max > 0,
        }
    }
}

/// Symmetric Dirichlet concentrations of the planted multinomials, before
/// division by `separation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorPriors {
    pub words: f64,
    pub actions: f64,
    pub topics: f64,
    pub labels: f64,
}

impl Default for GeneratorPriors {
    fn default() -> Self {
        Self { words: 0.1, actions: 0.5, topics: 0.5, labels: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_profiles: usize,
    pub num_topics: usize,
    pub num_users: usize,
    pub vocab_size: usize,
    pub num_actions: usize,
    pub num_labels: usize,
    pub interactions_per_user: CountSpec,
    pub links_per_user: CountSpec,
    pub tokens_per_interaction: CountSpec,
    /// Divides every Dirichlet concentration; larger values plant sharper,
    /// better separated multinomials.
    pub separation: f64,
    pub priors: GeneratorPriors,
    /// Planted Beta shapes are drawn uniformly from this range.
    pub beta_range: (f64, f64),
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_profiles: 5,
            num_topics: 10,
            num_users: 500,
            vocab_size: 200,
            num_actions: 5,
            num_labels: 3,
            interactions_per_user: CountSpec::Poisson { mean: 20.0 },
            links_per_user: CountSpec::Poisson { mean: 2.0 },
            tokens_per_interaction: CountSpec::Uniform { min: 3, max: 8 },
            separation: 1.0,
            priors: GeneratorPriors::default(),
            beta_range: (1.0, 8.0),
            gamma: 1.0,
            delta: 0.5,
            seed: 0,
        }
    }
}

/// Planted assignments and parameters behind a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub true_profile: Vec<usize>,
    pub true_topic: Vec<usize>,
    /// `K` rows over words.
    pub phi_word: Vec<Vec<f64>>,
    /// `K` rows over actions.
    pub phi_action: Vec<Vec<f64>>,
    /// `R` rows over topics.
    pub phi_topic: Vec<Vec<f64>>,
    /// `R * R` rows over labels, row `s * R + t` for links from profile `s`
    /// to profile `t`.
    pub phi_link: Vec<Vec<f64>>,
    /// `R * K` pairs `(alpha, beta)`, row-major by profile.
    pub beta_true: Vec<(f64, f64)>,
}

impl GroundTruth {
    pub fn num_profiles(&self) -> usize {
        self.phi_topic.len()
    }

    pub fn num_topics(&self) -> usize {
        self.phi_word.len()
    }

    pub fn beta(&self, profile: usize, topic: usize) -> (f64, f64) {
        self.beta_true[profile * self.num_topics() + topic]
    }

    pub fn link_row(&self, source_profile: usize, target_profile: usize) -> &[f64] {
        &self.phi_link[source_profile * self.num_profiles() + target_profile]
    }
}

/// Draws from `Dir(alpha, ..., alpha)` through log-Gamma variates, using
/// `G(a) = G(a + 1) * U^(1/a)` so tiny concentrations do not underflow.
pub fn sample_symmetric_dirichlet<G: Rng + ?Sized>(rng: &mut G, alpha: f64, dim: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let mut logs: Vec<f64> = (0..dim)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    normalize_log_weights(&mut logs);
    logs
}

fn validate(config: &GeneratorConfig) -> Result<(), ModelError> {
    let sizes = [
        config.num_profiles,
        config.num_topics,
        config.num_users,
        config.vocab_size,
        config.num_actions,
        config.num_labels,
    ];
    if sizes.contains(&0) {
        return Err(ModelError::Config("generator sizes must be positive".into()));
    }
    if !(config.separation >= 1.0) {
        return Err(ModelError::Config(format!("separation must be >= 1 (got {})", config.separation)));
    }
    let p = config.priors;
    if [p.words, p.actions, p.topics, p.labels].iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(ModelError::Config("generator priors must be positive".into()));
    }
    let (lo, hi) = config.beta_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(ModelError::Config(format!("invalid Beta shape range {:?}", config.beta_range)));
    }
    config.interactions_per_user.validate("interactions per user")?;
    config.links_per_user.validate("links per user")?;
    config.tokens_per_interaction.validate("tokens per interaction")?;
    if config.links_per_user.can_be_positive() && config.num_users < 2 {
        return Err(ModelError::Config("links need at least two users".into()));
    }
    Ok(())
}

/// Generates a corpus and its ground truth; a pure function of `config`.
pub fn generate(config: &GeneratorConfig) -> Result<(Corpus, GroundTruth), ModelError> {
    validate(config)?;
    let mut rng = rng::stream(config.seed, 0, rng::GENERATOR_STREAM);
    let (nr, nk, nu) = (config.num_profiles, config.num_topics, config.num_users);
    let sep = config.separation;
    let p = config.priors;

    let phi_word: Vec<Vec<f64>> =
        (0..nk).map(|_| sample_symmetric_dirichlet(&mut rng, p.words / sep, config.vocab_size)).collect();
    let phi_action: Vec<Vec<f64>> =
        (0..nk).map(|_| sample_symmetric_dirichlet(&mut rng, p.actions / sep, config.num_actions)).collect();
    let phi_topic: Vec<Vec<f64>> = (0..nr).map(|_| sample_symmetric_dirichlet(&mut rng, p.topics / sep, nk)).collect();
    let phi_link: Vec<Vec<f64>> =
        (0..nr * nr).map(|_| sample_symmetric_dirichlet(&mut rng, p.labels / sep, config.num_labels)).collect();
    let (lo, hi) = config.beta_range;
    let beta_true: Vec<(f64, f64)> = (0..nr * nk)
        .map(|_| {
            let a = if lo == hi { lo } else { rng.random_range(lo..hi) };
            let b = if lo == hi { lo } else { rng.random_range(lo..hi) };
            (a, b)
        })
        .collect();

    let true_profile = crp_profiles(config, &mut rng)?;

    let betas: Vec<Beta<f64>> =
        beta_true.iter().map(|&(a, b)| Beta::new(a, b).expect("positive shapes")).collect();
    let mut interactions = Vec::new();
    let mut true_topic = Vec::new();
    for (u, &r) in true_profile.iter().enumerate() {
        for _ in 0..config.interactions_per_user.sample(&mut rng) {
            let k = sample_weighted(&phi_topic[r], rng.random());
            let tokens = (0..config.tokens_per_interaction.sample(&mut rng))
                .map(|_| sample_weighted(&phi_word[k], rng.random()))
                .collect();
            let action = sample_weighted(&phi_action[k], rng.random());
            let time = betas[r * nk + k].sample(&mut rng).clamp(0.0, 1.0);
            interactions.push(Interaction { user: u, action, tokens, time, tags: None });
            true_topic.push(k);
        }
    }

    let mut links = Vec::new();
    for (u, &r) in true_profile.iter().enumerate() {
        for _ in 0..config.links_per_user.sample(&mut rng) {
            let mut y = rng.random_range(0..nu - 1);
            if y >= u {
                y += 1;
            }
            let label = sample_weighted(&phi_link[r * nr + true_profile[y]], rng.random());
            links.push(Link { source: u, target: y, label });
        }
    }

    let corpus = Corpus::new(nu, config.num_actions, config.vocab_size, config.num_labels, interactions, links)
        .map_err(ModelError::Corpus)?;
    let truth = GroundTruth { true_profile, true_topic, phi_word, phi_action, phi_topic, phi_link, beta_true };
    Ok((corpus, truth))
}

/// Seats users one by one in a Pitman-Yor restaurant; every new table
/// serves a uniformly drawn profile.
fn crp_profiles(config: &GeneratorConfig, rng: &mut StreamRng) -> Result<Vec<usize>, ModelError> {
    let py = PyParams::new(config.gamma, config.delta, config.num_profiles)?;
    let mut seating = SeatingState::new(config.num_users, config.num_profiles);
    let mut profiles = Vec::with_capacity(config.num_users);
    for u in 0..config.num_users {
        let dist = basic_seat_probs(&seating, &py);
        let choice = dist.choice(sample_weighted(&dist.probs, rng.random()));
        let profile = match choice {
            crate::pycrp::TableChoice::Existing(a) => seating.table(a).expect("live table").1,
            crate::pycrp::TableChoice::New => rng.random_range(0..config.num_profiles),
        };
        seating.seat_at(u, choice, profile)?;
        profiles.push(profile);
    }
    Ok(profiles)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TruthRecord {
    Header { num_users: usize, num_interactions: usize, num_profiles: usize, num_topics: usize },
    User { u: usize, r: usize },
    Topic { i: usize, k: usize },
    PhiWord { k: usize, p: Vec<f64> },
    PhiAction { k: usize, p: Vec<f64> },
    PhiTopic { r: usize, p: Vec<f64> },
    PhiLink { s: usize, t: usize, p: Vec<f64> },
    Beta { r: usize, k: usize, alpha: f64, beta: f64 },
}

impl GroundTruth {
    /// Line-delimited JSON sidecar: a header, then users, interaction
    /// topics, multinomial rows and Beta pairs.
    pub fn write_to(&self, w: impl Write) -> Result<(), ModelError> {
        let mut w = BufWriter::new(w);
        let (nr, nk) = (self.num_profiles(), self.num_topics());
        let mut emit = |rec: TruthRecord| -> Result<(), ModelError> {
            serde_json::to_writer(&mut w, &rec).map_err(|e| ModelError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        emit(TruthRecord::Header {
            num_users: self.true_profile.len(),
            num_interactions: self.true_topic.len(),
            num_profiles: nr,
            num_topics: nk,
        })?;
        for (u, &r) in self.true_profile.iter().enumerate() {
            emit(TruthRecord::User { u, r })?;
        }
        for (i, &k) in self.true_topic.iter().enumerate() {
            emit(TruthRecord::Topic { i, k })?;
        }
        for (k, p) in self.phi_word.iter().enumerate() {
            emit(TruthRecord::PhiWord { k, p: p.clone() })?;
        }
        for (k, p) in self.phi_action.iter().enumerate() {
            emit(TruthRecord::PhiAction { k, p: p.clone() })?;
        }
        for (r, p) in self.phi_topic.iter().enumerate() {
            emit(TruthRecord::PhiTopic { r, p: p.clone() })?;
        }
        for (i, p) in self.phi_link.iter().enumerate() {
            emit(TruthRecord::PhiLink { s: i / nr, t: i % nr, p: p.clone() })?;
        }
        for (i, &(alpha, beta)) in self.beta_true.iter().enumerate() {
            emit(TruthRecord::Beta { r: i / nk, k: i % nk, alpha, beta })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.write_to(File::create(path)?)
    }

    pub fn read_from(r: impl Read) -> Result<Self, ModelError> {
        let bad = |line: usize, msg: &str| ModelError::Format(format!("truth line {line}: {msg}"));
        let mut lines = BufReader::new(r).lines().enumerate();
        let (nu, ni, nr, nk) = match lines.next() {
            Some((_, line)) => match serde_json::from_str(&line?) {
                Ok(TruthRecord::Header { num_users, num_interactions, num_profiles, num_topics }) => {
                    (num_users, num_interactions, num_profiles, num_topics)
                }
                _ => return Err(bad(1, "expected header")),
            },
            None => return Err(bad(1, "empty file")),
        };
        let mut profile = vec![None; nu];
        let mut topic = vec![None; ni];
        let mut word = vec![None; nk];
        let mut action = vec![None; nk];
        let mut theta = vec![None; nr];
        let mut link = vec![None; nr * nr];
        let mut beta = vec![None; nr * nk];
        fn put<V>(slot: Option<&mut Option<V>>, v: V, line: usize) -> Result<(), ModelError> {
            match slot {
                Some(s @ None) => {
                    *s = Some(v);
                    Ok(())
                }
                _ => Err(ModelError::Format(format!("truth line {line}: index out of range or repeated"))),
            }
        }
        for (n, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TruthRecord = serde_json::from_str(&line).map_err(|e| bad(n + 1, &e.to_string()))?;
            match rec {
                TruthRecord::Header { .. } => return Err(bad(n + 1, "repeated header")),
                TruthRecord::User { u, r } => put(profile.get_mut(u), r, n + 1)?,
                TruthRecord::Topic { i, k } => put(topic.get_mut(i), k, n + 1)?,
                TruthRecord::PhiWord { k, p } => put(word.get_mut(k), p, n + 1)?,
                TruthRecord::PhiAction { k, p } => put(action.get_mut(k), p, n + 1)?,
                TruthRecord::PhiTopic { r, p } => put(theta.get_mut(r), p, n + 1)?,
                TruthRecord::PhiLink { s, t, p } => {
                    let slot = if s < nr && t < nr { link.get_mut(s * nr + t) } else { None };
                    put(slot, p, n + 1)?
                }
                TruthRecord::Beta { r, k, alpha, beta: b } => {
                    let slot = if r < nr && k < nk { beta.get_mut(r * nk + k) } else { None };
                    put(slot, (alpha, b), n + 1)?
                }
            }
        }
        fn all<V>(v: Vec<Option<V>>, what: &str) -> Result<Vec<V>, ModelError> {
            v.into_iter().collect::<Option<Vec<V>>>().ok_or_else(|| ModelError::Format(format!("truth file lacks some {what}")))
        }
        Ok(Self {
            true_profile: all(profile, "users")?,
            true_topic: all(topic, "topics")?,
            phi_word: all(word, "word rows")?,
            phi_action: all(action, "action rows")?,
            phi_topic: all(theta, "topic rows")?,
            phi_link: all(link, "link rows")?,
            beta_true: all(beta, "Beta pairs")?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(File::open(path)?)
    }
}

/// Empirical word and action frequencies of one planted topic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicCheck {
    pub topic: usize,
    pub tokens: usize,
    pub word_tv: f64,
    pub word_threshold: f64,
    pub interactions: usize,
    pub action_tv: f64,
    pub action_threshold: f64,
    pub flagged: bool,
}

/// Sample mean of the times planted under one `(r, k)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeCheck {
    pub profile: usize,
    pub topic: usize,
    pub samples: usize,
    pub mean: f64,
    pub expected_mean: f64,
    pub std_error: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EmpiricalReport {
    pub topics: Vec<TopicCheck>,
    pub times: Vec<TimeCheck>,
}

impl EmpiricalReport {
    pub fn is_empty(&self) -> bool {
        self.topics.is_empty() && self.times.is_empty()
    }

    pub fn flagged(&self) -> usize {
        self.topics.iter().filter(|c| c.flagged).count() + self.times.iter().filter(|c| c.flagged).count()
    }
}

/// Standard errors allowed before a deviation is flagged.
pub const CHECK_SIGMAS: f64 = 3.0;

fn total_variation(counts: &[usize], n: usize, p: &[f64]) -> f64 {
    0.5 * counts.iter().zip(p).map(|(&c, &q)| (c as f64 / n as f64 - q).abs()).sum::<f64>()
}

/// Three times the expected-scale TV fluctuation, `0.5 Σ sqrt(p(1-p)/n)`.
fn tv_threshold(n: usize, p: &[f64]) -> f64 {
    CHECK_SIGMAS * 0.5 * p.iter().map(|&q| (q * (1.0 - q) / n as f64).sqrt()).sum::<f64>()
}

/// Compares a generated corpus against its truth: per-topic total variation
/// of word and action frequencies, and per-cell time means against the Beta
/// means. Only topics and cells with data are reported.
pub fn empirical_check(corpus: &Corpus, truth: &GroundTruth) -> Result<EmpiricalReport, ModelError> {
    if truth.true_topic.len() != corpus.interactions().len() || truth.true_profile.len() != corpus.num_users() {
        return Err(ModelError::Mismatch("truth does not describe this corpus".into()));
    }
    let (nr, nk) = (truth.num_profiles(), truth.num_topics());
    let mut words = vec![vec![0usize; corpus.vocab_size()]; nk];
    let mut actions = vec![vec![0usize; corpus.num_actions()]; nk];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); nr * nk];
    for (d, &k) in corpus.interactions().iter().zip(&truth.true_topic) {
        actions[k][d.action] += 1;
        for &w in &d.tokens {
            words[k][w] += 1;
        }
        times[truth.true_profile[d.user] * nk + k].push(d.time);
    }

    let mut report = EmpiricalReport::default();
    for k in 0..nk {
        let tokens: usize = words[k].iter().sum();
        let interactions: usize = actions[k].iter().sum();
        if interactions == 0 {
            continue;
        }
        let (word_tv, word_threshold) = if tokens > 0 {
            (total_variation(&words[k], tokens, &truth.phi_word[k]), tv_threshold(tokens, &truth.phi_word[k]))
        } else {
            (0.0, 0.0)
        };
        let action_tv = total_variation(&actions[k], interactions, &truth.phi_action[k]);
        let action_threshold = tv_threshold(interactions, &truth.phi_action[k]);
        report.topics.push(TopicCheck {
            topic: k,
            tokens,
            word_tv,
            word_threshold,
            interactions,
            action_tv,
            action_threshold,
            flagged: word_tv > word_threshold.max(1e-12) && tokens > 0 || action_tv > action_threshold.max(1e-12),
        });
    }
    for (cell, ts) in times.iter().enumerate() {
        if ts.is_empty() {
            continue;
        }
        let (a, b) = truth.beta_true[cell];
        let n = ts.len() as f64;
        let mean = ts.iter().sum::<f64>() / n;
        let expected_mean = a / (a + b);
        let var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        let std_error = (var / n).sqrt();
        report.times.push(TimeCheck {
            profile: cell / nk,
            topic: cell % nk,
            samples: ts.len(),
            mean,
            expected_mean,
            std_error,
            flagged: (mean - expected_mean).abs() > CHECK_SIGMAS * std_error,
        });
    }
    Ok(report)
}
