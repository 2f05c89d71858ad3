//! Collapsed Gibbs sampler over user profiles, seating and behavior topics.
//!
//! One iteration visits every user in a seed-shuffled order and
//!
//! 1. unseats the user and removes their topic, profile-topic and link counts,
//! 2. scores `log p(u | r)` for every profile,
//! 3. draws `r_u` from the seating-weighted profile posterior,
//! 4. redraws the topic of each of the user's interactions under `r_u`,
//! 5. seats the user on a table serving `r_u`,
//! 6. adds the counts back.
//!
//! After the sweep the Beta parameters are re-fit by moments, the Dirichlet
//! concentrations by fixed-point iteration, and the time cache is rebuilt.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::BatchSampler;
use crate::corpus::Corpus;
use crate::error::ModelError;
use crate::profiles::{
    refit_beta_params, time_bin, update_dirichlet_priors, CountTables, DirichletEvidence, DirichletPriors,
    ProfileParams, ProfileScorer,
};
use crate::pycrp::{self, PyParams, SeatingState, TableChoice, Unseated};
use crate::real::{log_sum_exp, normalize_log_weights, sample_weighted, Real};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Greedy cosine grouping of tag and action histograms.
    Similarity,
    /// Users dealt uniformly at random onto `R` tables.
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "similarity" => Ok(Self::Similarity),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown init mode {other:?} (expected similarity or random)")),
        }
    }
}

/// Model shape and seating hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_profiles: usize,
    pub num_topics: usize,
    pub seed: u64,
    pub init: InitMode,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_profiles: 20, num_topics: 50, seed: 0, init: InitMode::Similarity, gamma: 1.0, delta: 0.5 }
    }
}

/// Diagnostics of one sampling iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats<T> {
    pub iteration: u64,
    pub log_lik: T,
    pub live_tables: usize,
    /// `N_r` per profile.
    pub profile_occupancy: Vec<usize>,
    /// Link evaluations skipped because both endpoints were in one batch.
    pub skipped_links: usize,
    pub wall_seconds: f64,
}

/// A user's resampled assignments, computed against a state the user has
/// been removed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub user: usize,
    pub profile: usize,
    pub topics: Vec<u32>,
    pub table: TableChoice,
    pub skipped_links: usize,
}

/// Scratch buffers for [`ModelState::propose`].
#[derive(Debug, Clone, Default)]
pub struct Scratch<T> {
    scorer: ProfileScorer<T>,
    log_lik: Vec<T>,
    terms: Vec<T>,
}

impl<T: Real> Scratch<T> {
    pub fn new() -> Self {
        Self { scorer: ProfileScorer::new(), log_lik: Vec::new(), terms: Vec::new() }
    }
}

/// Complete sampler state: seating, topic assignments, counts and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    config: SamplerConfig,
    py: PyParams<T>,
    pub(crate) seating: SeatingState,
    pub(crate) counts: CountTables,
    pub(crate) params: ProfileParams<T>,
    pub(crate) topics: Vec<u32>,
    iteration: u64,
}

impl<T: Real> ModelState<T> {
    /// Seeds the seating, draws topics uniformly and counts from scratch.
    pub fn initialize(corpus: &Corpus, config: &SamplerConfig) -> Result<Self, ModelError> {
        validate_config(config)?;
        let (nr, nk) = (config.num_profiles, config.num_topics);
        if nr > corpus.num_users() {
            warn!("{nr} profiles for {} users; some profiles start empty", corpus.num_users());
        }
        let mut rng = rng::stream(config.seed, 0, rng::INIT_STREAM);
        let groups = match config.init {
            InitMode::Random => (0..corpus.num_users()).map(|_| rng.random_range(0..nr)).collect(),
            InitMode::Similarity => similarity_groups(corpus, nr, &mut rng),
        };
        let topics: Vec<u32> = (0..corpus.interactions().len()).map(|_| rng.random_range(0..nk) as u32).collect();
        Self::from_assignments(corpus, config, &groups, &topics)
    }

    /// State with users seated one table per profile, and the given topics.
    pub fn from_assignments(
        corpus: &Corpus,
        config: &SamplerConfig,
        profiles: &[usize],
        topics: &[u32],
    ) -> Result<Self, ModelError> {
        validate_config(config)?;
        let (nr, nk) = (config.num_profiles, config.num_topics);
        if profiles.len() != corpus.num_users() || topics.len() != corpus.interactions().len() {
            return Err(ModelError::Mismatch("assignment lengths differ from corpus".into()));
        }
        if let Some(&k) = topics.iter().find(|&&k| k as usize >= nk) {
            return Err(ModelError::Config(format!("topic {k} out of range (K = {nk})")));
        }
        let py = PyParams::new(T::of(config.gamma), T::of(config.delta), nr)?;
        let mut seating = SeatingState::new(corpus.num_users(), nr);
        let mut table_of_profile: Vec<Option<usize>> = vec![None; nr];
        for (u, &r) in profiles.iter().enumerate() {
            let choice = match table_of_profile.get(r).copied().flatten() {
                Some(a) => TableChoice::Existing(a),
                None => TableChoice::New,
            };
            let a = seating.seat_at(u, choice, r)?;
            table_of_profile[r] = Some(a);
        }
        let counts = CountTables::recount(corpus, nr, nk, |u| seating.profile_of(u), topics);
        let params = ProfileParams::new(
            nr,
            nk,
            DirichletPriors::defaults(corpus.num_actions(), nk, corpus.num_labels()),
        );
        Ok(Self { config: config.clone(), py, seating, counts, params, topics: topics.to_vec(), iteration: 0 })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn py_params(&self) -> &PyParams<T> {
        &self.py
    }

    pub fn seating(&self) -> &SeatingState {
        &self.seating
    }

    pub fn counts(&self) -> &CountTables {
        &self.counts
    }

    pub fn params(&self) -> &ProfileParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ProfileParams<T> {
        &mut self.params
    }

    /// Topic assignment `k_d` of every interaction.
    pub fn topics(&self) -> &[u32] {
        &self.topics
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn num_profiles(&self) -> usize {
        self.config.num_profiles
    }

    pub fn num_topics(&self) -> usize {
        self.config.num_topics
    }

    /// Profile currently assigned to every user.
    pub fn user_profiles(&self) -> Vec<usize> {
        (0..self.seating.num_users())
            .map(|u| self.seating.profile_of(u).expect("every user is seated between sweeps"))
            .collect()
    }

    /// Full recount check of the count tables and seating aggregates.
    pub fn check_counts(&self, corpus: &Corpus) -> Result<(), ModelError> {
        self.seating.check_consistency().map_err(ModelError::Mismatch)?;
        let fresh = CountTables::recount(
            corpus,
            self.num_profiles(),
            self.num_topics(),
            |u| self.seating.profile_of(u),
            &self.topics,
        );
        if fresh != self.counts {
            return Err(ModelError::CountMismatch);
        }
        Ok(())
    }

    /// Unseats `user` and removes their counts. Links count only while both
    /// endpoints are seated, so links to already-removed users are left
    /// alone.
    pub fn remove_user(&mut self, corpus: &Corpus, user: usize) -> Result<Unseated, ModelError> {
        let record = self.seating.unseat(user)?;
        let r = record.profile;
        for &i in corpus.user_interactions(user) {
            let k = self.topics[i] as usize;
            self.counts.add_interaction(k, &corpus.interactions()[i], false);
            self.counts.add_profile_topic(r, k, false);
        }
        self.update_links(corpus, user, r, false);
        Ok(record)
    }

    fn update_links(&mut self, corpus: &Corpus, user: usize, profile: usize, add: bool) {
        for &li in corpus.user_in_links(user) {
            let l = corpus.links()[li];
            if let Some(rs) = self.seating.profile_of(l.source) {
                self.counts.add_link(rs, profile, l.label, add);
            }
        }
        for &li in corpus.user_out_links(user) {
            let l = corpus.links()[li];
            if let Some(rt) = self.seating.profile_of(l.target) {
                self.counts.add_link(profile, rt, l.label, add);
            }
        }
    }

    /// Reverses [`remove_user`](Self::remove_user); calls must come in reverse
    /// removal order.
    pub fn restore_user(&mut self, corpus: &Corpus, user: usize, record: Unseated) -> Result<(), ModelError> {
        self.seating.undo_unseat(user, record)?;
        let r = record.profile;
        for &i in corpus.user_interactions(user) {
            let k = self.topics[i] as usize;
            self.counts.add_interaction(k, &corpus.interactions()[i], true);
            self.counts.add_profile_topic(r, k, true);
        }
        self.update_links(corpus, user, r, true);
        Ok(())
    }

    /// Draws a profile, topics and a table for an unseated `user`, reading
    /// but not modifying the state.
    pub fn propose<G: Rng + ?Sized>(
        &self,
        corpus: &Corpus,
        user: usize,
        skip_unseated: bool,
        rng: &mut G,
        scratch: &mut Scratch<T>,
    ) -> Result<Proposal, ModelError> {
        let skipped = scratch.scorer.score(
            user,
            corpus,
            &self.counts,
            &self.seating,
            &self.params,
            skip_unseated,
            &mut scratch.log_lik,
        )?;
        let weights = pycrp::profile_posterior_weights(&self.seating, &self.py, &scratch.log_lik)?;
        let profile = sample_weighted(&weights, rng.random());

        let ints = corpus.user_interactions(user);
        let mut topics = Vec::with_capacity(ints.len());
        for j in 0..ints.len() {
            scratch.scorer.topic_terms(j, profile, &self.params, &mut scratch.terms);
            if !normalize_log_weights(&mut scratch.terms) {
                return Err(ModelError::Crp(crate::error::CrpError::ZeroLikelihood));
            }
            topics.push(sample_weighted(&scratch.terms, rng.random()) as u32);
        }
        let table = pycrp::propose_table(&self.seating, &self.py, profile, rng)?;
        Ok(Proposal { user, profile, topics, table, skipped_links: skipped })
    }

    /// Seats the proposing user and adds their counts back.
    pub fn apply(&mut self, corpus: &Corpus, proposal: &Proposal) -> Result<(), ModelError> {
        let user = proposal.user;
        self.seating.seat_at(user, proposal.table, proposal.profile)?;
        let r = proposal.profile;
        for (&i, &k) in corpus.user_interactions(user).iter().zip(&proposal.topics) {
            self.topics[i] = k;
            self.counts.add_interaction(k as usize, &corpus.interactions()[i], true);
            self.counts.add_profile_topic(r, k as usize, true);
        }
        self.update_links(corpus, user, r, true);
        Ok(())
    }

    /// One remove/propose/apply step for a single user.
    pub fn resample_user<G: Rng + ?Sized>(
        &mut self,
        corpus: &Corpus,
        user: usize,
        rng: &mut G,
        scratch: &mut Scratch<T>,
    ) -> Result<Proposal, ModelError> {
        self.remove_user(corpus, user)?;
        debug_assert_eq!(self.seating.total_seated(), self.seating.num_users() - 1);
        let proposal = self.propose(corpus, user, false, rng, scratch)?;
        self.apply(corpus, &proposal)?;
        Ok(proposal)
    }

    /// A full serial sweep plus end-of-iteration parameter estimation.
    pub fn gibbs_iteration(&mut self, corpus: &Corpus) -> Result<IterationStats<T>, ModelError> {
        self.check_shape(corpus)?;
        let start = Instant::now();
        let mut scratch = Scratch::new();
        for user in rng::visitation_order(self.config.seed, self.iteration, corpus.num_users()) {
            let mut urng = rng::user_stream(self.config.seed, self.iteration, user);
            self.resample_user(corpus, user, &mut urng, &mut scratch)?;
        }
        Ok(self.finish_iteration(corpus, 0, start))
    }

    /// Parameter updates, cache refresh and diagnostics shared by the serial
    /// and batch sweeps.
    pub(crate) fn finish_iteration(&mut self, corpus: &Corpus, skipped_links: usize, start: Instant) -> IterationStats<T> {
        self.update_parameters(corpus);
        self.iteration += 1;
        let log_lik = self.joint_log_lik(corpus);
        IterationStats {
            iteration: self.iteration,
            log_lik,
            live_tables: self.seating.live_tables(),
            profile_occupancy: (0..self.num_profiles()).map(|r| self.seating.profile_users(r)).collect(),
            skipped_links,
            wall_seconds: start.elapsed().as_secs_f64(),
        }
    }

    /// Beta re-fit by moments, Dirichlet fixed point, time-cache rebuild.
    pub fn update_parameters(&mut self, corpus: &Corpus) {
        let seating = &self.seating;
        let cells = corpus.interactions().iter().zip(&self.topics).map(|(d, &k)| {
            let r = seating.profile_of(d.user).expect("seated");
            (r, k as usize, d.time)
        });
        refit_beta_params(&mut self.params, cells);
        update_dirichlet_priors(&self.counts, &mut self.params);
        self.params.rebuild_time_cache();
    }

    /// Collapsed joint log-likelihood of the training data under the current
    /// assignments: Dirichlet-multinomial marginals of the four count
    /// families plus the Beta log-densities of all interaction times.
    pub fn joint_log_lik(&self, corpus: &Corpus) -> T {
        let c = &self.counts;
        let p = &self.params.priors;
        let mut ll = DirichletEvidence::from_rows(c.vocab_size(), rows(c, Family::Words)).log_likelihood(p.words)
            + DirichletEvidence::from_rows(c.num_actions(), rows(c, Family::Actions)).log_likelihood(p.actions)
            + DirichletEvidence::from_rows(c.num_topics(), rows(c, Family::Topics)).log_likelihood(p.topics)
            + DirichletEvidence::from_rows(c.num_labels(), rows(c, Family::Labels)).log_likelihood(p.labels);
        for (d, &k) in corpus.interactions().iter().zip(&self.topics) {
            if let Some(r) = self.seating.profile_of(d.user) {
                ll = ll + self.params.cached_time_log_pdf(r, k as usize, time_bin(d.time));
            }
        }
        ll
    }

    /// `P_u`: the user's likelihood under every profile, normalized.
    pub fn user_representation(&self, corpus: &Corpus, user: usize) -> Result<Vec<T>, ModelError> {
        let mut scratch = ProfileScorer::new();
        let mut out = Vec::new();
        scratch.score(user, corpus, &self.counts, &self.seating, &self.params, false, &mut out)?;
        if !normalize_log_weights(&mut out) {
            return Err(ModelError::Crp(crate::error::CrpError::ZeroLikelihood));
        }
        Ok(out)
    }

    /// Mean per-interaction log-likelihood of held-out interactions, mixing
    /// profiles by each user's `P_u` computed on `train`.
    pub fn heldout_log_lik(&self, train: &Corpus, test: &Corpus) -> Result<HeldoutScore<T>, ModelError> {
        let mut total = T::zero();
        let mut scored = 0usize;
        let mut skipped_unknown = 0usize;
        let mut reps: Vec<Option<Vec<T>>> = vec![None; self.seating.num_users()];
        let mut terms = vec![T::zero(); self.num_profiles()];
        for d in test.interactions() {
            if d.user >= self.seating.num_users() {
                skipped_unknown += 1;
                continue;
            }
            if reps[d.user].is_none() {
                reps[d.user] = Some(self.user_representation(train, d.user)?);
            }
            let pu = reps[d.user].as_ref().expect("filled above");
            for (r, slot) in terms.iter_mut().enumerate() {
                *slot = pu[r].ln() + crate::profiles::interaction_log_lik(d, r, &self.counts, &self.params)?;
            }
            total = total + log_sum_exp(&terms);
            scored += 1;
        }
        if skipped_unknown > 0 {
            warn!("{skipped_unknown} held-out interactions belong to unknown users");
        }
        let mean = if scored == 0 { T::nan() } else { total / T::of_usize(scored) };
        Ok(HeldoutScore { mean_log_lik: mean, scored, skipped_unknown })
    }

    fn check_shape(&self, corpus: &Corpus) -> Result<(), ModelError> {
        if corpus.num_users() != self.seating.num_users() || corpus.interactions().len() != self.topics.len() {
            return Err(ModelError::Mismatch(format!(
                "state has {} users / {} interactions, corpus has {} / {}",
                self.seating.num_users(),
                self.topics.len(),
                corpus.num_users(),
                corpus.interactions().len()
            )));
        }
        if !self.params.cache_is_fresh() {
            return Err(ModelError::StaleTimeCache);
        }
        Ok(())
    }

    pub(crate) fn check_shape_for_batch(&self, corpus: &Corpus) -> Result<(), ModelError> {
        self.check_shape(corpus)
    }

    pub(crate) fn iteration_seed(&self) -> (u64, u64) {
        (self.config.seed, self.iteration)
    }
}

enum Family {
    Words,
    Actions,
    Topics,
    Labels,
}

fn rows(c: &CountTables, family: Family) -> Box<dyn Iterator<Item = (&[u32], u32)> + '_> {
    match family {
        Family::Words => Box::new(c.topic_word_rows()),
        Family::Actions => Box::new(c.topic_action_rows()),
        Family::Topics => Box::new(c.profile_topic_rows()),
        Family::Labels => Box::new(c.link_rows()),
    }
}

/// Result of [`ModelState::heldout_log_lik`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutScore<T> {
    pub mean_log_lik: T,
    pub scored: usize,
    pub skipped_unknown: usize,
}

fn validate_config(config: &SamplerConfig) -> Result<(), ModelError> {
    if config.num_profiles == 0 || config.num_topics == 0 {
        return Err(ModelError::Config("R and K must be at least 1".into()));
    }
    if !(config.gamma > 0.0) || !(0.0..1.0).contains(&config.delta) {
        return Err(ModelError::Config(format!(
            "gamma must be > 0 and delta in [0, 1) (got {}, {})",
            config.gamma, config.delta
        )));
    }
    Ok(())
}

/// Per-user feature vector: relative action frequencies followed by
/// relative tag frequencies (when the corpus has tags).
fn user_features(corpus: &Corpus) -> Vec<Vec<f64>> {
    let num_tags = corpus
        .interactions()
        .iter()
        .filter_map(|d| d.tags.as_ref())
        .flat_map(|t| t.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    let na = corpus.num_actions();
    (0..corpus.num_users())
        .map(|u| {
            let mut v = vec![0.0; na + num_tags];
            let mut tag_total = 0.0;
            for &i in corpus.user_interactions(u) {
                let d = &corpus.interactions()[i];
                v[d.action] += 1.0;
                for &t in d.tags.iter().flatten() {
                    v[na + t] += 1.0;
                    tag_total += 1.0;
                }
            }
            let action_total = corpus.user_interactions(u).len() as f64;
            if action_total > 0.0 {
                v[..na].iter_mut().for_each(|x| *x /= action_total);
            }
            if tag_total > 0.0 {
                v[na..].iter_mut().for_each(|x| *x /= tag_total);
            }
            v
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Single-pass greedy grouping into at most `num_groups` groups.
///
/// Seeds are picked farthest-first (first one at random) until `num_groups`
/// seeds exist or every remaining user duplicates a seed. Every other user,
/// in id order, joins the group whose running centroid is most cosine
/// similar. Users without interactions are placed at random.
fn similarity_groups<G: Rng + ?Sized>(corpus: &Corpus, num_groups: usize, rng: &mut G) -> Vec<usize> {
    let feats = user_features(corpus);
    let n = feats.len();
    let active: Vec<usize> = (0..n).filter(|&u| !corpus.user_interactions(u).is_empty()).collect();
    let mut group = vec![usize::MAX; n];
    let mut centroids: Vec<Vec<f64>> = Vec::new();

    if !active.is_empty() {
        let first = active[rng.random_range(0..active.len())];
        let mut best_sim: Vec<f64> = vec![f64::NEG_INFINITY; n];
        let mut seed = first;
        loop {
            group[seed] = centroids.len();
            centroids.push(feats[seed].clone());
            if centroids.len() == num_groups {
                break;
            }
            let mut next = None;
            let mut lowest = f64::INFINITY;
            for &u in &active {
                if group[u] != usize::MAX {
                    continue;
                }
                best_sim[u] = best_sim[u].max(cosine(&feats[u], &feats[seed]));
                if best_sim[u] < lowest {
                    lowest = best_sim[u];
                    next = Some(u);
                }
            }
            match next {
                Some(u) if lowest < 1.0 - 1e-9 => seed = u,
                _ => break,
            }
        }
    }

    for u in 0..n {
        if group[u] != usize::MAX {
            continue;
        }
        if corpus.user_interactions(u).is_empty() || centroids.is_empty() {
            group[u] = rng.random_range(0..num_groups);
            continue;
        }
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (g, c) in centroids.iter().enumerate() {
            let s = cosine(&feats[u], c);
            if s > best_sim {
                best_sim = s;
                best = g;
            }
        }
        for (x, y) in centroids[best].iter_mut().zip(&feats[u]) {
            *x += y;
        }
        group[u] = best;
    }
    group
}

/// How the sweeps of a fit are run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SamplingMode {
    Serial,
    Batch { batch_size: usize, workers: usize },
}

/// Iteration budget, checkpointing and sweep mode of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub iterations: usize,
    pub burn_in: usize,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub mode: SamplingMode,
    pub stop_on_convergence: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 400,
            burn_in: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            mode: SamplingMode::Serial,
            stop_on_convergence: false,
        }
    }
}

/// Trailing window and relative tolerance of the convergence rule.
pub const CONVERGENCE_WINDOW: usize = 50;
pub const CONVERGENCE_TOL: f64 = 0.01;

/// True when the mean of the last 50 log-likelihoods differs from the mean
/// of the 50 before by less than 1% (relative).
pub fn has_converged<T: Real>(trace: &[T]) -> bool {
    let w = CONVERGENCE_WINDOW;
    if trace.len() < 2 * w {
        return false;
    }
    let mean = |xs: &[T]| xs.iter().map(|x| x.as_f64()).sum::<f64>() / xs.len() as f64;
    let recent = mean(&trace[trace.len() - w..]);
    let before = mean(&trace[trace.len() - 2 * w..trace.len() - w]);
    ((recent - before) / before).abs() < CONVERGENCE_TOL
}

/// Final state of a fit with its log-likelihood trace.
#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub state: ModelState<T>,
    pub trace: Vec<IterationStats<T>>,
    /// First iteration (1-based) at which [`has_converged`] held after burn-in.
    pub converged_at: Option<u64>,
}

/// Initializes a state and runs [`fit_from`].
pub fn fit<T: Real>(
    corpus: &Corpus,
    config: &SamplerConfig,
    options: &FitOptions,
    on_iteration: impl FnMut(&IterationStats<T>),
) -> Result<FitOutcome<T>, ModelError> {
    let state = ModelState::initialize(corpus, config)?;
    fit_from(state, corpus, options, on_iteration)
}

/// Runs `options.iterations` sweeps from an existing state.
pub fn fit_from<T: Real>(
    mut state: ModelState<T>,
    corpus: &Corpus,
    options: &FitOptions,
    mut on_iteration: impl FnMut(&IterationStats<T>),
) -> Result<FitOutcome<T>, ModelError> {
    if options.iterations == 0 {
        return Err(ModelError::Config("iterations must be at least 1".into()));
    }
    let mut batch = match options.mode {
        SamplingMode::Serial => None,
        SamplingMode::Batch { batch_size, workers } => {
            let plan = crate::batch::plan_batches(corpus, batch_size, state.config.seed)?;
            Some(BatchSampler::new(plan, workers)?)
        }
    };
    let mut trace = Vec::with_capacity(options.iterations);
    let mut lls: Vec<T> = Vec::with_capacity(options.iterations);
    let mut converged_at = None;
    for _ in 0..options.iterations {
        let stats = match batch.as_mut() {
            None => state.gibbs_iteration(corpus)?,
            Some(b) => b.iteration(&mut state, corpus)?,
        };
        on_iteration(&stats);
        let done = stats.iteration;
        if done as usize > options.burn_in {
            lls.push(stats.log_lik);
        }
        trace.push(stats);
        if converged_at.is_none() && has_converged(&lls) {
            converged_at = Some(done);
            info!("converged at iteration {done}");
        }
        if let (Some(every), Some(dir)) = (options.checkpoint_every, options.checkpoint_dir.as_ref()) {
            if every > 0 && done % every as u64 == 0 {
                state.save_checkpoint(dir.join(format!("checkpoint-{done:06}.json")))?;
            }
        }
        if options.stop_on_convergence && converged_at.is_some() {
            break;
        }
    }
    Ok(FitOutcome { state, trace, converged_at })
}

pub const CHECKPOINT_FORMAT: &str = "cmap-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct Checkpoint<T> {
    format: String,
    version: u32,
    config: SamplerConfig,
    /// With `config.seed`, the full random-stream position.
    iteration: u64,
    num_users: usize,
    num_interactions: usize,
    seating: SeatingState,
    topics: Vec<u32>,
    params: ProfileParams<T>,
    counts: CountTables,
}

impl<T: Real> ModelState<T> {
    /// Self-describing JSON record of the whole state.
    pub fn to_checkpoint_string(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            num_users: self.seating.num_users(),
            num_interactions: self.topics.len(),
            seating: self.seating.clone(),
            topics: self.topics.clone(),
            params: self.params.clone(),
            counts: self.counts.clone(),
        };
        let mut s = serde_json::to_string(&ck).expect("checkpoint always serializes");
        s.push('\n');
        s
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_checkpoint_string().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Parses a checkpoint and verifies it against `corpus` by full recount.
    pub fn from_checkpoint_str(text: &str, corpus: &Corpus) -> Result<Self, ModelError> {
        let ck: Checkpoint<T> = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        validate_config(&ck.config)?;
        if ck.num_users != corpus.num_users() || ck.num_interactions != corpus.interactions().len() {
            return Err(ModelError::Mismatch("checkpoint was written for a different corpus".into()));
        }
        let py = PyParams::new(T::of(ck.config.gamma), T::of(ck.config.delta), ck.config.num_profiles)?;
        let mut params = ck.params;
        params.rebuild_time_cache();
        let state = Self {
            config: ck.config,
            py,
            seating: ck.seating,
            counts: ck.counts,
            params,
            topics: ck.topics,
            iteration: ck.iteration,
        };
        if state.topics.iter().any(|&k| k as usize >= state.num_topics())
            || (0..corpus.num_users()).any(|u| state.seating.profile_of(u).is_none())
        {
            return Err(ModelError::Format("checkpoint has out-of-range or missing assignments".into()));
        }
        state.check_counts(corpus)?;
        Ok(state)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Self, ModelError> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_checkpoint_str(&text, corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Interaction, Link};

    fn toy() -> Corpus {
        let mut ints = Vec::new();
        for u in 0..6 {
            for j in 0..4 {
                ints.push(Interaction {
                    user: u,
                    action: (u + j) % 3,
                    tokens: vec![(u * 3 + j) % 10, (u + 2 * j) % 10],
                    time: ((u * 7 + j * 13) % 100) as f64 / 100.0,
                    tags: None,
                });
            }
        }
        let links = vec![
            Link { source: 0, target: 1, label: 0 },
            Link { source: 2, target: 1, label: 1 },
            Link { source: 5, target: 4, label: 0 },
            Link { source: 0, target: 1, label: 0 },
        ];
        Corpus::new(6, 3, 10, 2, ints, links).unwrap()
    }

    fn cfg(r: usize, k: usize, init: InitMode) -> SamplerConfig {
        SamplerConfig { num_profiles: r, num_topics: k, seed: 17, init, gamma: 1.0, delta: 0.5 }
    }

    #[test]
    fn initialization_is_deterministic_and_consistent() {
        let c = toy();
        for init in [InitMode::Random, InitMode::Similarity] {
            let a = ModelState::<f64>::initialize(&c, &cfg(3, 4, init)).unwrap();
            let b = ModelState::<f64>::initialize(&c, &cfg(3, 4, init)).unwrap();
            assert_eq!(a, b);
            a.check_counts(&c).unwrap();
            assert_eq!(a.seating().total_seated(), 6);
        }
    }

    #[test]
    fn identical_histograms_share_a_table() {
        let ints = vec![
            Interaction { user: 0, action: 0, tokens: vec![], time: 0.1, tags: None },
            Interaction { user: 0, action: 1, tokens: vec![], time: 0.2, tags: None },
            Interaction { user: 1, action: 0, tokens: vec![1], time: 0.3, tags: None },
            Interaction { user: 1, action: 1, tokens: vec![], time: 0.4, tags: None },
            Interaction { user: 2, action: 2, tokens: vec![], time: 0.5, tags: None },
        ];
        let c = Corpus::new(3, 3, 2, 1, ints, vec![]).unwrap();
        for seed in 0..10 {
            let mut config = cfg(2, 2, InitMode::Similarity);
            config.seed = seed;
            let s = ModelState::<f64>::initialize(&c, &config).unwrap();
            assert_eq!(s.seating().table_of(0), s.seating().table_of(1));
            assert_ne!(s.seating().table_of(0), s.seating().table_of(2));
        }
    }

    #[test]
    fn iterations_keep_counts_exact() {
        let c = toy();
        let mut s = ModelState::<f64>::initialize(&c, &cfg(3, 4, InitMode::Random)).unwrap();
        for _ in 0..20 {
            let stats = s.gibbs_iteration(&c).unwrap();
            s.check_counts(&c).unwrap();
            assert!(stats.log_lik.is_finite());
            assert_eq!(stats.profile_occupancy.iter().sum::<usize>(), 6);
        }
        assert_eq!(s.iteration(), 20);
    }

    #[test]
    fn degenerate_model_is_stationary() {
        let c = toy();
        let mut s = ModelState::<f64>::initialize(&c, &cfg(1, 1, InitMode::Random)).unwrap();
        let topics = s.topics().to_vec();
        for _ in 0..5 {
            let params = s.params().clone();
            let before = s.joint_log_lik(&c);
            s.gibbs_iteration(&c).unwrap();
            assert_eq!(s.topics(), topics.as_slice());
            assert_eq!(s.user_profiles(), vec![0; 6]);
            // Only the re-estimated hyperparameters move the likelihood.
            *s.params_mut() = params;
            assert_eq!(s.joint_log_lik(&c), before);
        }
    }

    #[test]
    fn representation_properties() {
        let c = toy();
        let s = ModelState::<f64>::initialize(&c, &cfg(1, 2, InitMode::Random)).unwrap();
        assert_eq!(s.user_representation(&c, 3).unwrap(), vec![1.0]);
        let s = ModelState::<f64>::initialize(&c, &cfg(4, 2, InitMode::Random)).unwrap();
        for u in 0..6 {
            let p = s.user_representation(&c, u).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trips_bytes() {
        let c = toy();
        let mut s = ModelState::<f64>::initialize(&c, &cfg(3, 4, InitMode::Similarity)).unwrap();
        for _ in 0..3 {
            s.gibbs_iteration(&c).unwrap();
        }
        let text = s.to_checkpoint_string();
        let back = ModelState::<f64>::from_checkpoint_str(&text, &c).unwrap();
        assert_eq!(back.to_checkpoint_string(), text);
        // Resuming continues the same trajectory.
        let mut a = s.clone();
        let mut b = back;
        assert_eq!(a.gibbs_iteration(&c).unwrap().log_lik, b.gibbs_iteration(&c).unwrap().log_lik);
        assert_eq!(a, b);
        let other = Corpus::new(6, 3, 10, 2, c.interactions()[..10].to_vec(), vec![]).unwrap();
        assert!(ModelState::<f64>::from_checkpoint_str(&text, &other).is_err());
    }

    #[test]
    fn f32_model_runs() {
        let c = toy();
        let mut s = ModelState::<f32>::initialize(&c, &cfg(3, 4, InitMode::Random)).unwrap();
        for _ in 0..5 {
            let st = s.gibbs_iteration(&c).unwrap();
            assert!(st.log_lik.is_finite());
        }
        s.check_counts(&c).unwrap();
    }

    #[test]
    fn convergence_rule() {
        let flat: Vec<f64> = vec![-100.0; 100];
        assert!(has_converged(&flat));
        assert!(!has_converged(&flat[..99]));
        let mut rising: Vec<f64> = vec![-200.0; 50];
        rising.extend(vec![-100.0; 50]);
        assert!(!has_converged(&rising));
    }

    fn planted(seed: u64) -> (Corpus, crate::generator::GroundTruth) {
        use crate::generator::{generate, CountSpec, GeneratorConfig};
        let cfg = GeneratorConfig {
            num_profiles: 3,
            num_topics: 4,
            num_users: 120,
            vocab_size: 60,
            interactions_per_user: CountSpec::Fixed { n: 15 },
            separation: 5.0,
            seed,
            ..GeneratorConfig::default()
        };
        generate(&cfg).unwrap()
    }

    #[test]
    fn planted_assignments_beat_perturbations() {
        let (c, t) = planted(4);
        let config = cfg(3, 4, InitMode::Random);
        let topics: Vec<u32> = t.true_topic.iter().map(|&k| k as u32).collect();
        let truth_ll = ModelState::<f64>::from_assignments(&c, &config, &t.true_profile, &topics)
            .unwrap()
            .joint_log_lik(&c);
        let mut rng = rng::stream(1, 0, 0);
        for _ in 0..100 {
            let mut profiles = t.true_profile.clone();
            let mut topics = topics.clone();
            for _ in 0..5 {
                let u = rng.random_range(0..profiles.len());
                profiles[u] = (profiles[u] + rng.random_range(1..3)) % 3;
                let i = rng.random_range(0..topics.len());
                topics[i] = (topics[i] + rng.random_range(1..4)) % 4;
            }
            let ll = ModelState::<f64>::from_assignments(&c, &config, &profiles, &topics)
                .unwrap()
                .joint_log_lik(&c);
            assert!(ll < truth_ll, "{ll} >= {truth_ll}");
        }
    }

    #[test]
    fn training_improves_heldout_likelihood() {
        let (c, _) = planted(6);
        let (train, test) = c.split_holdout(0.2, 3).unwrap();
        let fresh = ModelState::<f64>::initialize(&train, &cfg(3, 4, InitMode::Random)).unwrap();
        let before = fresh.heldout_log_lik(&train, &test).unwrap();
        let options = FitOptions { iterations: 40, ..FitOptions::default() };
        let trained = fit_from(fresh, &train, &options, |_| {}).unwrap().state;
        let after = trained.heldout_log_lik(&train, &test).unwrap();
        assert_eq!(after.scored, test.interactions().len());
        assert!(after.mean_log_lik > before.mean_log_lik, "{} <= {}", after.mean_log_lik, before.mean_log_lik);
    }

    #[test]
    fn heldout_score_with_one_profile_and_topic() {
        let c = toy();
        let (train, test) = c.split_holdout(0.25, 0).unwrap();
        let s = ModelState::<f64>::initialize(&train, &cfg(1, 1, InitMode::Random)).unwrap();
        let score = s.heldout_log_lik(&train, &test).unwrap();
        let mut expected = 0.0;
        for d in test.interactions() {
            expected += crate::profiles::interaction_log_lik(d, 0, s.counts(), s.params()).unwrap();
        }
        expected /= test.interactions().len() as f64;
        assert!((score.mean_log_lik - expected).abs() < 1e-12);
        assert!(score.mean_log_lik < 0.0);
    }

    #[test]
    fn checkpoints_written_on_schedule() {
        let c = toy();
        let dir = tempfile::tempdir().unwrap();
        let options = FitOptions {
            iterations: 6,
            checkpoint_every: Some(2),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..FitOptions::default()
        };
        let outcome = fit::<f64>(&c, &cfg(2, 3, InitMode::Similarity), &options, |_| {}).unwrap();
        let mut names: Vec<String> =
            std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["checkpoint-000002.json", "checkpoint-000004.json", "checkpoint-000006.json"]);
        let last = ModelState::<f64>::load_checkpoint(dir.path().join(&names[2]), &c).unwrap();
        assert_eq!(last, outcome.state);
    }
}
