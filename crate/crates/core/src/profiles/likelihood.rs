//! Smoothed collapsed likelihoods.
//!
//! All values are natural logs. The per-profile scorer used by the samplers
//! and the single-profile functions below perform the same floating-point
//! operations in the same order, so they agree bit for bit.

use crate::corpus::{Corpus, Interaction};
use crate::error::ModelError;
use crate::pycrp::SeatingState;
use crate::real::Real;

use super::counts::CountTables;
use super::params::{beta_log_pdf, time_bin, ProfileParams};

#[inline]
fn ratio_ln<T: Real>(count: u32, prior: T, total: u32, dim: usize) -> T {
    (T::of(count as f64) + prior).ln() - (T::of(total as f64) + T::of_usize(dim) * prior).ln()
}

/// `log p(a, W | k)`: smoothed action factor times one smoothed word factor
/// per token (repeated tokens repeat the factor).
pub fn action_word_log_lik<T: Real>(
    topic: usize,
    action: usize,
    tokens: &[usize],
    counts: &CountTables,
    params: &ProfileParams<T>,
) -> T {
    let pri = &params.priors;
    let mut acc = ratio_ln(
        counts.topic_action(topic, action),
        pri.actions,
        counts.topic_action_total(topic),
        counts.num_actions(),
    );
    if !tokens.is_empty() {
        let denom = (T::of(counts.topic_word_total(topic) as f64) + T::of_usize(counts.vocab_size()) * pri.words).ln();
        for &w in tokens {
            acc = acc + ((T::of(counts.topic_word(topic, w) as f64) + pri.words).ln() - denom);
        }
    }
    acc
}

/// `log φ_r^K(k)` smoothed.
#[inline]
pub fn profile_topic_log_weight<T: Real>(profile: usize, topic: usize, counts: &CountTables, params: &ProfileParams<T>) -> T {
    ratio_ln(
        counts.profile_topic(profile, topic),
        params.priors.topics,
        counts.profile_total(profile),
        counts.num_topics(),
    )
}

/// `log φ_{p,p'}^L(l)` smoothed.
pub fn link_log_lik<T: Real>(
    source_profile: usize,
    target_profile: usize,
    label: usize,
    counts: &CountTables,
    params: &ProfileParams<T>,
) -> T {
    ratio_ln(
        counts.link(source_profile, target_profile, label),
        params.priors.labels,
        counts.link_total(source_profile, target_profile),
        counts.num_labels(),
    )
}

/// `log Σ_k exp(terms[k])` over a scratch slice.
#[inline]
fn mix<T: Real>(terms: &[T]) -> T {
    let mut max = T::neg_infinity();
    for &x in terms {
        if x > max {
            max = x;
        }
    }
    let mut s = T::zero();
    for &x in terms {
        s = s + (x - max).exp();
    }
    max + s.ln()
}

fn mixture_log_lik<T: Real>(
    d: &Interaction,
    profile: usize,
    counts: &CountTables,
    params: &ProfileParams<T>,
    time_term: impl Fn(usize) -> T,
) -> T {
    let terms: Vec<T> = (0..counts.num_topics())
        .map(|k| {
            profile_topic_log_weight(profile, k, counts, params)
                + action_word_log_lik(k, d.action, &d.tokens, counts, params)
                + time_term(k)
        })
        .collect();
    mix(&terms)
}

/// `log p(d | r)` with the time density read from the grid cache at `t`
/// rounded to two digits.
pub fn interaction_log_lik<T: Real>(
    d: &Interaction,
    profile: usize,
    counts: &CountTables,
    params: &ProfileParams<T>,
) -> Result<T, ModelError> {
    if !params.cache_is_fresh() {
        return Err(ModelError::StaleTimeCache);
    }
    let bin = time_bin(d.time);
    Ok(mixture_log_lik(d, profile, counts, params, |k| params.cached_time_log_pdf(profile, k, bin)))
}

/// `log p(d | r)` evaluating the Beta density at the exact time, without the
/// cache.
pub fn interaction_log_lik_direct<T: Real>(
    d: &Interaction,
    profile: usize,
    counts: &CountTables,
    params: &ProfileParams<T>,
) -> Result<T, ModelError> {
    let t = T::of(d.time);
    let mut times = Vec::with_capacity(counts.num_topics());
    for k in 0..counts.num_topics() {
        let (a, b) = params.beta(profile, k);
        times.push(beta_log_pdf(t, a, b)?);
    }
    Ok(mixture_log_lik(d, profile, counts, params, |k| times[k]))
}

/// `log p(u | r)`: interactions, then inward links, then outward links.
///
/// The user's own contributions must already be removed from `counts`;
/// every neighbor must be seated.
pub fn user_log_lik<T: Real>(
    user: usize,
    profile: usize,
    corpus: &Corpus,
    counts: &CountTables,
    seating: &SeatingState,
    params: &ProfileParams<T>,
) -> Result<T, ModelError> {
    let mut acc = T::zero();
    for &i in corpus.user_interactions(user) {
        acc = acc + interaction_log_lik(&corpus.interactions()[i], profile, counts, params)?;
    }
    for &li in corpus.user_in_links(user) {
        let l = corpus.links()[li];
        let rs = seating
            .profile_of(l.source)
            .ok_or(ModelError::NeighborUnseated { user, neighbor: l.source })?;
        acc = acc + link_log_lik(rs, profile, l.label, counts, params);
    }
    for &li in corpus.user_out_links(user) {
        let l = corpus.links()[li];
        let rt = seating
            .profile_of(l.target)
            .ok_or(ModelError::NeighborUnseated { user, neighbor: l.target })?;
        acc = acc + link_log_lik(profile, rt, l.label, counts, params);
    }
    Ok(acc)
}

/// Reusable buffers for scoring one user against every profile.
///
/// After [`ProfileScorer::score`], the per-topic log-terms of each of the
/// user's interactions are available through [`ProfileScorer::topic_terms`].
#[derive(Debug, Clone, Default)]
pub struct ProfileScorer<T> {
    num_profiles: usize,
    num_topics: usize,
    log_theta: Vec<T>,
    action_word: Vec<T>,
    bins: Vec<usize>,
    terms: Vec<T>,
}

impl<T: Real> ProfileScorer<T> {
    pub fn new() -> Self {
        Self {
            num_profiles: 0,
            num_topics: 0,
            log_theta: Vec::new(),
            action_word: Vec::new(),
            bins: Vec::new(),
            terms: Vec::new(),
        }
    }

    /// Fills `out[r] = log p(u | r)` for every profile.
    ///
    /// With `skip_unseated`, links to unseated neighbors are ignored and
    /// counted in the return value; otherwise they are an error.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        &mut self,
        user: usize,
        corpus: &Corpus,
        counts: &CountTables,
        seating: &SeatingState,
        params: &ProfileParams<T>,
        skip_unseated: bool,
        out: &mut Vec<T>,
    ) -> Result<usize, ModelError> {
        if !params.cache_is_fresh() {
            return Err(ModelError::StaleTimeCache);
        }
        let (nr, nk) = (counts.num_profiles(), counts.num_topics());
        self.num_profiles = nr;
        self.num_topics = nk;
        out.clear();
        out.resize(nr, T::zero());

        let ints = corpus.user_interactions(user);
        if !ints.is_empty() {
            self.log_theta.clear();
            for r in 0..nr {
                for k in 0..nk {
                    self.log_theta.push(profile_topic_log_weight(r, k, counts, params));
                }
            }
            self.action_word.clear();
            self.bins.clear();
            for &i in ints {
                let d = &corpus.interactions()[i];
                self.bins.push(time_bin(d.time));
                for k in 0..nk {
                    self.action_word.push(action_word_log_lik(k, d.action, &d.tokens, counts, params));
                }
            }
            self.terms.resize(nk, T::zero());
            for j in 0..ints.len() {
                let bin = self.bins[j];
                let aw = &self.action_word[j * nk..(j + 1) * nk];
                for (r, slot) in out.iter_mut().enumerate() {
                    let theta = &self.log_theta[r * nk..(r + 1) * nk];
                    for k in 0..nk {
                        self.terms[k] = theta[k] + aw[k] + params.time_row(r, k)[bin];
                    }
                    *slot = *slot + mix(&self.terms);
                }
            }
        }

        let mut skipped = 0;
        for &li in corpus.user_in_links(user) {
            let l = corpus.links()[li];
            match seating.profile_of(l.source) {
                Some(rs) => {
                    for (r, slot) in out.iter_mut().enumerate() {
                        *slot = *slot + link_log_lik(rs, r, l.label, counts, params);
                    }
                }
                None if skip_unseated => skipped += 1,
                None => return Err(ModelError::NeighborUnseated { user, neighbor: l.source }),
            }
        }
        for &li in corpus.user_out_links(user) {
            let l = corpus.links()[li];
            match seating.profile_of(l.target) {
                Some(rt) => {
                    for (r, slot) in out.iter_mut().enumerate() {
                        *slot = *slot + link_log_lik(r, rt, l.label, counts, params);
                    }
                }
                None if skip_unseated => skipped += 1,
                None => return Err(ModelError::NeighborUnseated { user, neighbor: l.target }),
            }
        }
        Ok(skipped)
    }

    /// Per-topic log-terms `log φ_r(k) + log p(a, W | k) + log p(t | r, k)`
    /// of the `j`-th interaction of the last scored user, under `profile`.
    pub fn topic_terms(&self, j: usize, profile: usize, params: &ProfileParams<T>, out: &mut Vec<T>) {
        let nk = self.num_topics;
        let theta = &self.log_theta[profile * nk..(profile + 1) * nk];
        let aw = &self.action_word[j * nk..(j + 1) * nk];
        let bin = self.bins[j];
        out.clear();
        out.extend((0..nk).map(|k| theta[k] + aw[k] + params.time_row(profile, k)[bin]));
    }
}
