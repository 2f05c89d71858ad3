//! End-of-iteration parameter estimation: method-of-moments Beta fits and
//! fixed-point updates of the symmetric Dirichlet concentrations.

use std::collections::BTreeMap;

use crate::real::{digamma, ln_gamma, Real};

use super::counts::CountTables;
use super::params::ProfileParams;

/// Cells with fewer assigned times keep the uniform `(1, 1)` Beta.
pub const MIN_BETA_SAMPLES: usize = 8;
/// Variances below this are treated as degenerate.
pub const MIN_BETA_VARIANCE: f64 = 1e-9;

pub const DIRICHLET_MIN: f64 = 1e-4;
pub const DIRICHLET_MAX: f64 = 1e4;
pub const DIRICHLET_TOL: f64 = 1e-4;
pub const DIRICHLET_MAX_STEPS: usize = 100;

/// Beta parameters matching mean `m` and variance `v`, or `None` when the
/// moments are not those of any Beta distribution (or too close to a point
/// mass).
pub fn beta_from_moments<T: Real>(mean: T, var: T) -> Option<(T, T)> {
    let one = T::one();
    let spread = mean * (one - mean);
    if !(mean > T::zero() && mean < one) || var >= spread || var < T::of(MIN_BETA_VARIANCE) {
        return None;
    }
    let c = spread / var - one;
    Some((mean * c, (one - mean) * c))
}

/// Method-of-moments Beta fit with the `(1, 1)` fallback for small or
/// degenerate samples.
pub fn fit_beta_mom<T: Real>(samples: &[T]) -> (T, T) {
    let uniform = (T::one(), T::one());
    if samples.len() < MIN_BETA_SAMPLES {
        return uniform;
    }
    let n = T::of_usize(samples.len());
    let mean = samples.iter().copied().sum::<T>() / n;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / (n - T::one());
    beta_from_moments(mean, var).unwrap_or(uniform)
}

/// Re-fits every `(r, k)` Beta from the times of the interactions currently
/// assigned to it. `cells` yields `(profile, topic, time)`. Leaves the time
/// cache stale.
pub fn refit_beta_params<T: Real>(params: &mut ProfileParams<T>, cells: impl Iterator<Item = (usize, usize, f64)>) {
    let nk = params.num_topics();
    let mut times: Vec<Vec<T>> = vec![Vec::new(); params.num_profiles() * nk];
    for (r, k, t) in cells {
        times[r * nk + k].push(T::of(t));
    }
    for (i, ts) in times.iter().enumerate() {
        let (a, b) = fit_beta_mom(ts);
        params.set_beta(i / nk, i % nk, a, b).expect("MoM fit is always positive");
    }
}

/// Sufficient statistics of a symmetric Dirichlet-multinomial likelihood:
/// histograms of the non-zero cell counts and of the non-empty row totals.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletEvidence {
    dim: usize,
    cells: Vec<(u32, u64)>,
    totals: Vec<(u32, u64)>,
}

impl DirichletEvidence {
    /// From `(row counts, row total)` pairs; every row has `dim` cells.
    pub fn from_rows<'a>(dim: usize, rows: impl Iterator<Item = (&'a [u32], u32)>) -> Self {
        let mut cells = BTreeMap::new();
        let mut totals = BTreeMap::new();
        for (row, total) in rows {
            if total == 0 {
                continue;
            }
            *totals.entry(total).or_insert(0u64) += 1;
            for &c in row {
                if c > 0 {
                    *cells.entry(c).or_insert(0u64) += 1;
                }
            }
        }
        Self { dim, cells: cells.into_iter().collect(), totals: totals.into_iter().collect() }
    }

    pub fn is_empty(&self) -> bool {
        self.totals.is_empty()
    }

    /// Log-likelihood of the observed counts under concentration `alpha`,
    /// dropping the multinomial coefficients.
    pub fn log_likelihood<T: Real>(&self, alpha: T) -> T {
        let jalpha = T::of_usize(self.dim) * alpha;
        let mut acc = T::zero();
        for &(n, m) in &self.totals {
            acc = acc + T::of(m as f64) * (ln_gamma(jalpha) - ln_gamma(T::of(n as f64) + jalpha));
        }
        for &(c, m) in &self.cells {
            acc = acc + T::of(m as f64) * (ln_gamma(T::of(c as f64) + alpha) - ln_gamma(alpha));
        }
        acc
    }

    /// One fixed-point step
    /// `α ← α Σ[ψ(n_gj + α) - ψ(α)] / (J Σ[ψ(n_g + Jα) - ψ(Jα)])`.
    pub fn fixed_point_step<T: Real>(&self, alpha: T) -> T {
        if self.is_empty() {
            return alpha;
        }
        let j = T::of_usize(self.dim);
        let psi_a = digamma(alpha);
        let psi_ja = digamma(j * alpha);
        let num: T = self
            .cells
            .iter()
            .map(|&(c, m)| T::of(m as f64) * (digamma(T::of(c as f64) + alpha) - psi_a))
            .sum();
        let den: T = self
            .totals
            .iter()
            .map(|&(n, m)| T::of(m as f64) * (digamma(T::of(n as f64) + j * alpha) - psi_ja))
            .sum();
        if !(den > T::zero()) || !(num > T::zero()) {
            return alpha;
        }
        alpha * num / (j * den)
    }

    /// Iterates the fixed point to a relative change below `1e-4` (at most
    /// 100 steps), clamped to `[1e-4, 1e4]`.
    pub fn optimize<T: Real>(&self, start: T) -> T {
        if self.is_empty() {
            return start;
        }
        let (lo, hi) = (T::of(DIRICHLET_MIN), T::of(DIRICHLET_MAX));
        let mut alpha = start.max(lo).min(hi);
        for _ in 0..DIRICHLET_MAX_STEPS {
            let next = self.fixed_point_step(alpha).max(lo).min(hi);
            let rel = ((next - alpha) / alpha).abs();
            alpha = next;
            if rel < T::of(DIRICHLET_TOL) {
                break;
            }
        }
        alpha
    }
}

/// Updates the four symmetric concentrations from the current counts.
pub fn update_dirichlet_priors<T: Real>(counts: &CountTables, params: &mut ProfileParams<T>) {
    let words = DirichletEvidence::from_rows(counts.vocab_size(), counts.topic_word_rows());
    let actions = DirichletEvidence::from_rows(counts.num_actions(), counts.topic_action_rows());
    let topics = DirichletEvidence::from_rows(counts.num_topics(), counts.profile_topic_rows());
    let labels = DirichletEvidence::from_rows(counts.num_labels(), counts.link_rows());
    let p = &mut params.priors;
    p.words = words.optimize(p.words);
    p.actions = actions.optimize(p.actions);
    p.topics = topics.optimize(p.topics);
    p.labels = labels.optimize(p.labels);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::params::DirichletPriors;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Distribution, Gamma};

    #[test]
    fn moment_closed_forms() {
        let (a, b) = beta_from_moments(0.5f64, 1.0 / 12.0).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let (a, b) = beta_from_moments(0.5f64, 0.05).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert_eq!(beta_from_moments(0.5f64, 0.25), None);
        assert_eq!(beta_from_moments(0.5f64, 1e-12), None);
    }

    #[test]
    fn degenerate_samples_fall_back_to_uniform() {
        assert_eq!(fit_beta_mom(&[0.2f64, 0.4]), (1.0, 1.0));
        assert_eq!(fit_beta_mom(&[0.3f64; 20]), (1.0, 1.0));
        let bimodal: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        assert_eq!(fit_beta_mom(&bimodal), (1.0, 1.0));
    }

    #[test]
    fn recovers_beta_2_5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Beta::new(2.0, 5.0).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
        let (a, b) = fit_beta_mom(&xs);
        assert!((a - 2.0).abs() / 2.0 < 0.1, "alpha {a}");
        assert!((b - 5.0).abs() / 5.0 < 0.1, "beta {b}");
    }

    fn rows_from(groups: &[Vec<u32>]) -> Vec<(Vec<u32>, u32)> {
        groups.iter().map(|g| (g.clone(), g.iter().sum())).collect()
    }

    fn evidence(groups: &[Vec<u32>]) -> DirichletEvidence {
        let rows = rows_from(groups);
        DirichletEvidence::from_rows(groups[0].len(), rows.iter().map(|(r, t)| (r.as_slice(), *t)))
    }

    /// Draws `groups` rows of `n` multinomial counts from `Dir(alpha)` mixtures.
    fn draw_dm(rng: &mut ChaCha8Rng, alpha: f64, dim: usize, groups: usize, n: usize) -> Vec<Vec<u32>> {
        let g = Gamma::new(alpha, 1.0).unwrap();
        (0..groups)
            .map(|_| {
                let mut p: Vec<f64> = (0..dim).map(|_| g.sample(rng)).collect();
                let s: f64 = p.iter().sum();
                p.iter_mut().for_each(|x| *x /= s);
                let mut row = vec![0u32; dim];
                for _ in 0..n {
                    let u: f64 = rng.random();
                    row[crate::real::sample_weighted(&p, u)] += 1;
                }
                row
            })
            .collect()
    }

    #[test]
    fn empty_evidence_leaves_alpha_unchanged() {
        let e = evidence(&[vec![0, 0, 0], vec![0, 0, 0]]);
        assert!(e.is_empty());
        assert_eq!(e.optimize(0.37f64), 0.37);
        let counts = CountTables::new(2, 3, 4, 5, 2);
        let mut params = ProfileParams::new(2, 3, DirichletPriors::<f64>::defaults(5, 3, 2));
        let before = params.priors;
        update_dirichlet_priors(&counts, &mut params);
        assert_eq!(params.priors, before);
    }

    #[test]
    fn fixed_point_likelihood_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = evidence(&draw_dm(&mut rng, 0.3, 12, 40, 60));
        let mut alpha = 5.0f64;
        let mut ll = e.log_likelihood(alpha);
        for _ in 0..50 {
            alpha = e.fixed_point_step(alpha);
            let next = e.log_likelihood(alpha);
            assert!(next >= ll - 1e-9, "{next} < {ll}");
            ll = next;
        }
    }

    #[test]
    fn fixed_point_is_self_consistent_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = 0.5f64;
        let mut drift = 0.0;
        for _ in 0..20 {
            let e = evidence(&draw_dm(&mut rng, truth, 10, 200, 50));
            drift += (e.fixed_point_step(truth) - truth).abs() / truth;
        }
        assert!(drift / 20.0 < 0.05, "mean drift {}", drift / 20.0);
    }

    #[test]
    fn optimize_respects_clamp() {
        // A single dominant cell per row pushes alpha towards zero.
        let e = evidence(&[vec![100, 0, 0, 0], vec![0, 100, 0, 0]]);
        let a = e.optimize(1.0f64);
        assert!((DIRICHLET_MIN..0.01).contains(&a));
        // Perfectly even rows push alpha up to the ceiling.
        let e = evidence(&vec![vec![50u32; 4]; 30]);
        assert!(e.optimize(1.0f64) <= DIRICHLET_MAX);
    }
}
