use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::real::{ln_beta, Real};

/// Grid points of the time cache: `t = 0.00, 0.01, ..., 1.00`.
pub const TIME_GRID: usize = 101;
/// Lowest time fed to a Beta density.
pub const TIME_CLAMP_LO: f64 = 0.005;
/// Highest time fed to a Beta density.
pub const TIME_CLAMP_HI: f64 = 0.995;

/// Index of the grid point nearest to `t`.
#[inline]
pub fn time_bin(t: f64) -> usize {
    ((t * 100.0).round().max(0.0) as usize).min(TIME_GRID - 1)
}

/// Time value of grid point `bin`.
#[inline]
pub fn grid_time(bin: usize) -> f64 {
    bin as f64 / 100.0
}

/// `log Beta(t; alpha, beta)` with `t` clamped to `[0.005, 0.995]`.
pub fn beta_log_pdf<T: Real>(t: T, alpha: T, beta: T) -> Result<T, ModelError> {
    if !(alpha > T::zero() && beta > T::zero()) || !alpha.is_finite() || !beta.is_finite() {
        return Err(ModelError::InvalidBeta { alpha: alpha.as_f64(), beta: beta.as_f64() });
    }
    let t = t.max(T::of(TIME_CLAMP_LO)).min(T::of(TIME_CLAMP_HI));
    let one = T::one();
    Ok((alpha - one) * t.ln() + (beta - one) * (one - t).ln() - ln_beta(alpha, beta))
}

/// Symmetric Dirichlet concentrations of the four multinomial families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletPriors<T> {
    /// Over words, per topic.
    pub words: T,
    /// Over actions, per topic.
    pub actions: T,
    /// Over topics, per profile.
    pub topics: T,
    /// Over link labels, per ordered profile pair.
    pub labels: T,
}

impl<T: Real> DirichletPriors<T> {
    /// `0.01` for words and `50 / |X|` for actions, topics and labels.
    pub fn defaults(num_actions: usize, num_topics: usize, num_labels: usize) -> Self {
        Self {
            words: T::of(0.01),
            actions: T::of(50.0 / num_actions as f64),
            topics: T::of(50.0 / num_topics as f64),
            labels: T::of(50.0 / num_labels as f64),
        }
    }
}

/// Per-(profile, topic) Beta parameters, the Dirichlet priors and the cached
/// time log-densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams<T> {
    num_profiles: usize,
    num_topics: usize,
    beta_alpha: Vec<T>,
    beta_beta: Vec<T>,
    pub priors: DirichletPriors<T>,
    #[serde(skip)]
    time_cache: Vec<T>,
    #[serde(skip)]
    cache_fresh: bool,
}

impl<T: Real> ProfileParams<T> {
    /// Beta parameters all `(1, 1)`; the cache is built immediately.
    pub fn new(num_profiles: usize, num_topics: usize, priors: DirichletPriors<T>) -> Self {
        let cells = num_profiles * num_topics;
        let mut p = Self {
            num_profiles,
            num_topics,
            beta_alpha: vec![T::one(); cells],
            beta_beta: vec![T::one(); cells],
            priors,
            time_cache: Vec::new(),
            cache_fresh: false,
        };
        p.rebuild_time_cache();
        p
    }

    pub fn num_profiles(&self) -> usize {
        self.num_profiles
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    /// `(alpha_rk, beta_rk)`.
    pub fn beta(&self, profile: usize, topic: usize) -> (T, T) {
        let i = profile * self.num_topics + topic;
        (self.beta_alpha[i], self.beta_beta[i])
    }

    /// Sets one Beta pair and marks the time cache stale.
    pub fn set_beta(&mut self, profile: usize, topic: usize, alpha: T, beta: T) -> Result<(), ModelError> {
        if !(alpha > T::zero() && beta > T::zero()) || !alpha.is_finite() || !beta.is_finite() {
            return Err(ModelError::InvalidBeta { alpha: alpha.as_f64(), beta: beta.as_f64() });
        }
        let i = profile * self.num_topics + topic;
        self.beta_alpha[i] = alpha;
        self.beta_beta[i] = beta;
        self.cache_fresh = false;
        Ok(())
    }

    pub fn cache_is_fresh(&self) -> bool {
        self.cache_fresh
    }

    /// Recomputes every `(r, k, t)` grid entry from the current Beta
    /// parameters.
    pub fn rebuild_time_cache(&mut self) {
        let cells = self.num_profiles * self.num_topics;
        self.time_cache.clear();
        self.time_cache.reserve(cells * TIME_GRID);
        for i in 0..cells {
            let (a, b) = (self.beta_alpha[i], self.beta_beta[i]);
            for bin in 0..TIME_GRID {
                let v = beta_log_pdf(T::of(grid_time(bin)), a, b).expect("Beta parameters validated on set");
                self.time_cache.push(v);
            }
        }
        self.cache_fresh = true;
    }

    /// Cached `log p(t | r, k)` at grid point `bin`.
    #[inline]
    pub fn cached_time_log_pdf(&self, profile: usize, topic: usize, bin: usize) -> T {
        debug_assert!(self.cache_fresh, "time cache read while stale");
        self.time_cache[(profile * self.num_topics + topic) * TIME_GRID + bin]
    }

    /// The cached row for `(r, k)`, indexed by time bin.
    #[inline]
    pub(crate) fn time_row(&self, profile: usize, topic: usize) -> &[T] {
        let start = (profile * self.num_topics + topic) * TIME_GRID;
        &self.time_cache[start..start + TIME_GRID]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_pdf_closed_forms() {
        for t in [0.0, 0.3, 0.5, 1.0] {
            assert_eq!(beta_log_pdf(t, 1.0f64, 1.0).unwrap(), 0.0);
        }
        let v = beta_log_pdf(0.5f64, 2.0, 2.0).unwrap();
        assert!((v - 1.5f64.ln()).abs() < 1e-12);
        assert!(beta_log_pdf(0.5f64, 0.0, 1.0).is_err());
        assert!(beta_log_pdf(0.5f64, 1.0, -2.0).is_err());
    }

    fn trapezoid(f: impl Fn(f64) -> f64) -> f64 {
        let n = 10_000;
        let h = 1.0 / n as f64;
        let mut s = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n {
            s += f(i as f64 * h);
        }
        s * h
    }

    #[test]
    fn beta_pdf_integrates_to_one() {
        use statrs::distribution::{Beta, ContinuousCDF};
        // The unclamped kernel on the same 10,001 points.
        let raw = |t: f64| (t * (1.0 - t).powi(4) * 30.0).max(0.0);
        assert!((trapezoid(raw) - 1.0).abs() < 1e-4);
        // Clamping holds the density flat on the two outer strips; the
        // quadrature then equals one plus that exactly computable excess.
        let cdf = Beta::new(2.0, 5.0).unwrap();
        let f = |t: f64| beta_log_pdf(t, 2.0f64, 5.0).unwrap().exp();
        let excess = TIME_CLAMP_LO * f(TIME_CLAMP_LO) - cdf.cdf(TIME_CLAMP_LO) + (1.0 - TIME_CLAMP_HI) * f(TIME_CLAMP_HI)
            - (1.0 - cdf.cdf(TIME_CLAMP_HI));
        let clamped = trapezoid(f);
        assert!((clamped - (1.0 + excess)).abs() < 1e-4, "integral {clamped}, excess {excess}");
        for i in 5..=995 {
            let t = i as f64 / 1000.0;
            assert!((f(t) - raw(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints_stay_finite_for_u_shapes() {
        for t in [0.0, 1.0] {
            assert!(beta_log_pdf(t, 0.3f64, 0.4).unwrap().is_finite());
        }
    }

    #[test]
    fn cache_matches_definition_and_tracks_staleness() {
        let mut p = ProfileParams::new(2, 3, DirichletPriors::<f64>::defaults(5, 3, 2));
        assert!(p.cache_is_fresh());
        for bin in 0..TIME_GRID {
            assert_eq!(p.cached_time_log_pdf(1, 2, bin), 0.0);
        }
        p.set_beta(1, 2, 2.0, 5.0).unwrap();
        assert!(!p.cache_is_fresh());
        p.rebuild_time_cache();
        assert_eq!(p.cached_time_log_pdf(1, 2, 37), beta_log_pdf(0.37, 2.0, 5.0).unwrap());
        assert_eq!(p.cached_time_log_pdf(1, 2, 0), beta_log_pdf(TIME_CLAMP_LO, 2.0, 5.0).unwrap());
    }

    #[test]
    #[should_panic(expected = "stale")]
    #[cfg(debug_assertions)]
    fn stale_read_trips_debug_assertion() {
        let mut p = ProfileParams::new(1, 1, DirichletPriors::<f64>::defaults(1, 1, 1));
        p.set_beta(0, 0, 3.0, 3.0).unwrap();
        let _ = p.cached_time_log_pdf(0, 0, 10);
    }

    #[test]
    fn bins_round_to_two_digits() {
        assert_eq!(time_bin(0.0), 0);
        assert_eq!(time_bin(0.374), 37);
        assert_eq!(time_bin(0.376), 38);
        assert_eq!(time_bin(1.0), 100);
        for b in 0..TIME_GRID {
            assert_eq!(time_bin(grid_time(b)), b);
        }
    }

    #[test]
    fn defaults_follow_vocabulary_sizes() {
        let p = DirichletPriors::<f64>::defaults(5, 50, 2);
        assert_eq!(p.words, 0.01);
        assert_eq!(p.actions, 10.0);
        assert_eq!(p.topics, 1.0);
        assert_eq!(p.labels, 25.0);
    }
}
