//! Parallel batch sampling.
//!
//! Users are packed into fixed batches by longest-processing-time-first on
//! their interaction-plus-link load. Each iteration visits the batches in a
//! shuffled order. For a batch, the writer removes every member from the
//! live state, workers draw proposals for all members against that frozen
//! state in parallel, and the writer applies the proposals one by one in
//! batch order.
//!
//! With `batch_size = 1` the visitation order, the random streams and the
//! table-id reuse coincide with the serial sweep, so both produce bitwise
//! identical states.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::ModelError;
use crate::real::Real;
use crate::rng;
use crate::sampler::{IterationStats, ModelState, Proposal, Scratch};

/// A fixed partition of the users into batches of at most `batch_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    batch_size: usize,
    batches: Vec<Vec<usize>>,
    loads: Vec<usize>,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Batches sorted by smallest member; members ascending.
    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    /// Summed user load of every batch.
    pub fn loads(&self) -> &[usize] {
        &self.loads
    }

    /// Largest batch load over the mean batch load.
    pub fn imbalance(&self) -> f64 {
        let max = self.loads.iter().copied().max().unwrap_or(0) as f64;
        let mean = self.loads.iter().sum::<usize>() as f64 / self.loads.len().max(1) as f64;
        if mean == 0.0 {
            1.0
        } else {
            max / mean
        }
    }
}

/// Packs users into `ceil(|U| / batch_size)` batches, heaviest user first,
/// each into the lightest batch that still has room. Users of equal load are
/// dealt in a seed-shuffled order.
pub fn plan_batches(corpus: &Corpus, batch_size: usize, seed: u64) -> Result<BatchPlan, ModelError> {
    if batch_size == 0 {
        return Err(ModelError::Config("batch size must be at least 1".into()));
    }
    let n = corpus.num_users();
    let num_batches = n.div_ceil(batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 0, rng::PLAN_STREAM));
    order.sort_by_key(|&u| std::cmp::Reverse(corpus.user_load(u)));

    let mut batches: Vec<Vec<usize>> = vec![Vec::with_capacity(batch_size); num_batches];
    let mut loads = vec![0usize; num_batches];
    for u in order {
        let b = (0..num_batches)
            .filter(|&b| batches[b].len() < batch_size)
            .min_by_key(|&b| (loads[b], b))
            .expect("capacity covers every user");
        batches[b].push(u);
        loads[b] += corpus.user_load(u);
    }

    let mut paired: Vec<(Vec<usize>, usize)> = batches
        .into_iter()
        .zip(loads)
        .map(|(mut b, l)| {
            b.sort_unstable();
            (b, l)
        })
        .collect();
    paired.sort_by_key(|(b, _)| b[0]);
    let (batches, loads) = paired.into_iter().unzip();
    Ok(BatchPlan { batch_size, batches, loads })
}

/// Runs batch sweeps on a dedicated thread pool.
pub struct BatchSampler {
    plan: BatchPlan,
    pool: rayon::ThreadPool,
    fault: Option<(u64, usize)>,
}

impl BatchSampler {
    pub fn new(plan: BatchPlan, workers: usize) -> Result<Self, ModelError> {
        if workers == 0 {
            return Err(ModelError::Config("at least one worker is required".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| ModelError::Config(format!("cannot start worker pool: {e}")))?;
        Ok(Self { plan, pool, fault: None })
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    /// Makes the worker proposing for `user` panic during `iteration`
    /// (0-based). Test hook for the rollback path.
    #[doc(hidden)]
    pub fn inject_worker_panic(&mut self, iteration: u64, user: usize) {
        self.fault = Some((iteration, user));
    }

    /// One full batch sweep plus the end-of-iteration parameter updates.
    ///
    /// If a worker fails, the batch being processed is rolled back so the
    /// state is exactly as it was before that batch, and the error is
    /// returned.
    pub fn iteration<T: Real>(
        &mut self,
        state: &mut ModelState<T>,
        corpus: &Corpus,
    ) -> Result<IterationStats<T>, ModelError> {
        state.check_shape_for_batch(corpus)?;
        if self.plan.batches.iter().map(Vec::len).sum::<usize>() != corpus.num_users() {
            return Err(ModelError::Mismatch("batch plan was built for another corpus".into()));
        }
        let start = Instant::now();
        let (seed, iteration) = state.iteration_seed();
        let fault = self.fault.filter(|&(it, _)| it == iteration).map(|(_, u)| u);
        let mut skipped = 0;
        for b in rng::visitation_order(seed, iteration, self.plan.batches.len()) {
            let members = &self.plan.batches[b];
            skipped += self.run_batch(state, corpus, members, seed, iteration, fault)?;
        }
        debug!("batch sweep {iteration}: {skipped} links skipped");
        Ok(state.finish_iteration(corpus, skipped, start))
    }

    fn run_batch<T: Real>(
        &self,
        state: &mut ModelState<T>,
        corpus: &Corpus,
        members: &[usize],
        seed: u64,
        iteration: u64,
        fault: Option<usize>,
    ) -> Result<usize, ModelError> {
        let mut removed = Vec::with_capacity(members.len());
        for &u in members {
            match state.remove_user(corpus, u) {
                Ok(record) => removed.push((u, record)),
                Err(e) => {
                    rollback(state, corpus, &removed)?;
                    return Err(e);
                }
            }
        }

        let frozen: &ModelState<T> = state;
        let results: Vec<Result<Proposal, ModelError>> = self.pool.install(|| {
            members
                .par_iter()
                .map_init(Scratch::new, |scratch, &u| {
                    catch_unwind(AssertUnwindSafe(|| {
                        if fault == Some(u) {
                            panic!("injected worker fault for user {u}");
                        }
                        let mut urng = rng::user_stream(seed, iteration, u);
                        frozen.propose(corpus, u, true, &mut urng, scratch)
                    }))
                    .unwrap_or(Err(ModelError::WorkerPanic))
                })
                .collect()
        });

        let mut proposals = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(p) => proposals.push(p),
                Err(e) => {
                    rollback(state, corpus, &removed)?;
                    return Err(e);
                }
            }
        }
        let mut skipped = 0;
        for p in &proposals {
            skipped += p.skipped_links;
            state.apply(corpus, p)?;
        }
        Ok(skipped)
    }
}

fn rollback<T: Real>(
    state: &mut ModelState<T>,
    corpus: &Corpus,
    removed: &[(usize, crate::pycrp::Unseated)],
) -> Result<(), ModelError> {
    for &(u, record) in removed.iter().rev() {
        state.restore_user(corpus, u, record)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Interaction;
    use crate::generator::{generate, CountSpec, GeneratorConfig};
    use crate::sampler::{InitMode, SamplerConfig};
    use proptest::prelude::*;

    fn generated(num_users: usize) -> Corpus {
        let cfg = GeneratorConfig {
            num_profiles: 3,
            num_topics: 4,
            num_users,
            vocab_size: 40,
            num_actions: 4,
            num_labels: 2,
            interactions_per_user: CountSpec::Uniform { min: 1, max: 6 },
            links_per_user: CountSpec::Fixed { n: 2 },
            seed: 21,
            ..GeneratorConfig::default()
        };
        generate(&cfg).unwrap().0
    }

    fn model(c: &Corpus) -> ModelState<f64> {
        let cfg = SamplerConfig { num_profiles: 3, num_topics: 4, seed: 5, init: InitMode::Random, ..Default::default() };
        ModelState::initialize(c, &cfg).unwrap()
    }

    fn corpus_with_loads(loads: &[usize]) -> Corpus {
        let mut ints = Vec::new();
        for (u, &n) in loads.iter().enumerate() {
            for _ in 0..n {
                ints.push(Interaction { user: u, action: 0, tokens: vec![], time: 0.5, tags: None });
            }
        }
        Corpus::new(loads.len(), 1, 1, 1, ints, vec![]).unwrap()
    }

    #[test]
    fn lpt_packs_evenly() {
        let c = corpus_with_loads(&[9, 1, 5, 5, 4, 4, 2, 2]);
        let plan = plan_batches(&c, 4, 0).unwrap();
        assert_eq!(plan.batches().len(), 2);
        assert_eq!(plan.loads(), &[16, 16]);
        assert!(plan.batches().iter().all(|b| b.len() == 4));
        assert_eq!(plan.batches()[0][0], 0);
    }

    #[test]
    fn hand_worked_lpt() {
        let c = corpus_with_loads(&[9, 5, 4, 2]);
        let plan = plan_batches(&c, 2, 3).unwrap();
        assert_eq!(plan.batches(), &[vec![0, 3], vec![1, 2]]);
        assert_eq!(plan.loads(), &[11, 9]);
    }

    #[test]
    fn ties_depend_only_on_seed() {
        let c = corpus_with_loads(&[2; 12]);
        for seed in 0..5 {
            assert_eq!(plan_batches(&c, 5, seed).unwrap(), plan_batches(&c, 5, seed).unwrap());
        }
    }

    #[test]
    fn unit_batches_are_users_in_order() {
        let c = corpus_with_loads(&[3, 1, 2]);
        let plan = plan_batches(&c, 1, 7).unwrap();
        assert_eq!(plan.batches(), &[vec![0], vec![1], vec![2]]);
        assert_eq!(plan_batches(&c, 3, 7).unwrap().batches(), &[vec![0, 1, 2]]);
        assert!(plan_batches(&c, 0, 7).is_err());
    }

    #[test]
    fn capacity_is_respected_with_skewed_loads() {
        let c = corpus_with_loads(&[100, 1, 1, 1, 1]);
        let plan = plan_batches(&c, 2, 1).unwrap();
        assert_eq!(plan.batches().len(), 3);
        assert!(plan.batches().iter().all(|b| b.len() <= 2));
        let mut all: Vec<usize> = plan.batches().concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batch_sweeps_keep_counts_exact() {
        let c = generated(40);
        let mut s = model(&c);
        let mut sampler = BatchSampler::new(plan_batches(&c, 6, 5).unwrap(), 3).unwrap();
        let mut skipped = 0;
        for _ in 0..10 {
            let stats = sampler.iteration(&mut s, &c).unwrap();
            s.check_counts(&c).unwrap();
            s.seating().check_consistency().unwrap();
            assert_eq!(s.seating().total_seated(), 40);
            skipped += stats.skipped_links;
        }
        assert!(skipped > 0);
    }

    #[test]
    fn worker_panic_rolls_back_the_batch() {
        let c = generated(30);
        let mut s = model(&c);
        let mut sampler = BatchSampler::new(plan_batches(&c, 30, 5).unwrap(), 4).unwrap();
        sampler.iteration(&mut s, &c).unwrap();
        let before = s.clone();
        sampler.inject_worker_panic(1, 17);
        let err = sampler.iteration(&mut s, &c).unwrap_err();
        assert!(matches!(err, ModelError::WorkerPanic));
        assert_eq!(s, before);
        s.check_counts(&c).unwrap();

        // With several batches, earlier batches stay applied and the state
        // remains consistent.
        let mut s = model(&c);
        let mut sampler = BatchSampler::new(plan_batches(&c, 4, 5).unwrap(), 2).unwrap();
        sampler.inject_worker_panic(0, 9);
        assert!(sampler.iteration(&mut s, &c).is_err());
        s.check_counts(&c).unwrap();
        s.seating().check_consistency().unwrap();
        assert_eq!(s.seating().total_seated(), 30);
        assert_eq!(s.iteration(), 0);
    }

    #[test]
    fn plan_for_another_corpus_is_rejected() {
        let c = generated(20);
        let mut s = model(&c);
        let mut sampler = BatchSampler::new(plan_batches(&generated(25), 4, 0).unwrap(), 1).unwrap();
        assert!(sampler.iteration(&mut s, &c).is_err());
        assert!(BatchSampler::new(plan_batches(&c, 4, 0).unwrap(), 0).is_err());
    }

    proptest! {
        #[test]
        fn plan_partitions_users(loads in prop::collection::vec(0usize..20, 1..40), bs in 1usize..9, seed in 0u64..1000) {
            prop_assume!(loads.iter().any(|&l| l > 0));
            let c = corpus_with_loads(&loads);
            let plan = plan_batches(&c, bs, seed).unwrap();
            prop_assert_eq!(plan.batches().len(), loads.len().div_ceil(bs));
            let mut all: Vec<usize> = plan.batches().concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..loads.len()).collect::<Vec<_>>());
            for (b, &load) in plan.batches().iter().zip(plan.loads()) {
                prop_assert!(!b.is_empty() && b.len() <= bs);
                prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
                prop_assert_eq!(b.iter().map(|&u| loads[u]).sum::<usize>(), load);
            }
            prop_assert!(plan.batches().windows(2).all(|w| w[0][0] < w[1][0]));
        }
    }
}
