//! Pitman-Yor restaurant whose tables serve activity profiles.
//!
//! A user joins an existing table `a` with weight `(n_a - δ) / (N + γ)` or
//! opens a new one with weight `(γ + A δ) / (N + γ)`. In the profile-driven
//! variant both weights are multiplied by the user's likelihood under the
//! table's profile (the mean likelihood over profiles for a new table), and
//! summing the table weights per profile gives the profile posterior.
//!
//! Likelihoods come in as log-values and are shifted by their maximum before
//! exponentiation, so they may be arbitrarily small.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CrpError;
use crate::real::{normalize_weights, sample_weighted, Real};

/// Concentration `gamma`, discount `delta` and the size of the uniform base
/// distribution over profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PyParams<T> {
    gamma: T,
    delta: T,
    num_profiles: usize,
}

impl<T: Real> PyParams<T> {
    pub fn new(gamma: T, delta: T, num_profiles: usize) -> Result<Self, CrpError> {
        if !(gamma > T::zero()) || !(delta >= T::zero() && delta < T::one()) || !gamma.is_finite() {
            return Err(CrpError::InvalidParams { gamma: gamma.as_f64(), delta: delta.as_f64() });
        }
        if num_profiles == 0 {
            return Err(CrpError::ProfileOutOfRange { profile: 0, num_profiles });
        }
        Ok(Self { gamma, delta, num_profiles })
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn num_profiles(&self) -> usize {
        self.num_profiles
    }
}

/// Where a user sits down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableChoice {
    Existing(usize),
    New,
}

/// What [`SeatingState::unseat`] removed, enough to undo it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unseated {
    pub table: usize,
    pub profile: usize,
    pub table_removed: bool,
}

/// Probabilities over the live tables followed by the new-table option.
#[derive(Debug, Clone, PartialEq)]
pub struct SeatDistribution<T> {
    /// Live table ids, in the order of `probs`.
    pub tables: Vec<usize>,
    /// `tables.len() + 1` entries; the last is the new-table probability.
    pub probs: Vec<T>,
}

impl<T: Real> SeatDistribution<T> {
    pub fn new_table_prob(&self) -> T {
        *self.probs.last().expect("always has the new-table entry")
    }

    pub fn choice(&self, index: usize) -> TableChoice {
        if index == self.tables.len() {
            TableChoice::New
        } else {
            TableChoice::Existing(self.tables[index])
        }
    }
}

/// Tables, their occupancy and served profiles, and per-profile aggregates.
///
/// Table ids index slots; a slot with zero occupants is free and sits on the
/// free list until a new table reuses it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeatingState {
    table_profile: Vec<usize>,
    table_count: Vec<usize>,
    free_tables: Vec<usize>,
    user_table: Vec<Option<usize>>,
    total_seated: usize,
    live_tables: usize,
    profile_users: Vec<usize>,
    profile_tables: Vec<usize>,
    /// Live table ids serving each profile.
    profile_table_ids: Vec<BTreeSet<usize>>,
}

impl SeatingState {
    pub fn new(num_users: usize, num_profiles: usize) -> Self {
        Self {
            table_profile: Vec::new(),
            table_count: Vec::new(),
            free_tables: Vec::new(),
            user_table: vec![None; num_users],
            total_seated: 0,
            live_tables: 0,
            profile_users: vec![0; num_profiles],
            profile_tables: vec![0; num_profiles],
            profile_table_ids: vec![BTreeSet::new(); num_profiles],
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_table.len()
    }

    pub fn num_profiles(&self) -> usize {
        self.profile_users.len()
    }

    /// `N`: users currently seated.
    pub fn total_seated(&self) -> usize {
        self.total_seated
    }

    /// `A`: live tables.
    pub fn live_tables(&self) -> usize {
        self.live_tables
    }

    /// `N_r`: users on tables serving `profile`.
    pub fn profile_users(&self, profile: usize) -> usize {
        self.profile_users[profile]
    }

    /// `A_r`: live tables serving `profile`.
    pub fn profile_tables(&self, profile: usize) -> usize {
        self.profile_tables[profile]
    }

    pub fn table_of(&self, user: usize) -> Option<usize> {
        self.user_table[user]
    }

    pub fn profile_of(&self, user: usize) -> Option<usize> {
        self.user_table[user].map(|a| self.table_profile[a])
    }

    /// `(n_a, r_a)` for a live table.
    pub fn table(&self, table: usize) -> Option<(usize, usize)> {
        match self.table_count.get(table) {
            Some(&n) if n > 0 => Some((n, self.table_profile[table])),
            _ => None,
        }
    }

    /// Live tables serving `profile` as `(id, n_a)` in id order.
    pub fn profile_table_list(&self, profile: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.profile_table_ids[profile].iter().map(|&a| (a, self.table_count[a]))
    }

    /// Live tables as `(id, n_a, r_a)` in id order.
    pub fn tables(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.table_count
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(a, &n)| (a, n, self.table_profile[a]))
    }

    /// Seats an unseated user and returns the table id.
    pub fn seat_at(&mut self, user: usize, choice: TableChoice, profile: usize) -> Result<usize, CrpError> {
        if self.user_table[user].is_some() {
            return Err(CrpError::AlreadySeated(user));
        }
        if profile >= self.num_profiles() {
            return Err(CrpError::ProfileOutOfRange { profile, num_profiles: self.num_profiles() });
        }
        let table = match choice {
            TableChoice::Existing(a) => {
                if self.table(a).is_none() {
                    return Err(CrpError::NoSuchTable(a));
                }
                a
            }
            TableChoice::New => {
                let a = match self.free_tables.pop() {
                    Some(a) => {
                        self.table_profile[a] = profile;
                        a
                    }
                    None => {
                        self.table_profile.push(profile);
                        self.table_count.push(0);
                        self.table_profile.len() - 1
                    }
                };
                self.live_tables += 1;
                self.profile_tables[profile] += 1;
                self.profile_table_ids[profile].insert(a);
                a
            }
        };
        let served = self.table_profile[table];
        self.table_count[table] += 1;
        self.profile_users[served] += 1;
        self.total_seated += 1;
        self.user_table[user] = Some(table);
        Ok(table)
    }

    /// Removes a user; an emptied table is deleted and its id freed.
    pub fn unseat(&mut self, user: usize) -> Result<Unseated, CrpError> {
        let table = self.user_table[user].take().ok_or(CrpError::NotSeated(user))?;
        let profile = self.table_profile[table];
        self.table_count[table] -= 1;
        self.profile_users[profile] -= 1;
        self.total_seated -= 1;
        let table_removed = self.table_count[table] == 0;
        if table_removed {
            self.live_tables -= 1;
            self.profile_tables[profile] -= 1;
            self.profile_table_ids[profile].remove(&table);
            self.free_tables.push(table);
        }
        Ok(Unseated { table, profile, table_removed })
    }

    /// Reverses the most recent [`SeatingState::unseat`] calls when applied
    /// in reverse order, restoring table ids and the free list exactly.
    pub fn undo_unseat(&mut self, user: usize, record: Unseated) -> Result<(), CrpError> {
        if record.table_removed {
            match self.free_tables.last() {
                Some(&a) if a == record.table => {}
                _ => return Err(CrpError::NoSuchTable(record.table)),
            }
            let seated = self.seat_at(user, TableChoice::New, record.profile)?;
            debug_assert_eq!(seated, record.table);
            Ok(())
        } else {
            self.seat_at(user, TableChoice::Existing(record.table), record.profile).map(|_| ())
        }
    }

    /// Checks every stored aggregate against a recount from the tables.
    pub fn check_consistency(&self) -> Result<(), String> {
        let r = self.num_profiles();
        let mut users = vec![0usize; r];
        let mut tables = vec![0usize; r];
        let mut live = 0;
        let mut per_table = vec![0usize; self.table_count.len()];
        for t in self.user_table.iter().flatten() {
            per_table[*t] += 1;
        }
        if per_table != self.table_count {
            return Err("table occupancy disagrees with user assignments".into());
        }
        for (a, &n) in self.table_count.iter().enumerate() {
            if n > 0 {
                live += 1;
                users[self.table_profile[a]] += n;
                tables[self.table_profile[a]] += 1;
            } else if !self.free_tables.contains(&a) {
                return Err(format!("empty table {a} not on the free list"));
            }
        }
        let seated = self.user_table.iter().filter(|t| t.is_some()).count();
        if seated != self.total_seated {
            return Err("total_seated mismatch".into());
        }
        if live != self.live_tables || self.free_tables.len() + live != self.table_count.len() {
            return Err("live table count mismatch".into());
        }
        for (r, ids) in self.profile_table_ids.iter().enumerate() {
            if ids.len() != tables[r] || ids.iter().any(|&a| self.table_count[a] == 0 || self.table_profile[a] != r) {
                return Err(format!("table index of profile {r} is stale"));
            }
        }
        if users != self.profile_users || tables != self.profile_tables {
            return Err("per-profile aggregates mismatch".into());
        }
        Ok(())
    }
}

/// Pitman-Yor seating probabilities over live tables and a new table, ignoring likelihoods.
pub fn basic_seat_probs<T: Real>(state: &SeatingState, params: &PyParams<T>) -> SeatDistribution<T> {
    let norm = T::of_usize(state.total_seated()) + params.gamma;
    let mut tables = Vec::with_capacity(state.live_tables());
    let mut probs = Vec::with_capacity(state.live_tables() + 1);
    for (a, n, _) in state.tables() {
        tables.push(a);
        probs.push((T::of_usize(n) - params.delta) / norm);
    }
    probs.push(new_table_mass(state, params) / norm);
    normalize_weights(&mut probs);
    SeatDistribution { tables, probs }
}

/// `γ + A δ`.
fn new_table_mass<T: Real>(state: &SeatingState, params: &PyParams<T>) -> T {
    params.gamma + T::of_usize(state.live_tables()) * params.delta
}

/// Likelihoods rescaled to `exp(l_r - max l)`.
fn shifted_likelihoods<T: Real>(state: &SeatingState, log_lik: &[T]) -> Result<Vec<T>, CrpError> {
    if log_lik.len() != state.num_profiles() {
        return Err(CrpError::LikelihoodLength { got: log_lik.len(), expected: state.num_profiles() });
    }
    let max = log_lik.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(CrpError::ZeroLikelihood);
    }
    Ok(log_lik.iter().map(|&l| (l - max).exp()).collect())
}

/// Unnormalized profile-driven seating weights, on the max-shifted
/// likelihood scale. Same layout as [`SeatDistribution`].
pub fn profile_seat_weights<T: Real>(
    state: &SeatingState,
    params: &PyParams<T>,
    log_lik: &[T],
) -> Result<SeatDistribution<T>, CrpError> {
    let lik = shifted_likelihoods(state, log_lik)?;
    let norm = T::of_usize(state.total_seated()) + params.gamma;
    let mut tables = Vec::with_capacity(state.live_tables());
    let mut probs = Vec::with_capacity(state.live_tables() + 1);
    for (a, n, r) in state.tables() {
        tables.push(a);
        probs.push((T::of_usize(n) - params.delta) / norm * lik[r]);
    }
    let mean_lik = lik.iter().copied().sum::<T>() / T::of_usize(lik.len());
    probs.push(new_table_mass(state, params) / norm * mean_lik);
    Ok(SeatDistribution { tables, probs })
}

/// Profile-driven seating probabilities.
pub fn profile_seat_probs<T: Real>(
    state: &SeatingState,
    params: &PyParams<T>,
    log_lik: &[T],
) -> Result<SeatDistribution<T>, CrpError> {
    let mut dist = profile_seat_weights(state, params, log_lik)?;
    if !normalize_weights(&mut dist.probs) {
        return Err(CrpError::ZeroLikelihood);
    }
    Ok(dist)
}

/// `(N_r - A_r δ)/(N + γ) + (γ + A δ)/(|R| (N + γ))` for every profile: the
/// seating mass a profile collects before the likelihood is applied.
pub fn profile_seat_mass<T: Real>(state: &SeatingState, params: &PyParams<T>) -> Vec<T> {
    let norm = T::of_usize(state.total_seated()) + params.gamma;
    let fresh = new_table_mass(state, params) / (T::of_usize(state.num_profiles()) * norm);
    (0..state.num_profiles())
        .map(|r| {
            let occupied =
                T::of_usize(state.profile_users(r)) - T::of_usize(state.profile_tables(r)) * params.delta;
            occupied / norm + fresh
        })
        .collect()
}

/// Unnormalized profile posterior weights (max-shifted likelihood scale).
pub fn profile_posterior_weights<T: Real>(
    state: &SeatingState,
    params: &PyParams<T>,
    log_lik: &[T],
) -> Result<Vec<T>, CrpError> {
    let lik = shifted_likelihoods(state, log_lik)?;
    Ok(profile_seat_mass(state, params).into_iter().zip(lik).map(|(m, l)| m * l).collect())
}

/// Posterior over profiles for a user with the given log-likelihoods,
/// normalized over `R`.
pub fn profile_posterior<T: Real>(
    state: &SeatingState,
    params: &PyParams<T>,
    log_lik: &[T],
) -> Result<Vec<T>, CrpError> {
    let mut w = profile_posterior_weights(state, params, log_lik)?;
    if !normalize_weights(&mut w) {
        return Err(CrpError::ZeroLikelihood);
    }
    Ok(w)
}

/// Draws a table for a user whose profile is already fixed: an existing
/// table serving `profile` with weight `n_a - δ`, or a new table with weight
/// `(γ + A δ) / |R|`.
pub fn propose_table<T: Real, G: Rng + ?Sized>(
    state: &SeatingState,
    params: &PyParams<T>,
    profile: usize,
    rng: &mut G,
) -> Result<TableChoice, CrpError> {
    if profile >= state.num_profiles() {
        return Err(CrpError::ProfileOutOfRange { profile, num_profiles: state.num_profiles() });
    }
    let u: f64 = rng.random();
    if state.profile_tables(profile) == 0 {
        return Ok(TableChoice::New);
    }
    let mut ids = Vec::with_capacity(state.profile_tables(profile));
    let mut weights = Vec::with_capacity(state.profile_tables(profile) + 1);
    for (a, n) in state.profile_table_list(profile) {
        ids.push(a);
        weights.push(T::of_usize(n) - params.delta);
    }
    weights.push(new_table_mass(state, params) / T::of_usize(state.num_profiles()));
    let pick = sample_weighted(&weights, u);
    Ok(if pick == ids.len() { TableChoice::New } else { TableChoice::Existing(ids[pick]) })
}

/// Samples a table for `user` under `profile` and seats them there.
pub fn seat_user<T: Real, G: Rng + ?Sized>(
    state: &mut SeatingState,
    params: &PyParams<T>,
    user: usize,
    profile: usize,
    rng: &mut G,
) -> Result<usize, CrpError> {
    if state.table_of(user).is_some() {
        return Err(CrpError::AlreadySeated(user));
    }
    let choice = propose_table(state, params, profile, rng)?;
    state.seat_at(user, choice, profile)
}

/// Removes `user` from their table.
pub fn unseat_user(state: &mut SeatingState, user: usize) -> Result<(), CrpError> {
    state.unseat(user).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn state_with_tables(counts: &[(usize, usize)], num_profiles: usize) -> SeatingState {
        let users: usize = counts.iter().map(|c| c.0).sum();
        let mut s = SeatingState::new(users + 1, num_profiles);
        let mut u = 0;
        for &(n, r) in counts {
            let a = s.seat_at(u, TableChoice::New, r).unwrap();
            u += 1;
            for _ in 1..n {
                s.seat_at(u, TableChoice::Existing(a), r).unwrap();
                u += 1;
            }
        }
        s
    }

    #[test]
    fn first_user_opens_a_table() {
        let s = SeatingState::new(1, 3);
        let p = PyParams::new(1.0, 0.5, 3).unwrap();
        let d = basic_seat_probs(&s, &p);
        assert_eq!(d.probs, vec![1.0]);
    }

    #[test]
    fn basic_probs_hand_values() {
        let p = PyParams::new(1.0, 0.5, 1).unwrap();
        let s = state_with_tables(&[(3, 0), (1, 0)], 1);
        let d = basic_seat_probs(&s, &p);
        for (got, want) in d.probs.iter().zip([0.5f64, 0.1, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
        let p0 = PyParams::new(1.0, 0.0, 1).unwrap();
        let s = state_with_tables(&[(1, 0)], 1);
        assert_eq!(basic_seat_probs(&s, &p0).probs, vec![0.5, 0.5]);
    }

    #[test]
    fn profile_probs_hand_values() {
        let p = PyParams::new(1.0, 0.5, 2).unwrap();
        let s = state_with_tables(&[(1, 0)], 2);
        let d = profile_seat_probs(&s, &p, &[0.0, f64::NEG_INFINITY]).unwrap();
        assert!((d.probs[0] - 0.4).abs() < 1e-12);
        assert!((d.probs[1] - 0.6).abs() < 1e-12);
        let d = profile_seat_probs(&s, &p, &[f64::NEG_INFINITY, -3.0]).unwrap();
        assert_eq!(d.probs, vec![0.0, 1.0]);
        assert_eq!(
            profile_seat_probs(&s, &p, &[f64::NEG_INFINITY; 2]),
            Err(CrpError::ZeroLikelihood)
        );
    }

    #[test]
    fn single_profile_posterior_is_one() {
        let p = PyParams::new(2.0, 0.3, 1).unwrap();
        let s = state_with_tables(&[(4, 0), (2, 0)], 1);
        assert_eq!(profile_posterior(&s, &p, &[-50.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn unused_profile_stays_reachable() {
        let p = PyParams::new(1.0, 0.5, 3).unwrap();
        let s = state_with_tables(&[(4, 0)], 3);
        let w = profile_posterior(&s, &p, &[0.0, 0.0, 0.0]).unwrap();
        assert!(w[1] > 0.0 && w[2] > 0.0);
    }

    #[test]
    fn seat_without_matching_table_opens_one() {
        let p = PyParams::new(1.0, 0.5, 2).unwrap();
        let mut s = state_with_tables(&[(2, 0)], 2);
        let user = s.num_users() - 1;
        let a = seat_user(&mut s, &p, user, 1, &mut rng::stream(1, 0, 0)).unwrap();
        assert_eq!(s.live_tables(), 2);
        assert_eq!(s.profile_of(user), Some(1));
        assert_eq!(s.table(a), Some((1, 1)));
        assert!(matches!(
            seat_user(&mut s, &p, 0, 5, &mut rng::stream(1, 0, 0)),
            Err(CrpError::AlreadySeated(0))
        ));
    }

    #[test]
    fn unseat_sole_occupant_deletes_and_recycles() {
        let mut s = state_with_tables(&[(1, 0), (2, 1)], 2);
        let before = s.clone();
        let rec = s.unseat(0).unwrap();
        assert!(rec.table_removed);
        assert_eq!(s.live_tables(), 1);
        s.check_consistency().unwrap();
        s.undo_unseat(0, rec).unwrap();
        assert_eq!(s, before);
        assert_eq!(s.unseat(3), Err(CrpError::NotSeated(3)));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(PyParams::new(0.0, 0.5, 1).is_err());
        assert!(PyParams::new(1.0, 1.0, 1).is_err());
        assert!(PyParams::new(1.0, -0.1, 1).is_err());
        assert!(PyParams::new(1.0f32, 0.5, 2).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn random_seat_unseat_keeps_aggregates(ops in proptest::collection::vec((0usize..12, 0usize..4, 0usize..8), 1..200)) {
            let mut s = SeatingState::new(12, 4);
            let p = PyParams::new(1.5f64, 0.3, 4).unwrap();
            for (u, r, pick) in ops {
                if s.table_of(u).is_some() {
                    s.unseat(u).unwrap();
                } else {
                    let existing: Vec<usize> = s.profile_table_list(r).map(|(a, _)| a).collect();
                    let choice = if pick < existing.len() { TableChoice::Existing(existing[pick]) } else { TableChoice::New };
                    s.seat_at(u, choice, r).unwrap();
                }
                proptest::prop_assert_eq!(s.check_consistency(), Ok(()));
                let d = basic_seat_probs(&s, &p);
                let total: f64 = d.probs.iter().sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-12);
                let mass = profile_seat_mass(&s, &p);
                proptest::prop_assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
