//! Dataset statistics, planted-structure recovery scores and export of the
//! per-user profile representations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::ModelError;
use crate::real::Real;
use crate::sampler::ModelState;

/// Default activity period: one week of a year normalized to `[0, 1]`.
pub const DEFAULT_PERIOD_LENGTH: f64 = 1.0 / 52.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("period length must be in (0, 1], got {0}")]
    PeriodLength(f64),
    #[error("all active users share one activity level; no slope can be fitted")]
    DegenerateActivity,
    #[error("no user has any interaction")]
    NoActiveUsers,
    #[error("labelings differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Number of periods in `[0, 1]` for a given period length.
pub fn num_periods(period_length: f64) -> usize {
    ((1.0 / period_length).ceil() as usize).max(1)
}

/// Per user, the number of distinct periods containing an interaction.
pub fn active_periods(corpus: &Corpus, period_length: f64) -> Result<Vec<usize>, EvalError> {
    if !(period_length > 0.0 && period_length <= 1.0) {
        return Err(EvalError::PeriodLength(period_length));
    }
    let np = num_periods(period_length);
    Ok((0..corpus.num_users())
        .map(|u| {
            let mut seen = vec![false; np];
            for &i in corpus.user_interactions(u) {
                let p = ((corpus.interactions()[i].time / period_length).floor() as usize).min(np - 1);
                seen[p] = true;
            }
            seen.iter().filter(|&&s| s).count()
        })
        .collect())
}

/// Least-squares slope of `log(fraction of users)` against `log(level)`
/// over the non-empty levels; users at level 0 are ignored.
pub fn power_law_slope(levels: &[usize]) -> Result<f64, EvalError> {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in levels.iter().filter(|&&c| c > 0) {
        *hist.entry(c).or_insert(0) += 1;
    }
    if hist.is_empty() {
        return Err(EvalError::NoActiveUsers);
    }
    if hist.len() < 2 {
        return Err(EvalError::DegenerateActivity);
    }
    let total: usize = hist.values().sum();
    let pts: Vec<(f64, f64)> =
        hist.iter().map(|(&c, &n)| ((c as f64).ln(), (n as f64 / total as f64).ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Power-law index of users against number of active periods.
pub fn compute_eta(corpus: &Corpus, period_length: f64) -> Result<f64, EvalError> {
    power_law_slope(&active_periods(corpus, period_length)?)
}

/// Dominant action of each user with at least one interaction; ties go to
/// the lowest action id.
pub fn dominant_actions(corpus: &Corpus) -> Vec<Option<usize>> {
    (0..corpus.num_users())
        .map(|u| {
            let mut hist = vec![0usize; corpus.num_actions()];
            for &i in corpus.user_interactions(u) {
                hist[corpus.interactions()[i].action] += 1;
            }
            let (best, &n) = hist.iter().enumerate().rev().max_by_key(|&(_, n)| n)?;
            (n > 0).then_some(best)
        })
        .collect()
}

/// Entropy of the dominant-action distribution over users, divided by
/// `log |A|` (zero when there is a single action).
pub fn compute_sn(corpus: &Corpus) -> Result<f64, EvalError> {
    let mut users = vec![0usize; corpus.num_actions()];
    for a in dominant_actions(corpus).into_iter().flatten() {
        users[a] += 1;
    }
    let total: usize = users.iter().sum();
    if total == 0 {
        return Err(EvalError::NoActiveUsers);
    }
    if corpus.num_actions() < 2 {
        return Ok(0.0);
    }
    let h: f64 = users
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            p * (1.0 / p).ln()
        })
        .sum();
    Ok((h / (corpus.num_actions() as f64).ln()).clamp(0.0, 1.0))
}

/// Summary statistics of a corpus, written as one JSON record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_interactions: usize,
    pub num_links: usize,
    pub period_length: f64,
    /// `None` when the activity levels are degenerate.
    pub eta_t: Option<f64>,
    pub s_n: Option<f64>,
    pub interactions_per_user: Vec<usize>,
    pub active_periods_per_user: Vec<usize>,
}

pub fn dataset_stats(corpus: &Corpus, period_length: f64) -> Result<DatasetStats, EvalError> {
    let active = active_periods(corpus, period_length)?;
    Ok(DatasetStats {
        num_users: corpus.num_users(),
        num_interactions: corpus.interactions().len(),
        num_links: corpus.links().len(),
        period_length,
        eta_t: power_law_slope(&active).ok(),
        s_n: compute_sn(corpus).ok(),
        interactions_per_user: (0..corpus.num_users()).map(|u| corpus.user_interactions(u).len()).collect(),
        active_periods_per_user: active,
    })
}

/// Agreement between two labelings of the same users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryScore {
    /// Mutual information over the arithmetic mean of the two entropies.
    pub nmi: f64,
    /// Adjusted Rand index.
    pub ari: f64,
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

pub fn recovery_score(inferred: &[usize], truth: &[usize]) -> Result<RecoveryScore, EvalError> {
    if inferred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(inferred.len(), truth.len()));
    }
    let n = inferred.len();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &b) in inferred.iter().zip(truth) {
        *joint.entry((a, b)).or_insert(0) += 1;
        *rows.entry(a).or_insert(0) += 1;
        *cols.entry(b).or_insert(0) += 1;
    }
    if n == 0 {
        return Ok(RecoveryScore { nmi: 1.0, ari: 1.0 });
    }
    let nf = n as f64;
    let entropy = |m: &BTreeMap<usize, usize>| -> f64 {
        m.values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let (ha, hb) = (entropy(&rows), entropy(&cols));
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pab = c as f64 / nf;
            pab * (pab * nf * nf / (rows[&a] as f64 * cols[&b] as f64)).ln()
        })
        .sum();
    let nmi = if ha + hb == 0.0 { 1.0 } else { (2.0 * mi / (ha + hb)).clamp(0.0, 1.0) };

    let index: f64 = joint.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(f64::MIN_POSITIVE);
    let max_index = 0.5 * (sa + sb);
    let ari = if max_index == expected { 1.0 } else { (index - expected) / (max_index - expected) };
    Ok(RecoveryScore { nmi, ari })
}

/// Per-user `P_u` vectors, as exported.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    /// False when the exporting state had not run any iteration.
    pub trained: bool,
    pub rows: Vec<(usize, Vec<f64>)>,
}

pub const UNTRAINED_MARK: &str = "# untrained: exported from a freshly initialized state";

/// `P_u` of every user from `state`.
pub fn representations<T: Real>(state: &ModelState<T>, corpus: &Corpus) -> Result<Representations, ModelError> {
    let rows = (0..corpus.num_users())
        .map(|u| Ok((u, state.user_representation(corpus, u)?.iter().map(|p| p.as_f64()).collect())))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(Representations { trained: state.iteration() > 0, rows })
}

impl Representations {
    /// Tab-separated, one user per line: `user p_0 ... p_{R-1}`, each
    /// probability with 10 significant digits. Comment lines start with `#`.
    pub fn write_to(&self, w: impl Write) -> Result<(), ModelError> {
        let mut w = BufWriter::new(w);
        let dim = self.rows.first().map_or(0, |r| r.1.len());
        write!(w, "# user")?;
        for r in 0..dim {
            write!(w, "\tp_{r}")?;
        }
        writeln!(w)?;
        if !self.trained {
            writeln!(w, "{UNTRAINED_MARK}")?;
        }
        for (u, p) in &self.rows {
            write!(w, "{u}")?;
            for x in p {
                write!(w, "\t{x:.9e}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.write_to(File::create(path)?)
    }

    pub fn read_from(r: impl Read) -> Result<Self, ModelError> {
        let mut trained = true;
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            if line.starts_with('#') {
                if line == UNTRAINED_MARK {
                    trained = false;
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| ModelError::Format(format!("representation line {}: {m}", n + 1));
            let mut fields = line.split('\t');
            let user = fields.next().unwrap_or("").parse::<usize>().map_err(|e| bad(e.to_string()))?;
            let probs = fields.map(|f| f.parse::<f64>().map_err(|e| bad(e.to_string()))).collect::<Result<_, _>>()?;
            rows.push((user, probs));
        }
        Ok(Self { trained, rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(File::open(path)?)
    }
}

/// Writes `P_u` for every user of `corpus` to `path`.
pub fn export_representations<T: Real>(
    state: &ModelState<T>,
    corpus: &Corpus,
    path: impl AsRef<Path>,
) -> Result<Representations, ModelError> {
    let reps = representations(state, corpus)?;
    reps.save(path)?;
    Ok(reps)
}
