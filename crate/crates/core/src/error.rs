use std::io;

use thiserror::Error;

/// Failures while loading, validating or transforming a corpus.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: id out of bounds: {field} = {value} (bound {bound})")]
    OutOfBounds {
        line: usize,
        field: &'static str,
        value: usize,
        bound: usize,
    },
    #[error("line {line}: self-link on user {user}")]
    SelfLink { line: usize, user: usize },
    #[error("line {line}: time {value} outside [0, 1] in a normalized corpus")]
    TimeOutOfRange { line: usize, value: f64 },
    #[error("corpus has no interactions")]
    Empty,
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

/// Failures in the seating process.
#[derive(Debug, Error, PartialEq)]
pub enum CrpError {
    #[error("invalid Pitman-Yor parameters: gamma = {gamma}, delta = {delta}")]
    InvalidParams { gamma: f64, delta: f64 },
    #[error("profile {profile} out of range (R = {num_profiles})")]
    ProfileOutOfRange { profile: usize, num_profiles: usize },
    #[error("likelihood vector has no finite entry (numerical underflow upstream)")]
    ZeroLikelihood,
    #[error("likelihood vector has length {got}, expected {expected}")]
    LikelihoodLength { got: usize, expected: usize },
    #[error("user {0} is not seated")]
    NotSeated(usize),
    #[error("user {0} is already seated")]
    AlreadySeated(usize),
    #[error("table {0} is not live")]
    NoSuchTable(usize),
}

/// Failures in likelihood evaluation, sampling and checkpointing.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Crp(#[from] CrpError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("Beta parameters must be positive (alpha = {alpha}, beta = {beta})")]
    InvalidBeta { alpha: f64, beta: f64 },
    #[error("time cache is stale; rebuild it after changing Beta parameters")]
    StaleTimeCache,
    #[error("user {user} has a link to unseated user {neighbor}")]
    NeighborUnseated { user: usize, neighbor: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state does not match corpus: {0}")]
    Mismatch(String),
    #[error("count tables disagree with a full recount")]
    CountMismatch,
    #[error("batch worker panicked while resampling; state rolled back")]
    WorkerPanic,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}
