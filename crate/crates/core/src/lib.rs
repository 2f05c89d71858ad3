//! Skew-aware user partitioning and evolutionary activity profiling.
//!
//! Users of a social platform are seated on the tables of a Pitman-Yor
//! Chinese restaurant whose tables serve latent activity profiles. A profile
//! is a mixture over behavior topics (paired word and action multinomials),
//! a Beta density over normalized time per topic, and link multinomials to
//! every other profile. Inference is a collapsed Gibbs sampler with an
//! optional parallel batch mode.
//!
//! The model math is generic over the scalar type (see [`Real`]); the
//! aliases at the crate root fix it to `f64`, which is what the CLI uses.

// `!(x > 0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod batch;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod profiles;
pub mod pycrp;
pub mod real;
pub mod rng;
pub mod sampler;

pub use batch::{plan_batches, BatchPlan, BatchSampler};
pub use corpus::{normalize_times, Corpus, Interaction, Link, TimeMode};
pub use error::{CorpusError, CrpError, ModelError};
pub use real::Real;
pub use sampler::{FitOptions, InitMode, SamplerConfig};

/// Model state over `f64`.
pub type Model = sampler::ModelState<f64>;
/// Pitman-Yor parameters over `f64`.
pub type PyParams = pycrp::PyParams<f64>;
/// Profile parameters over `f64`.
pub type ProfileParams = profiles::ProfileParams<f64>;
/// Per-iteration diagnostics over `f64`.
pub type IterationStats = sampler::IterationStats<f64>;
/// Model state over `f32`, for memory-bound runs.
pub type ModelF32 = sampler::ModelState<f32>;
