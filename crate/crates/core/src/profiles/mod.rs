//! Behavior topics, temporal Beta densities and profile-pair link
//! multinomials: the likelihood side of the model and its estimators.

mod counts;
mod estimate;
mod likelihood;
mod params;

pub use counts::CountTables;
pub use estimate::{
    beta_from_moments, fit_beta_mom, refit_beta_params, update_dirichlet_priors, DirichletEvidence,
    DIRICHLET_MAX, DIRICHLET_MAX_STEPS, DIRICHLET_MIN, DIRICHLET_TOL, MIN_BETA_SAMPLES, MIN_BETA_VARIANCE,
};
pub use likelihood::{
    action_word_log_lik, interaction_log_lik, interaction_log_lik_direct, link_log_lik, profile_topic_log_weight,
    user_log_lik, ProfileScorer,
};
pub use params::{
    beta_log_pdf, grid_time, time_bin, DirichletPriors, ProfileParams, TIME_CLAMP_HI, TIME_CLAMP_LO, TIME_GRID,
};
