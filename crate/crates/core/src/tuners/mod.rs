//! Wrapper tuners (random search, successive halving) and the FedEx inner tuner.

pub mod fedex;
pub mod schedule;
pub mod sha;

pub use fedex::{
    baseline_update, exponentiated_update, fedex_round, grad_estimate, sha_discounted_score, step_size, FedExState,
    StepSchedule,
};
pub use schedule::{compute_schedule, EliminationSchedule};
pub use sha::{run_sha, Arm, FedExSettings, InnerTuner, ShaSettings};
