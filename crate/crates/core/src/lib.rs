//! Answer-conditioned variational reasoning on tabular policies.
//!
//! A reasoning world has a finite, enumerable space of reasoning paths. A
//! single parameter set holds two reasoning distributions, one conditioned on
//! the question only (the prior) and one also conditioned on the reference
//! answer (the amortized posterior), plus an answer head that scores the
//! reference answer given a path. Because every path can be enumerated, all
//! expectations used by the training objective have exact counterparts that
//! the estimators and gradients are checked against.
//!
//! Module map:
//! - [`task_env`]: worlds, paths, golden-path planting
//! - [`policy`]: tabular autoregressive policy and snapshots
//! - [`exact_oracle`]: exact enumeration of utility, posterior, KL and ELBO
//! - [`rewards`]: likelihood rewards, the prior utility baseline, group advantages
//! - [`kl_estimation`]: the k3 estimator and reward-weighted KL
//! - [`trainer`]: clipped-surrogate updates, GRPO and the variational objective
//! - [`experiment`]: configs, metrics logs, verification, comparison and export

pub mod error;
pub mod exact_oracle;
pub mod experiment;
pub mod kl_estimation;
pub mod policy;
pub mod rewards;
pub mod task_env;
pub mod trainer;

pub use error::{RavrError, Result};
pub use policy::{AnswerSlot, PolicyParams};
pub use task_env::{Path, TaskSizes, TaskSpec};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded RNG constructor.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
