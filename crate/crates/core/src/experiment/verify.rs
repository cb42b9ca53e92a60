//! Identity checks of the exact oracle on random worlds and random policies.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{RavrError, Result};
use crate::exact_oracle::{
    bayes_posterior, elbo_from, exact_amortized_posterior, exact_kl, exact_prior, moment_gain_from,
    subset_identity_error, utilities, ORACLE_CUE,
};
use crate::kl_estimation::k3_expectation_exact;
use crate::policy::{init_params_windowed, InitScheme, PolicyParams};
use crate::seeded_rng;
use crate::task_env::{enumerate_paths, new_random_task, TaskSizes, TaskSpec};

pub const VERIFY_TOLERANCE: f64 = 1e-9;
pub const TAU_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const RANDOM_SUBSETS: usize = 50;

pub const CHECK_NAMES: [&str; 6] = [
    "posterior_reweighting",
    "set_amplification",
    "amplification_bound",
    "moment_gain",
    "elbo_gap",
    "k3_unbiased",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Per-instance line of the verification output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRow {
    pub task_id: String,
    pub mu: f64,
    pub var_s: f64,
    pub e_post_s: f64,
    pub kl_post_prior: f64,
    pub elbo: f64,
    pub log_mu: f64,
    pub max_identity_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub instances: usize,
    pub checks: Vec<CheckResult>,
    pub rows: Vec<InstanceRow>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<24} {:>12} {:>10}  result\n", "check", "max_error", "tol");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<24} {:>12.3e} {:>10.0e}  {}\n",
                c.name,
                c.max_error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "{} instances, seed {}: {}\n",
            self.instances,
            self.seed,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Random sizes, random logits and a random context window.
pub fn random_world(seed: u64) -> Result<(TaskSpec, PolicyParams)> {
    let mut rng = seeded_rng(seed);
    let sizes = TaskSizes {
        reason_alphabet_size: rng.gen_range(2..=4),
        max_reason_len: rng.gen_range(1..=3),
        answer_alphabet_size: rng.gen_range(2..=3),
        answer_len: rng.gen_range(1..=2),
    };
    let task = new_random_task(seed, sizes)?;
    let scale = rng.gen_range(0.5..3.0);
    let window = rng.gen_range(1..=3);
    let params = init_params_windowed(&task, &InitScheme::Random { scale }, window, rng.gen());
    Ok((task, params))
}

/// All checks on `n` worlds derived from `seed`.
pub fn verify_suite(seed: u64, n: usize) -> Result<VerificationReport> {
    verify_suite_with(seed, n, &|_| {})
}

/// As [`verify_suite`], with `posterior_hook` applied to each Bayes
/// posterior before it is checked.
pub fn verify_suite_with(seed: u64, n: usize, posterior_hook: &dyn Fn(&mut [f64])) -> Result<VerificationReport> {
    if n == 0 {
        return Err(RavrError::Validation("verification needs at least one instance".into()));
    }
    let mut worst = [0.0f64; 6];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let world_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let (task, params) = random_world(world_seed)?;
        let (errs, row) = check_world(&task, &params, world_seed, posterior_hook)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            // NaN must register as a failure.
            *w = if e.is_nan() || w.is_nan() { f64::NAN } else { w.max(e) };
        }
        rows.push(row);
    }
    let checks: Vec<CheckResult> = CHECK_NAMES
        .iter()
        .zip(worst)
        .map(|(name, e)| CheckResult {
            name: name.to_string(),
            max_error: e,
            tolerance: VERIFY_TOLERANCE,
            passed: e <= VERIFY_TOLERANCE,
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerificationReport {
        seed,
        instances: n,
        checks,
        rows,
        passed,
    })
}

fn check_world(
    task: &TaskSpec,
    params: &PolicyParams,
    seed: u64,
    posterior_hook: &dyn Fn(&mut [f64]),
) -> Result<([f64; 6], InstanceRow)> {
    let paths = enumerate_paths(task);
    let prior = exact_prior(params, task)?;
    let amortized = exact_amortized_posterior(params, task)?;
    let s = utilities(params, task, &paths, ORACLE_CUE)?;
    let (mut post, mu) = bayes_posterior(&prior, &s)?;
    posterior_hook(&mut post);

    let reweighting = (0..paths.len())
        .map(|i| (post[i] * mu - s[i] * prior[i]).abs())
        .fold(0.0, f64::max);

    let mut rng = seeded_rng(seed ^ 0x5eed);
    let mut subsets: Vec<Vec<bool>> = TAU_GRID
        .iter()
        .map(|&tau| s.iter().map(|&v| v >= tau).collect())
        .collect();
    for _ in 0..RANDOM_SUBSETS {
        subsets.push((0..paths.len()).map(|_| rng.gen_bool(0.5)).collect());
    }
    let amplification = subsets
        .iter()
        .filter_map(|m| subset_identity_error(&prior, &post, &s, mu, m))
        .fold(0.0, f64::max);

    let mut bound = 0.0f64;
    for (tau, member) in TAU_GRID.iter().zip(&subsets) {
        let pr_prior: f64 = (0..paths.len()).filter(|&i| member[i]).map(|i| prior[i]).sum();
        let pr_post: f64 = (0..paths.len()).filter(|&i| member[i]).map(|i| post[i]).sum();
        bound = bound.max(tau * pr_prior / mu - pr_post);
    }

    let gain = moment_gain_from(&prior, &post, &s);

    let mut random_q: Vec<f64> = (0..paths.len()).map(|_| rng.gen_range(0.01..1.0)).collect();
    let z: f64 = random_q.iter().sum();
    random_q.iter_mut().for_each(|v| *v /= z);
    let mut elbo_err = 0.0f64;
    for q in [&amortized, &prior, &random_q] {
        let r = elbo_from(&prior, &s, q);
        elbo_err = elbo_err.max((r.gap - exact_kl(q, &post)).abs()).max(-r.gap);
    }

    let kl_post_prior = exact_kl(&amortized, &prior);
    let k3 = (k3_expectation_exact(params, task)? - kl_post_prior).abs();

    let errs = [reweighting, amplification, bound.max(0.0), gain.abs_diff, elbo_err, k3];
    let var_s = prior.iter().zip(&s).map(|(p, v)| p * (v - mu) * (v - mu)).sum();
    let elbo = elbo_from(&prior, &s, &amortized);
    let row = InstanceRow {
        task_id: task.task_id().to_string(),
        mu,
        var_s,
        e_post_s: gain.e_post_s,
        kl_post_prior,
        elbo: elbo.elbo,
        log_mu: elbo.log_mu,
        max_identity_error: errs.iter().copied().fold(0.0, f64::max),
    };
    Ok((errs, row))
}
