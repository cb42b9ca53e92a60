//! Exact enumeration of utility, posterior, KL and ELBO.
//!
//! Everything here sums over the full path space returned by
//! [`enumerate_paths`]; distributions are vectors aligned with that order.
//! The utility of a path is the raw sequence probability of the reference
//! answer under the cued answer head, never the length-normalized one.

use serde::Serialize;

use crate::error::{RavrError, Result};
use crate::policy::{AnswerSlot, PolicyParams};
use crate::task_env::{enumerate_paths, Path, TaskSpec};

/// Smallest expected utility for which the posterior is defined.
pub const MIN_MU: f64 = 1e-12;

/// Cue flag the oracle scores utilities with.
pub const ORACLE_CUE: bool = true;

/// Exact distribution over paths under one conditioning.
fn path_distribution(params: &PolicyParams, task: &TaskSpec, slot: AnswerSlot, paths: &[Path]) -> Result<Vec<f64>> {
    paths
        .iter()
        .map(|z| params.path_logprob(task, slot, z).map(f64::exp))
        .collect()
}

/// Prior probability of every path, in enumeration order.
pub fn exact_prior(params: &PolicyParams, task: &TaskSpec) -> Result<Vec<f64>> {
    task.sizes().validate()?;
    path_distribution(params, task, AnswerSlot::QuestionOnly, &enumerate_paths(task))
}

/// The model's own answer-conditioned distribution (posterior rows).
pub fn exact_amortized_posterior(params: &PolicyParams, task: &TaskSpec) -> Result<Vec<f64>> {
    task.sizes().validate()?;
    path_distribution(params, task, AnswerSlot::Reference, &enumerate_paths(task))
}

/// s(z): probability of the reference answer after `path`.
pub fn utility(params: &PolicyParams, task: &TaskSpec, path: &Path, cue: bool) -> Result<f64> {
    Ok(params
        .answer_logprob(task, cue, path, task.reference_answer())?
        .exp())
}

pub fn utilities(params: &PolicyParams, task: &TaskSpec, paths: &[Path], cue: bool) -> Result<Vec<f64>> {
    paths.iter().map(|z| utility(params, task, z, cue)).collect()
}

/// Size-biased reweighting `s * prior / mu`; returns the posterior and mu.
pub fn bayes_posterior(prior: &[f64], s: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mu: f64 = prior.iter().zip(s).map(|(p, s)| p * s).sum();
    if mu.is_nan() || mu < MIN_MU {
        return Err(RavrError::DegenerateMu(mu));
    }
    Ok((prior.iter().zip(s).map(|(p, s)| p * s / mu).collect(), mu))
}

/// Exact Bayes posterior over paths given the reference answer.
pub fn exact_posterior(params: &PolicyParams, task: &TaskSpec) -> Result<Vec<f64>> {
    let paths = enumerate_paths(task);
    let prior = path_distribution(params, task, AnswerSlot::QuestionOnly, &paths)?;
    let s = utilities(params, task, &paths, ORACLE_CUE)?;
    Ok(bayes_posterior(&prior, &s)?.0)
}

/// `sum p ln(p/q)`, with zero-mass terms of `p` contributing nothing.
pub fn exact_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions over different spaces");
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AmplificationRow {
    pub tau: f64,
    pub pr_prior: f64,
    pub pr_post: f64,
    /// `pr_post / pr_prior`; absent when the set is empty.
    pub ratio: Option<f64>,
    /// Conditional mean of s over the set divided by mu.
    pub cond_mean_over_mu: Option<f64>,
    pub bound: f64,
}

/// Mass of the tau-good sets `{z : s(z) >= tau}` before and after
/// conditioning on the answer.
pub fn amplification_from(prior: &[f64], posterior: &[f64], s: &[f64], mu: f64, taus: &[f64]) -> Vec<AmplificationRow> {
    taus.iter()
        .map(|&tau| {
            let mut pr_prior = 0.0;
            let mut pr_post = 0.0;
            let mut weighted = 0.0;
            for i in 0..prior.len() {
                if s[i] >= tau {
                    pr_prior += prior[i];
                    pr_post += posterior[i];
                    weighted += prior[i] * s[i];
                }
            }
            let nonempty = s.iter().any(|&v| v >= tau) && pr_prior > 0.0;
            AmplificationRow {
                tau,
                pr_prior,
                pr_post,
                ratio: nonempty.then(|| pr_post / pr_prior),
                cond_mean_over_mu: nonempty.then(|| weighted / pr_prior / mu),
                bound: tau / mu,
            }
        })
        .collect()
}

pub fn amplification_report(params: &PolicyParams, task: &TaskSpec, taus: &[f64]) -> Result<Vec<AmplificationRow>> {
    let paths = enumerate_paths(task);
    let prior = path_distribution(params, task, AnswerSlot::QuestionOnly, &paths)?;
    let s = utilities(params, task, &paths, ORACLE_CUE)?;
    let (post, mu) = bayes_posterior(&prior, &s)?;
    Ok(amplification_from(&prior, &post, &s, mu, taus))
}

/// Set-level factorization for an arbitrary subset: returns
/// `|Pr_post(Z) - Pr_prior(Z) E[s | Z] / mu|`, or `None` for a null set.
pub fn subset_identity_error(prior: &[f64], posterior: &[f64], s: &[f64], mu: f64, member: &[bool]) -> Option<f64> {
    let mut pr_prior = 0.0;
    let mut pr_post = 0.0;
    let mut weighted = 0.0;
    for i in 0..prior.len() {
        if member[i] {
            pr_prior += prior[i];
            pr_post += posterior[i];
            weighted += prior[i] * s[i];
        }
    }
    if pr_prior <= 0.0 {
        return None;
    }
    let cond_mean = weighted / pr_prior;
    Some((pr_post - pr_prior * cond_mean / mu).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentGain {
    pub e_post_s: f64,
    /// mu + Var(s) / mu
    pub predicted: f64,
    pub abs_diff: f64,
}

pub fn moment_gain_from(prior: &[f64], posterior: &[f64], s: &[f64]) -> MomentGain {
    let mu: f64 = prior.iter().zip(s).map(|(p, s)| p * s).sum();
    let var: f64 = prior.iter().zip(s).map(|(p, s)| p * (s - mu) * (s - mu)).sum();
    let e_post_s: f64 = posterior.iter().zip(s).map(|(q, s)| q * s).sum();
    let predicted = mu + var / mu;
    MomentGain {
        e_post_s,
        predicted,
        abs_diff: (e_post_s - predicted).abs(),
    }
}

pub fn moment_gain_check(params: &PolicyParams, task: &TaskSpec) -> Result<MomentGain> {
    let paths = enumerate_paths(task);
    let prior = path_distribution(params, task, AnswerSlot::QuestionOnly, &paths)?;
    let s = utilities(params, task, &paths, ORACLE_CUE)?;
    let (post, _) = bayes_posterior(&prior, &s)?;
    Ok(moment_gain_from(&prior, &post, &s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub log_mu: f64,
    pub gap: f64,
}

/// `E_q[ln s] - KL(q || prior)` against `ln mu`.
pub fn elbo_from(prior: &[f64], s: &[f64], q: &[f64]) -> ElboReport {
    let mu: f64 = prior.iter().zip(s).map(|(p, s)| p * s).sum();
    let expected_log_s: f64 = q
        .iter()
        .zip(s)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(qi, si)| qi * si.ln())
        .sum();
    let elbo = expected_log_s - exact_kl(q, prior);
    let log_mu = mu.ln();
    ElboReport {
        elbo,
        log_mu,
        gap: log_mu - elbo,
    }
}

pub fn exact_elbo(params: &PolicyParams, task: &TaskSpec, q: &[f64]) -> Result<ElboReport> {
    let paths = enumerate_paths(task);
    if q.len() != paths.len() {
        return Err(RavrError::Validation(format!(
            "q has {} entries for {} paths",
            q.len(),
            paths.len()
        )));
    }
    let prior = path_distribution(params, task, AnswerSlot::QuestionOnly, &paths)?;
    let s = utilities(params, task, &paths, ORACLE_CUE)?;
    let mu: f64 = prior.iter().zip(&s).map(|(p, s)| p * s).sum();
    if mu < MIN_MU {
        return Err(RavrError::DegenerateMu(mu));
    }
    Ok(elbo_from(&prior, &s, q))
}

/// Every enumerable quantity for one (task, params) pair.
///
/// `posterior` is the exact Bayes posterior; `amortized` is the model's own
/// answer-conditioned distribution, which is what `kl_post_prior` and
/// `elbo` are measured for.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactReport {
    pub paths: Vec<Path>,
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
    pub amortized: Vec<f64>,
    pub utilities: Vec<f64>,
    pub mu: f64,
    pub var_s: f64,
    pub e_post_s: f64,
    pub kl_post_prior: f64,
    pub elbo: f64,
    pub log_mu: f64,
}

impl ExactReport {
    pub fn compute(params: &PolicyParams, task: &TaskSpec) -> Result<Self> {
        task.sizes().validate()?;
        let paths = enumerate_paths(task);
        let prior = path_distribution(params, task, AnswerSlot::QuestionOnly, &paths)?;
        let amortized = path_distribution(params, task, AnswerSlot::Reference, &paths)?;
        let s = utilities(params, task, &paths, ORACLE_CUE)?;
        let (posterior, mu) = bayes_posterior(&prior, &s)?;
        let gain = moment_gain_from(&prior, &posterior, &s);
        let var_s = prior.iter().zip(&s).map(|(p, v)| p * (v - mu) * (v - mu)).sum();
        let elbo = elbo_from(&prior, &s, &amortized);
        Ok(ExactReport {
            kl_post_prior: exact_kl(&amortized, &prior),
            elbo: elbo.elbo,
            log_mu: elbo.log_mu,
            e_post_s: gain.e_post_s,
            var_s,
            mu,
            paths,
            prior,
            posterior,
            amortized,
            utilities: s,
        })
    }

    /// Prior and amortized-posterior mass on the task's golden paths.
    pub fn golden_mass(&self, task: &TaskSpec) -> (f64, f64) {
        let mut prior = 0.0;
        let mut post = 0.0;
        for (i, z) in self.paths.iter().enumerate() {
            if task.is_golden(z) {
                prior += self.prior[i];
                post += self.amortized[i];
            }
        }
        (prior, post)
    }
}
