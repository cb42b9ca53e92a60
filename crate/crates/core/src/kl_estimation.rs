//! Sampled KL between the answer-conditioned and question-only reasoning
//! distributions.
//!
//! Samples come from the posterior. At each step the per-token term is
//! `r - ln r - 1` with `r = pi_prior / pi_post` at the sampled token; it is
//! nonnegative pointwise and its expectation under the posterior is the
//! exact sequence KL `KL(post || prior)`.

use serde::Serialize;

use crate::error::{RavrError, Result};
use crate::policy::{AnswerSlot, PolicyParams, SampledPath};
use crate::task_env::{enumerate_paths, TaskSpec};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlSampleEstimate {
    pub per_token_values: Vec<f64>,
    pub path_total: f64,
    pub weight: f64,
    pub weighted: f64,
}

/// `exp(d) - d - 1` with `d = logp_prior - logp_post`.
pub fn k3_term(logp_prior_t: f64, logp_post_t: f64) -> f64 {
    let d = logp_prior_t - logp_post_t;
    // exp_m1 keeps the small-d regime accurate; the max guards the last ulp.
    (d.exp_m1() - d).max(0.0)
}

/// Derivative of the k3 term with respect to `d`.
pub(crate) fn k3_slope(logp_prior_t: f64, logp_post_t: f64) -> f64 {
    (logp_prior_t - logp_post_t).exp_m1()
}

fn k3_sum(prior: &[f64], post: &[f64]) -> f64 {
    prior.iter().zip(post).map(|(&a, &b)| k3_term(a, b)).sum()
}

/// Sum of k3 terms over every step of the sample, terminator included.
pub fn k3_path(sample: &SampledPath) -> f64 {
    k3_sum(&sample.logp_prior, &sample.logp_posterior)
}

/// Reward weighting of one sample's KL estimate.
pub fn weighted_kl(sample_kl: f64, r_impr: f64) -> f64 {
    debug_assert!(r_impr >= 0.0);
    sample_kl * r_impr
}

pub fn kl_sample_estimate(sample: &SampledPath, weight: f64) -> KlSampleEstimate {
    let per_token_values: Vec<f64> = sample
        .logp_prior
        .iter()
        .zip(&sample.logp_posterior)
        .map(|(&a, &b)| k3_term(a, b))
        .collect();
    let path_total = per_token_values.iter().sum();
    KlSampleEstimate {
        per_token_values,
        path_total,
        weight,
        weighted: weighted_kl(path_total, weight),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and standard error of a sample of path totals.
pub fn mean_and_stderr(values: &[f64]) -> Result<McEstimate> {
    if values.len() < 2 {
        return Err(RavrError::InsufficientSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(McEstimate {
        mean,
        stderr: (var / n).sqrt(),
    })
}

/// Unweighted k3 estimate of `KL(post || prior)` from `n` posterior samples.
pub fn kl_mc_estimate(params: &PolicyParams, task: &TaskSpec, n: usize, rng: &mut Rng) -> Result<McEstimate> {
    if n < 2 {
        return Err(RavrError::InsufficientSamples { needed: 2, got: n });
    }
    let totals: Vec<f64> = (0..n)
        .map(|_| k3_path(&params.sample_path(task, AnswerSlot::Reference, rng)))
        .collect();
    mean_and_stderr(&totals)
}

/// `E_post[k3_path]` computed by enumeration rather than sampling.
pub fn k3_expectation_exact(params: &PolicyParams, task: &TaskSpec) -> Result<f64> {
    task.sizes().validate()?;
    let mut total = 0.0;
    for z in enumerate_paths(task) {
        let post = params.path_token_logprobs(AnswerSlot::Reference, &z);
        let prior = params.path_token_logprobs(AnswerSlot::QuestionOnly, &z);
        total += post.iter().sum::<f64>().exp() * k3_sum(&prior, &post);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, InitScheme};
    use crate::seeded_rng;
    use crate::task_env::{new_random_task, TaskSizes};

    #[test]
    fn k3_closed_forms() {
        assert_eq!(k3_term(-0.3, -0.3), 0.0);
        let r2 = k3_term(2f64.ln(), 0.0);
        assert!((r2 - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((r2 - 0.30685).abs() < 1e-5);
        let r23 = k3_term((2.0f64 / 3.0).ln(), 0.0);
        assert!((r23 - 0.07213).abs() < 1e-5);
    }

    #[test]
    fn w2_expectation_matches_exact_kl() {
        // Posterior [0.25, 0.75] against prior [0.5, 0.5] as a one-step world.
        let e = 0.25 * k3_term(0.5f64.ln(), 0.25f64.ln()) + 0.75 * k3_term(0.5f64.ln(), 0.75f64.ln());
        let kl = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((e - kl).abs() < 1e-15);
        assert!((e - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn weighting() {
        assert_eq!(weighted_kl(0.3, 0.0), 0.0);
        assert!((weighted_kl(0.3, 0.4) - 0.12).abs() < 1e-15);
        assert_eq!(weighted_kl(0.0, 2.5), 0.0);
    }

    fn small_task() -> TaskSpec {
        new_random_task(
            2,
            TaskSizes {
                reason_alphabet_size: 3,
                max_reason_len: 3,
                answer_alphabet_size: 2,
                answer_len: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn identical_rows_give_zero() {
        let t = small_task();
        let p = init_params(&t, &InitScheme::Uniform, 0);
        let est = kl_mc_estimate(&p, &t, 50, &mut seeded_rng(1)).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
        assert!(matches!(
            kl_mc_estimate(&p, &t, 1, &mut seeded_rng(1)),
            Err(RavrError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn enumeration_expectation_is_exact_kl() {
        let t = small_task();
        let p = init_params(&t, &InitScheme::Random { scale: 1.5 }, 3);
        let post = crate::exact_oracle::exact_amortized_posterior(&p, &t).unwrap();
        let prior = crate::exact_oracle::exact_prior(&p, &t).unwrap();
        let kl = crate::exact_oracle::exact_kl(&post, &prior);
        let e = k3_expectation_exact(&p, &t).unwrap();
        assert!((e - kl).abs() < 1e-12, "{e} vs {kl}");
    }

    #[test]
    fn sample_terms_nonnegative() {
        let t = small_task();
        let p = init_params(&t, &InitScheme::Random { scale: 3.0 }, 4);
        let mut rng = seeded_rng(9);
        for _ in 0..500 {
            let s = p.sample_path(&t, AnswerSlot::Reference, &mut rng);
            let est = kl_sample_estimate(&s, 0.5);
            assert!(est.per_token_values.iter().all(|&v| v >= 0.0));
            assert!(est.path_total >= 0.0);
            assert_eq!(est.path_total, k3_path(&s));
        }
    }
}
