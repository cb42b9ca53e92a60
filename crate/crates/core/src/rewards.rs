//! Reward signals: likelihood rewards, the prior-expectation utility
//! baseline, the clipped improvement reward and group-relative advantages.

use serde::{Deserialize, Serialize};

use crate::error::{RavrError, Result};
use crate::policy::{AnswerSlot, PolicyParams};
use crate::task_env::{Path, TaskSpec};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Prior samples averaged into the utility baseline.
    pub baseline_samples: usize,
    pub clip_at_zero: bool,
    /// Score the answer through the cued answer rows.
    pub answer_cue: bool,
    /// Groups whose reward std is at or below this get zero advantages.
    pub group_eps: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            baseline_samples: 8,
            clip_at_zero: true,
            answer_cue: true,
            group_eps: 1e-6,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.baseline_samples == 0 {
            return Err(RavrError::Validation("baseline_samples must be >= 1".into()));
        }
        if self.group_eps.is_nan() || self.group_eps <= 0.0 {
            return Err(RavrError::Validation("group_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Rewards of one group with their normalization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRewards {
    pub raw: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Mean per-token log-probability of the reference answer after `path`.
pub fn norm_loglik(params: &PolicyParams, task: &TaskSpec, path: &Path, cue: bool) -> f64 {
    let lps = params.answer_token_logprobs(cue, path, task.reference_answer());
    lps.iter().sum::<f64>() / lps.len() as f64
}

/// Raw sequence probability of the reference answer after `path`.
pub fn prob_reward(params: &PolicyParams, task: &TaskSpec, path: &Path, cue: bool) -> f64 {
    params
        .answer_token_logprobs(cue, path, task.reference_answer())
        .iter()
        .sum::<f64>()
        .exp()
}

/// Mean normalized log-likelihood over already drawn prior paths.
pub fn baseline_from_paths<'a>(
    params: &PolicyParams,
    task: &TaskSpec,
    paths: impl IntoIterator<Item = &'a Path>,
    cue: bool,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for z in paths {
        total += norm_loglik(params, task, z, cue);
        n += 1;
    }
    total / n as f64
}

/// Monte Carlo estimate of `E_prior[norm_loglik]` from fresh prior samples.
pub fn prior_utility_baseline(params: &PolicyParams, task: &TaskSpec, cfg: &RewardConfig, rng: &mut Rng) -> Result<f64> {
    cfg.validate()?;
    let paths: Vec<Path> = (0..cfg.baseline_samples)
        .map(|_| params.sample_path(task, AnswerSlot::QuestionOnly, rng).path)
        .collect();
    Ok(baseline_from_paths(params, task, &paths, cfg.answer_cue))
}

/// Improvement of a posterior sample over the prior baseline.
pub fn r_impr(norm_loglik_z: f64, baseline: f64, cfg: &RewardConfig) -> f64 {
    let diff = norm_loglik_z - baseline;
    if cfg.clip_at_zero {
        diff.max(0.0)
    } else {
        diff
    }
}

/// `(r - mean) / std` with population std; all zeros when std <= eps.
pub fn group_advantages(raw: &[f64], cfg: &RewardConfig) -> Result<GroupRewards> {
    if raw.is_empty() {
        return Err(RavrError::EmptyGroup);
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let advantages = if std <= cfg.group_eps {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(GroupRewards {
        raw: raw.to_vec(),
        mean,
        std,
        advantages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, InitScheme};
    use crate::seeded_rng;
    use crate::task_env::{new_random_task, TaskSizes};
    use proptest::prelude::*;

    fn task(a: usize, m: usize) -> TaskSpec {
        new_random_task(
            4,
            TaskSizes {
                reason_alphabet_size: 2,
                max_reason_len: 2,
                answer_alphabet_size: a,
                answer_len: m,
            },
        )
        .unwrap()
    }

    #[test]
    fn norm_loglik_by_hand() {
        let t = task(2, 2);
        let mut p = init_params(&t, &InitScheme::Uniform, 0);
        let z = Path::new(vec![1]);
        let y = t.reference_answer().to_vec();
        // Per-token log-probs -0.2 and -0.4 on a two-token alphabet.
        let row = |target: u8, lp: f64| {
            let prob = lp.exp();
            let mut r = vec![0.0, 0.0];
            r[target as usize] = (prob / (1.0 - prob)).ln();
            r
        };
        p.set_answer_row(true, &z, &[], &row(y[0], -0.2));
        p.set_answer_row(true, &z, &y[..1], &row(y[1], -0.4));
        let v = norm_loglik(&p, &t, &z, true);
        assert!((v + 0.3).abs() < 1e-12);
        assert!((v.exp() - 0.74082).abs() < 1e-5);
        // The uncued rows are untouched.
        assert!((norm_loglik(&p, &t, &z, false) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_token_normalization_is_identity() {
        let t = task(3, 1);
        let p = init_params(&t, &InitScheme::Random { scale: 2.0 }, 3);
        for z in crate::task_env::enumerate_paths(&t) {
            let a = p.answer_logprob(&t, true, &z, t.reference_answer()).unwrap();
            assert_eq!(norm_loglik(&p, &t, &z, true), a);
            assert!((prob_reward(&p, &t, &z, true) - a.exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_head_any_length() {
        for m in 1..=3 {
            let t = task(2, m);
            let p = init_params(&t, &InitScheme::Uniform, 0);
            assert!((norm_loglik(&p, &t, &Path::empty(), true) - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn baseline_single_reachable_path_is_exact() {
        let t = task(2, 1);
        let mut p = init_params(&t, &InitScheme::Random { scale: 1.0 }, 8);
        p.set_reason_row(AnswerSlot::QuestionOnly, &[], &[-1e6, -1e6, 0.0]);
        let mut rng = seeded_rng(0);
        let b = prior_utility_baseline(&p, &t, &RewardConfig::default(), &mut rng).unwrap();
        assert!((b - norm_loglik(&p, &t, &Path::empty(), true)).abs() < 1e-15);
    }

    #[test]
    fn baseline_is_deterministic() {
        let t = task(3, 2);
        let p = init_params(&t, &InitScheme::Random { scale: 1.0 }, 8);
        let cfg = RewardConfig::default();
        let a = prior_utility_baseline(&p, &t, &cfg, &mut seeded_rng(5)).unwrap();
        let b = prior_utility_baseline(&p, &t, &cfg, &mut seeded_rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn r_impr_examples() {
        let cfg = RewardConfig::default();
        assert!((r_impr(-0.5, -0.9, &cfg) - 0.4).abs() < 1e-15);
        assert_eq!(r_impr(-1.2, -0.9, &cfg), 0.0);
        assert_eq!(r_impr(-0.7, -0.7, &cfg), 0.0);
        let raw = RewardConfig { clip_at_zero: false, ..cfg };
        assert!((r_impr(-1.2, -0.9, &raw) + 0.3).abs() < 1e-15);
    }

    #[test]
    fn advantages_examples() {
        let cfg = RewardConfig::default();
        let g = group_advantages(&[1.0, 0.0, 0.0, 1.0], &cfg).unwrap();
        assert_eq!(g.mean, 0.5);
        assert_eq!(g.std, 0.5);
        assert_eq!(g.advantages, vec![1.0, -1.0, -1.0, 1.0]);
        let g = group_advantages(&[1.0; 4], &cfg).unwrap();
        assert_eq!(g.advantages, vec![0.0; 4]);
        assert!(matches!(group_advantages(&[], &cfg), Err(RavrError::EmptyGroup)));
    }

    proptest! {
        #[test]
        fn advantages_are_centered_and_scaled(raw in prop::collection::vec(-5.0f64..5.0, 2..16)) {
            let cfg = RewardConfig::default();
            let g = group_advantages(&raw, &cfg).unwrap();
            let sum: f64 = g.advantages.iter().sum();
            prop_assert!(sum.abs() < 1e-9);
            if g.std > cfg.group_eps {
                let var = g.advantages.iter().map(|a| a * a).sum::<f64>() / raw.len() as f64;
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn raising_one_reward_never_lowers_its_advantage(
            raw in prop::collection::vec(-5.0f64..5.0, 2..10),
            idx in 0usize..10,
            bump in 0.0f64..3.0,
        ) {
            let cfg = RewardConfig::default();
            let i = idx % raw.len();
            let before = group_advantages(&raw, &cfg).unwrap().advantages[i];
            let mut raised = raw.clone();
            raised[i] += bump;
            let after = group_advantages(&raised, &cfg).unwrap().advantages[i];
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn clipped_r_impr_nonnegative(z in -10.0f64..0.0, b in -10.0f64..0.0) {
            let v = r_impr(z, b, &RewardConfig::default());
            prop_assert!(v >= 0.0);
            if z <= b {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
