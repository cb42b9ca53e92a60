//! Paired comparison of two configurations over a list of seeds.

use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::instance_records;
use super::smoothed_final;
use crate::error::{RavrError, Result};

/// Gaps smaller than this count as ties, half a win to each side.
pub const TIE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairResult {
    pub seed: u64,
    pub task_id: String,
    pub final_a: f64,
    pub final_b: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub label_a: String,
    pub label_b: String,
    pub pairs: Vec<PairResult>,
    pub win_rate_a: f64,
    pub mean_gap: f64,
    pub mean_final_a: f64,
    pub mean_final_b: f64,
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:<12} {:>12} {:>12} {:>10}\n",
            "seed", "task", self.label_a, self.label_b, "gap"
        );
        for p in &self.pairs {
            out.push_str(&format!(
                "{:>6} {:<12} {:>12.6} {:>12.6} {:>+10.6}\n",
                p.seed, p.task_id, p.final_a, p.final_b, p.gap
            ));
        }
        out.push_str(&format!(
            "mean final mu: {} {:.6}, {} {:.6}; win rate of {}: {:.3}; mean gap {:+.6}\n",
            self.label_a, self.mean_final_a, self.label_b, self.mean_final_b, self.label_a, self.win_rate_a, self.mean_gap
        ));
        out
    }
}

/// Short label of a config: algorithm, group size and active ablations.
pub fn label(cfg: &ExperimentConfig) -> String {
    let mut s = format!("{}(G={})", cfg.train.algorithm, cfg.train.group_size);
    for a in cfg.train.ablations.active() {
        s.push('+');
        s.push_str(a);
    }
    s
}

/// Pins a config to one seed: generator seed and training seed both become
/// `seed`, single instance.
pub fn pin_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.task = c.task.with_generator_seed(seed);
    c.train.seed = seed;
    c.n_instances = 1;
    c
}

/// Win of `a` over `b` on one pair: 1, 0 or 0.5 for a tie.
pub fn win_score(a: f64, b: f64) -> f64 {
    let gap = a - b;
    if gap.abs() < TIE_EPS {
        0.5
    } else if gap > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn compare(a: &ExperimentConfig, b: &ExperimentConfig, seeds: &[u64]) -> Result<ComparisonReport> {
    if a.task != b.task {
        return Err(RavrError::MismatchedTasks(format!("{:?} vs {:?}", a.task, b.task)));
    }
    if seeds.is_empty() {
        return Err(RavrError::Validation("compare needs at least one seed".into()));
    }
    a.validate()?;
    b.validate()?;
    let mut pairs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let ra = instance_records(&pin_seed(a, seed), 0)?;
        let rb = instance_records(&pin_seed(b, seed), 0)?;
        let mu = |v: &[super::MetricsRecord]| smoothed_final(&v.iter().map(|r| r.mu_exact).collect::<Vec<_>>());
        let (fa, fb) = (mu(&ra), mu(&rb));
        pairs.push(PairResult {
            seed,
            task_id: ra.first().map(|r| r.task_id.clone()).unwrap_or_default(),
            final_a: fa,
            final_b: fb,
            gap: fa - fb,
        });
    }
    let n = pairs.len() as f64;
    Ok(ComparisonReport {
        label_a: label(a),
        label_b: label(b),
        win_rate_a: pairs.iter().map(|p| win_score(p.final_a, p.final_b)).sum::<f64>() / n,
        mean_gap: pairs.iter().map(|p| p.gap).sum::<f64>() / n,
        mean_final_a: pairs.iter().map(|p| p.final_a).sum::<f64>() / n,
        mean_final_b: pairs.iter().map(|p| p.final_b).sum::<f64>() / n,
        pairs,
    })
}
