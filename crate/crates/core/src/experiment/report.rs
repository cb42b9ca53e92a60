//! Text tables summarizing a directory of metrics logs.

use std::path::Path as FsPath;

use super::metrics::{read_jsonl, MetricsRecord};
use super::{smoothed_final, smoothed_initial};
use crate::error::{RavrError, Result};

/// Trend summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrend {
    pub run_id: String,
    pub task_id: String,
    pub steps: usize,
    pub mu_initial: f64,
    pub mu_final: f64,
    pub kl_final: Option<f64>,
    pub r_impr_final: Option<f64>,
    pub golden_post_final: Option<f64>,
}

impl RunTrend {
    pub fn from_records(records: &[MetricsRecord]) -> Option<Self> {
        let first = records.first()?;
        let col = |f: fn(&MetricsRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let opt = |f: fn(&MetricsRecord) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = records.iter().map(f).collect();
            v.map(|v| smoothed_final(&v))
        };
        let mu = col(|r| r.mu_exact);
        Some(RunTrend {
            run_id: first.run_id.clone(),
            task_id: first.task_id.clone(),
            steps: records.len(),
            mu_initial: smoothed_initial(&mu),
            mu_final: smoothed_final(&mu),
            kl_final: opt(|r| r.kl_exact),
            r_impr_final: opt(|r| r.r_impr_mean),
            golden_post_final: opt(|r| r.golden_mass_post),
        })
    }
}

fn group_key(run_id: &str) -> &str {
    run_id.rsplit_once("-s").map(|(k, _)| k).unwrap_or(run_id)
}

/// Aggregates every `*.jsonl` file in `dir`.
pub fn report(dir: &FsPath) -> Result<String> {
    let entries = std::fs::read_dir(dir).map_err(|e| RavrError::io(dir, e))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RavrError::Validation(format!("no .jsonl files in {}", dir.display())));
    }
    let mut trends = Vec::new();
    for f in &files {
        if let Some(t) = RunTrend::from_records(&read_jsonl(f)?) {
            trends.push(t);
        }
    }

    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
    let mut out = format!(
        "{:<36} {:<10} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "run", "task", "steps", "mu_init", "mu_final", "kl", "r_impr", "gold_q"
    );
    for t in &trends {
        out.push_str(&format!(
            "{:<36} {:<10} {:>6} {:>9.5} {:>9.5} {:>9} {:>9} {:>9}\n",
            t.run_id,
            t.task_id,
            t.steps,
            t.mu_initial,
            t.mu_final,
            fmt_opt(t.kl_final),
            fmt_opt(t.r_impr_final),
            fmt_opt(t.golden_post_final)
        ));
    }

    let mut groups: Vec<&str> = trends.iter().map(|t| group_key(&t.run_id)).collect();
    groups.sort_unstable();
    groups.dedup();
    out.push_str(&format!("\n{:<36} {:>5} {:>12} {:>12}\n", "config", "runs", "mean_final", "std_final"));
    for g in groups {
        let v: Vec<f64> = trends
            .iter()
            .filter(|t| group_key(&t.run_id) == g)
            .map(|t| t.mu_final)
            .collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        out.push_str(&format!("{:<36} {:>5} {:>12.6} {:>12.6}\n", g, v.len(), mean, std));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::ExperimentConfig;
    use crate::experiment::run::run_experiment;

    #[test]
    fn report_over_a_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.train.steps = 5;
        cfg.n_instances = 2;
        cfg.verify_instances = 1;
        cfg.output_dir = dir.path().to_path_buf();
        run_experiment(&cfg).unwrap();
        let text = report(dir.path()).unwrap();
        assert!(text.contains("ravr-s0-i0"));
        assert!(text.contains("ravr-s0-i1"));
        assert!(text.lines().any(|l| l.starts_with("ravr ") && l.contains(" 2 ")));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(dir.path()).is_err());
    }

    #[test]
    fn grouping() {
        assert_eq!(group_key("ravr-no_kl-s3-i0"), "ravr-no_kl");
        assert_eq!(group_key("grpo-s0-i12"), "grpo");
    }
}
