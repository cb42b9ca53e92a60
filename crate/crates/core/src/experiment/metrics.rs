//! One metrics line per training step.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RavrError, Result};
use crate::trainer::StepMetrics;

pub const SCHEMA_VERSION: u32 = 1;

/// Fields that do not apply to an algorithm are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub run_id: String,
    pub step: usize,
    pub task_id: String,
    pub seed: u64,
    pub mu_exact: f64,
    pub e_post_s_exact: f64,
    pub var_s_exact: f64,
    pub kl_exact: Option<f64>,
    pub kl_k3_mean: Option<f64>,
    pub kl_k3_stderr: Option<f64>,
    pub r_impr_mean: Option<f64>,
    pub golden_mass_prior: f64,
    pub golden_mass_post: Option<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub grad_norm: f64,
    pub wallclock_ms: u64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 17] = [
        "run_id",
        "step",
        "task_id",
        "seed",
        "mu_exact",
        "e_post_s_exact",
        "var_s_exact",
        "kl_exact",
        "kl_k3_mean",
        "kl_k3_stderr",
        "r_impr_mean",
        "golden_mass_prior",
        "golden_mass_post",
        "reward_mean",
        "reward_std",
        "grad_norm",
        "wallclock_ms",
    ];

    pub fn from_step(run_id: &str, step: usize, task_id: &str, seed: u64, m: &StepMetrics, wallclock_ms: u64) -> Self {
        MetricsRecord {
            run_id: run_id.to_string(),
            step,
            task_id: task_id.to_string(),
            seed,
            mu_exact: m.mu_exact,
            e_post_s_exact: m.e_post_s_exact,
            var_s_exact: m.var_s_exact,
            kl_exact: m.kl_exact,
            kl_k3_mean: m.kl_k3_mean,
            kl_k3_stderr: m.kl_k3_stderr,
            r_impr_mean: m.r_impr_mean,
            golden_mass_prior: m.golden_mass_prior,
            golden_mass_post: m.golden_mass_post,
            reward_mean: m.reward_mean,
            reward_std: m.reward_std,
            grad_norm: m.grad_norm,
            wallclock_ms,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    /// Cell text of one column; empty for null.
    pub fn cell(&self, column: &str) -> Result<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        Ok(match column {
            "run_id" => self.run_id.clone(),
            "step" => self.step.to_string(),
            "task_id" => self.task_id.clone(),
            "seed" => self.seed.to_string(),
            "mu_exact" => self.mu_exact.to_string(),
            "e_post_s_exact" => self.e_post_s_exact.to_string(),
            "var_s_exact" => self.var_s_exact.to_string(),
            "kl_exact" => opt(self.kl_exact),
            "kl_k3_mean" => opt(self.kl_k3_mean),
            "kl_k3_stderr" => opt(self.kl_k3_stderr),
            "r_impr_mean" => opt(self.r_impr_mean),
            "golden_mass_prior" => self.golden_mass_prior.to_string(),
            "golden_mass_post" => opt(self.golden_mass_post),
            "reward_mean" => self.reward_mean.to_string(),
            "reward_std" => self.reward_std.to_string(),
            "grad_norm" => self.grad_norm.to_string(),
            "wallclock_ms" => self.wallclock_ms.to_string(),
            other => return Err(RavrError::UnknownColumn(other.to_string())),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu_exact > 0.0 && self.mu_exact <= 1.0) {
            return Err(RavrError::Validation(format!("mu_exact {} outside (0, 1]", self.mu_exact)));
        }
        if let Some(kl) = self.kl_exact {
            if kl.is_nan() || kl < 0.0 {
                return Err(RavrError::Validation(format!("kl_exact {kl} is negative")));
            }
        }
        Ok(())
    }
}

/// Appends records as JSON lines.
pub struct JsonlWriter<W: Write> {
    out: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        JsonlWriter { out }
    }

    pub fn write(&mut self, record: &MetricsRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", record.to_json_line())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Reads every line; a line that is not a complete record is a parse error.
pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| RavrError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RavrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line).map_err(|e| RavrError::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(step: usize) -> MetricsRecord {
        MetricsRecord {
            run_id: "grpo-s0-i0".into(),
            step,
            task_id: "task-0".into(),
            seed: 0,
            mu_exact: 0.25,
            e_post_s_exact: 0.5,
            var_s_exact: 0.0625,
            kl_exact: None,
            kl_k3_mean: None,
            kl_k3_stderr: None,
            r_impr_mean: None,
            golden_mass_prior: 0.01,
            golden_mass_post: None,
            reward_mean: 0.2,
            reward_std: 0.1,
            grad_norm: 1.5,
            wallclock_ms: 3,
        }
    }

    #[test]
    fn nulls_are_written_not_omitted() {
        let line = sample(0).to_json_line();
        for col in MetricsRecord::COLUMNS {
            assert!(line.contains(&format!("\"{col}\":")), "{col} missing from {line}");
        }
        assert!(line.contains("\"kl_exact\":null"));
        let back: MetricsRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, sample(0));
    }

    #[test]
    fn floats_round_trip_bitwise() {
        let mut r = sample(1);
        r.mu_exact = 0.1 + 0.2;
        r.kl_exact = Some(1.0 / 3.0);
        let back: MetricsRecord = serde_json::from_str(&r.to_json_line()).unwrap();
        assert_eq!(back.mu_exact.to_bits(), r.mu_exact.to_bits());
        assert_eq!(back.kl_exact.unwrap().to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn unknown_field_and_column_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&sample(0).to_json_line()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_str::<MetricsRecord>(&v.to_string()).is_err());
        assert!(matches!(sample(0).cell("nope"), Err(RavrError::UnknownColumn(_))));
        assert_eq!(sample(0).cell("kl_exact").unwrap(), "");
    }

    #[test]
    fn validation() {
        assert!(sample(0).validate().is_ok());
        let mut r = sample(0);
        r.mu_exact = 0.0;
        assert!(r.validate().is_err());
        let mut r = sample(0);
        r.kl_exact = Some(-1e-3);
        assert!(r.validate().is_err());
    }
}
