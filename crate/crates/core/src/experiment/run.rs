//! Running configured experiments.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{JsonlWriter, MetricsRecord, SCHEMA_VERSION};
use super::smoothed_final;
use super::verify::{verify_suite, VerificationReport};
use crate::error::{RavrError, Result};
use crate::policy::PolicyParams;
use crate::seeded_rng;
use crate::task_env::TaskSpec;
use crate::trainer::{train_step, StepReport};

pub const MANIFEST_FILE: &str = "manifest.json";

/// State of one instance after its last step.
#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub run_id: String,
    pub task: TaskSpec,
    pub params: PolicyParams,
    pub seed: u64,
}

/// Training seed of an instance.
pub fn instance_seed(cfg: &ExperimentConfig, instance: usize) -> u64 {
    cfg.train.seed.wrapping_add(instance as u64)
}

/// Trains one instance, handing every step to `on_step`. Snapshots go to
/// `snapshot_dir` when given and `snapshot_every > 0`.
pub fn run_instance(
    cfg: &ExperimentConfig,
    instance: usize,
    snapshot_dir: Option<&FsPath>,
    on_step: &mut dyn FnMut(&MetricsRecord, &StepReport) -> Result<()>,
) -> Result<InstanceResult> {
    let wrap = |e: RavrError| RavrError::Instance {
        instance,
        source: Box::new(e),
    };
    let seed = instance_seed(cfg, instance);
    let run_id = cfg.run_id(instance);
    let (task, mut params) = cfg.task.build(instance, cfg.train.seed).map_err(wrap)?;
    let mut rng = seeded_rng(seed);
    let start = Instant::now();
    for step in 0..cfg.train.steps {
        let report = train_step(&mut params, &task, &cfg.train, &mut rng).map_err(wrap)?;
        let ms = start.elapsed().as_millis() as u64;
        let record = MetricsRecord::from_step(&run_id, step, task.task_id(), seed, &report.metrics, ms);
        on_step(&record, &report).map_err(wrap)?;
        if let Some(dir) = snapshot_dir {
            if cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0 {
                let path = dir.join(format!("{run_id}-step{}.snapshot", step + 1));
                params.save_snapshot(&path).map_err(wrap)?;
            }
        }
    }
    Ok(InstanceResult {
        run_id,
        task,
        params,
        seed,
    })
}

/// Records of one instance, kept in memory.
pub fn instance_records(cfg: &ExperimentConfig, instance: usize) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::with_capacity(cfg.train.steps);
    run_instance(cfg, instance, None, &mut |r, _| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub task_id: String,
    pub file: String,
    pub steps: usize,
    pub final_mu_smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVerification {
    pub seed: u64,
    pub instances: usize,
    pub passed: bool,
    pub failing: Vec<String>,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub version: String,
    pub config: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
    pub verification: ManifestVerification,
    pub runs: Vec<RunSummary>,
}

impl Manifest {
    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RavrError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub verification: VerificationReport,
}

fn check_writable(dir: &FsPath) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RavrError::io(dir, e))?;
    let probe = dir.join(".write-probe");
    File::create(&probe).map_err(|e| RavrError::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| RavrError::io(&probe, e))
}

/// Verifies, trains every instance into its own JSONL file, then writes the
/// manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    check_writable(dir)?;
    let started_at = chrono::Utc::now().to_rfc3339();

    let verification = verify_suite(cfg.train.seed, cfg.verify_instances)?;
    if !verification.passed && cfg.require_verified {
        return Err(RavrError::Validation(format!(
            "verification failed ({}); set require_verified = false to train anyway",
            verification.failing().join(", ")
        )));
    }

    let mut runs = Vec::with_capacity(cfg.n_instances);
    for instance in 0..cfg.n_instances {
        let run_id = cfg.run_id(instance);
        let file_name = format!("{run_id}.jsonl");
        let path = dir.join(&file_name);
        let file = File::create(&path).map_err(|e| RavrError::io(&path, e))?;
        let mut writer = JsonlWriter::new(BufWriter::new(file));
        let mut mus = Vec::with_capacity(cfg.train.steps);
        let result = run_instance(cfg, instance, Some(dir), &mut |record, _| {
            mus.push(record.mu_exact);
            writer.write(record).map_err(|e| RavrError::io(&path, e))
        })?;
        writer.into_inner().flush().map_err(|e| RavrError::io(&path, e))?;
        runs.push(RunSummary {
            run_id,
            task_id: result.task.task_id().to_string(),
            file: file_name,
            steps: cfg.train.steps,
            final_mu_smoothed: smoothed_final(&mus),
        });
    }

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(cfg)?,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        verification: ManifestVerification {
            seed: verification.seed,
            instances: verification.instances,
            passed: verification.passed,
            failing: verification.failing().iter().map(|s| s.to_string()).collect(),
            required: cfg.require_verified,
        },
        runs,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text + "\n").map_err(|e| RavrError::io(&manifest_path, e))?;
    Ok(ExperimentOutcome {
        manifest_path,
        manifest,
        verification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::metrics::read_jsonl;

    fn small(dir: &FsPath) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.train.steps = 10;
        cfg.n_instances = 2;
        cfg.verify_instances = 2;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn two_instances_ten_steps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.manifest.runs.len(), 2);
        for run in &out.manifest.runs {
            let records = read_jsonl(&dir.path().join(&run.file)).unwrap();
            assert_eq!(records.len(), 10);
            assert!(records.iter().all(|r| r.validate().is_ok()));
        }
        assert!(out.manifest_path.exists());
        assert!(out.manifest.verification.passed);
    }

    #[test]
    fn rerun_is_identical_except_wallclock() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let a = instance_records(&cfg, 1).unwrap();
        let b = instance_records(&cfg, 1).unwrap();
        let strip = |v: &[MetricsRecord]| -> Vec<String> {
            v.iter()
                .map(|r| MetricsRecord { wallclock_ms: 0, ..r.clone() }.to_json_line())
                .collect()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn snapshots_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.n_instances = 1;
        cfg.snapshot_every = 5;
        run_experiment(&cfg).unwrap();
        let p = dir.path().join("ravr-s0-i0-step10.snapshot");
        let params = PolicyParams::load_snapshot(&p).unwrap();
        assert!(params.is_finite());
        assert!(dir.path().join("ravr-s0-i0-step5.snapshot").exists());
    }

    #[test]
    fn unwritable_output_dir_fails_first() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let cfg = small(&blocker.join("sub"));
        assert!(matches!(run_experiment(&cfg), Err(RavrError::Io { .. })));
    }
}
