//! Experiment configuration files.
//!
//! A config is TOML. Training keys sit at the top level, the task source
//! under `[task]`:
//!
//! ```toml
//! algorithm = "ravr"
//! steps = 500
//! seed = 3
//!
//! [ablations]
//! no_kl = true
//!
//! [task]
//! seed = 1
//! hardness = 0.01
//! ```
//!
//! `[task]` takes either generator keys (`seed`, the four sizes, `hardness`,
//! `golden_paths`), a `file` holding a task TOML (relative to the config), or
//! an `[task.inline]` table in the same format. Every omitted key gets its
//! default; unknown keys are rejected.

use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RavrError, Result};
use crate::policy::{calibrate_hints, init_params, InitScheme, PolicyParams};
use crate::task_env::{new_random_task, plant_golden_paths, TaskFile, TaskSizes, TaskSpec};
use crate::trainer::{Ablations, Algorithm, TrainConfig};

pub const DEFAULT_HARDNESS: f64 = 0.01;
pub const DEFAULT_VERIFY_INSTANCES: usize = 20;
/// Logit scale of the random initialization used when a task has no planted
/// golden paths.
pub const RANDOM_INIT_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Generator {
        seed: u64,
        sizes: TaskSizes,
        hardness: f64,
        golden_paths: usize,
    },
    File(PathBuf),
    Inline(#[serde(serialize_with = "ser_task")] TaskSpec),
}

fn ser_task<S: serde::Serializer>(task: &TaskSpec, s: S) -> std::result::Result<S::Ok, S::Error> {
    TaskFile::from(task).serialize(s)
}

impl TaskSource {
    /// Task and initialization of one instance. Generated tasks advance the
    /// generator seed per instance; fixed tasks are shared.
    pub fn build(&self, instance: usize, train_seed: u64) -> Result<(TaskSpec, PolicyParams)> {
        match self {
            TaskSource::Generator {
                seed,
                sizes,
                hardness,
                golden_paths,
            } => {
                let s = seed.wrapping_add(instance as u64);
                let task = new_random_task(s, *sizes)?;
                if *golden_paths == 0 {
                    let p = init_params(&task, &InitScheme::Random { scale: RANDOM_INIT_SCALE }, s);
                    return Ok((task, p));
                }
                let (task, hints) = plant_golden_paths(&task, *golden_paths, *hardness, s)?;
                let p = init_params(&task, &InitScheme::Hinted(hints), s);
                Ok((task, p))
            }
            TaskSource::File(path) => {
                let task = TaskSpec::load(path)?;
                let p = default_init(&task, train_seed.wrapping_add(instance as u64))?;
                Ok((task, p))
            }
            TaskSource::Inline(task) => {
                let p = default_init(task, train_seed.wrapping_add(instance as u64))?;
                Ok((task.clone(), p))
            }
        }
    }

    pub fn with_generator_seed(&self, new_seed: u64) -> Self {
        match self {
            TaskSource::Generator {
                sizes,
                hardness,
                golden_paths,
                ..
            } => TaskSource::Generator {
                seed: new_seed,
                sizes: *sizes,
                hardness: *hardness,
                golden_paths: *golden_paths,
            },
            other => other.clone(),
        }
    }
}

/// Hinted initialization when the task carries golden paths and a hardness
/// target, random logits otherwise.
pub fn default_init(task: &TaskSpec, seed: u64) -> Result<PolicyParams> {
    if !task.golden_paths().is_empty() && task.hardness().is_some() {
        let hints = calibrate_hints(task, seed)?;
        Ok(init_params(task, &InitScheme::Hinted(hints), seed))
    } else {
        Ok(init_params(task, &InitScheme::Random { scale: RANDOM_INIT_SCALE }, seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub task: TaskSource,
    pub n_instances: usize,
    pub output_dir: PathBuf,
    /// Parameter snapshot interval in steps; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Refuse to train when the verification suite fails.
    pub require_verified: bool,
    pub verify_instances: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            task: TaskSource::Generator {
                seed: 0,
                sizes: TaskSizes::default(),
                hardness: DEFAULT_HARDNESS,
                golden_paths: 1,
            },
            n_instances: 1,
            output_dir: PathBuf::from("runs"),
            snapshot_every: 0,
            require_verified: true,
            verify_instances: DEFAULT_VERIFY_INSTANCES,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.n_instances == 0 {
            return Err(RavrError::Validation("n_instances must be >= 1".into()));
        }
        if self.verify_instances == 0 {
            return Err(RavrError::Validation("verify_instances must be >= 1".into()));
        }
        if let TaskSource::Generator {
            sizes,
            hardness,
            golden_paths,
            ..
        } = &self.task
        {
            sizes.validate()?;
            if *golden_paths > 0 && !(*hardness > 0.0 && *hardness <= 1.0) {
                return Err(RavrError::Validation(format!("hardness {hardness} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Resolved config as TOML, every key explicit.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(&RawConfig::from(self)).expect("config serializes")
    }

    pub fn from_toml_str(text: &str, base_dir: &FsPath) -> Result<Self> {
        Self::parse(text, base_dir, FsPath::new("<config>"))
    }

    fn parse(text: &str, base_dir: &FsPath, origin: &FsPath) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| RavrError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        let cfg = raw.resolve(base_dir)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run_id(&self, instance: usize) -> String {
        let mut id = self.train.algorithm.to_string();
        for name in self.train.ablations.active() {
            id.push('-');
            id.push_str(name);
        }
        format!("{id}-s{}-i{instance}", self.train.seed)
    }
}

/// Reads, defaults and validates a config file.
pub fn load_config(path: &FsPath) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| RavrError::io(path, e))?;
    let base = path.parent().unwrap_or(FsPath::new("."));
    ExperimentConfig::parse(&text, base, path)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    algorithm: Option<Algorithm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_high: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_prior: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_ans: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_answer_head: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    updates_per_rollout: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snapshot_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    require_verified: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verify_instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablations: Option<Ablations>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<RawTask>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason_alphabet_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_reason_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer_alphabet_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hardness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    golden_paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inline: Option<TaskFile>,
}

impl RawTask {
    fn has_generator_keys(&self) -> bool {
        self.seed.is_some()
            || self.reason_alphabet_size.is_some()
            || self.max_reason_len.is_some()
            || self.answer_alphabet_size.is_some()
            || self.answer_len.is_some()
            || self.hardness.is_some()
            || self.golden_paths.is_some()
    }

    fn resolve(self, base_dir: &FsPath) -> Result<TaskSource> {
        let generator = self.has_generator_keys();
        match (self.file, self.inline, generator) {
            (Some(_), Some(_), _) => Err(RavrError::Validation("task: give either file or inline, not both".into())),
            (Some(_), None, true) | (None, Some(_), true) => Err(RavrError::Validation(
                "task: generator keys cannot be combined with file or inline".into(),
            )),
            (Some(file), None, false) => Ok(TaskSource::File(base_dir.join(file))),
            (None, Some(inline), false) => Ok(TaskSource::Inline(TaskSpec::try_from(inline)?)),
            (None, None, _) => {
                let d = TaskSizes::default();
                Ok(TaskSource::Generator {
                    seed: self.seed.unwrap_or(0),
                    sizes: TaskSizes {
                        reason_alphabet_size: self.reason_alphabet_size.unwrap_or(d.reason_alphabet_size),
                        max_reason_len: self.max_reason_len.unwrap_or(d.max_reason_len),
                        answer_alphabet_size: self.answer_alphabet_size.unwrap_or(d.answer_alphabet_size),
                        answer_len: self.answer_len.unwrap_or(d.answer_len),
                    },
                    hardness: self.hardness.unwrap_or(DEFAULT_HARDNESS),
                    golden_paths: self.golden_paths.unwrap_or(1),
                })
            }
        }
    }
}

impl RawConfig {
    fn resolve(self, base_dir: &FsPath) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        let t = d.train.clone();
        Ok(ExperimentConfig {
            train: TrainConfig {
                algorithm: self.algorithm.unwrap_or(t.algorithm),
                group_size: self.group_size.unwrap_or(t.group_size),
                lr: self.lr.unwrap_or(t.lr),
                steps: self.steps.unwrap_or(t.steps),
                clip_low: self.clip_low.unwrap_or(t.clip_low),
                clip_high: self.clip_high.unwrap_or(t.clip_high),
                lambda_kl: self.lambda_kl.unwrap_or(t.lambda_kl),
                lambda_prior: self.lambda_prior.unwrap_or(t.lambda_prior),
                lambda_ans: self.lambda_ans.unwrap_or(t.lambda_ans),
                train_answer_head: self.train_answer_head.unwrap_or(t.train_answer_head),
                ablations: self.ablations.unwrap_or(t.ablations),
                updates_per_rollout: self.updates_per_rollout.unwrap_or(t.updates_per_rollout),
                baseline_samples: self.baseline_samples.unwrap_or(t.baseline_samples),
                group_eps: self.group_eps.unwrap_or(t.group_eps),
                seed: self.seed.unwrap_or(t.seed),
            },
            task: match self.task {
                Some(task) => task.resolve(base_dir)?,
                None => d.task,
            },
            n_instances: self.n_instances.unwrap_or(d.n_instances),
            output_dir: base_dir.join(self.output_dir.unwrap_or(d.output_dir)),
            snapshot_every: self.snapshot_every.unwrap_or(d.snapshot_every),
            require_verified: self.require_verified.unwrap_or(d.require_verified),
            verify_instances: self.verify_instances.unwrap_or(d.verify_instances),
        })
    }
}

impl From<&ExperimentConfig> for RawConfig {
    fn from(c: &ExperimentConfig) -> Self {
        let t = &c.train;
        let task = match &c.task {
            TaskSource::Generator {
                seed,
                sizes,
                hardness,
                golden_paths,
            } => RawTask {
                seed: Some(*seed),
                reason_alphabet_size: Some(sizes.reason_alphabet_size),
                max_reason_len: Some(sizes.max_reason_len),
                answer_alphabet_size: Some(sizes.answer_alphabet_size),
                answer_len: Some(sizes.answer_len),
                hardness: Some(*hardness),
                golden_paths: Some(*golden_paths),
                ..RawTask::default()
            },
            TaskSource::File(p) => RawTask {
                file: Some(p.clone()),
                ..RawTask::default()
            },
            TaskSource::Inline(task) => RawTask {
                inline: Some(TaskFile::from(task)),
                ..RawTask::default()
            },
        };
        RawConfig {
            algorithm: Some(t.algorithm),
            group_size: Some(t.group_size),
            lr: Some(t.lr),
            steps: Some(t.steps),
            clip_low: Some(t.clip_low),
            clip_high: Some(t.clip_high),
            lambda_kl: Some(t.lambda_kl),
            lambda_prior: Some(t.lambda_prior),
            lambda_ans: Some(t.lambda_ans),
            train_answer_head: Some(t.train_answer_head),
            updates_per_rollout: Some(t.updates_per_rollout),
            baseline_samples: Some(t.baseline_samples),
            group_eps: Some(t.group_eps),
            seed: Some(t.seed),
            n_instances: Some(c.n_instances),
            output_dir: Some(c.output_dir.clone()),
            snapshot_every: Some(c.snapshot_every),
            require_verified: Some(c.require_verified),
            verify_instances: Some(c.verify_instances),
            ablations: Some(t.ablations),
            task: Some(task),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, FsPath::new("/base"))
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = parse("algorithm = \"ravr\"\n[task]\nseed = 1\n").unwrap();
        assert_eq!(cfg.train.group_size, 8);
        assert_eq!(cfg.train.clip_low, 0.8);
        assert_eq!(cfg.train.clip_high, 1.27);
        assert_eq!(cfg.train.updates_per_rollout, 2);
        assert_eq!(
            cfg.task,
            TaskSource::Generator {
                seed: 1,
                sizes: TaskSizes::default(),
                hardness: 0.01,
                golden_paths: 1
            }
        );
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("algorithm = \"ravr\"\nlearning_rate = 0.1\n").unwrap_err();
        match err {
            RavrError::Parse { message, .. } => assert!(message.contains("learning_rate"), "{message}"),
            other => panic!("{other:?}"),
        }
        assert!(parse("[task]\nsede = 1\n").is_err());
        assert!(parse("[ablations]\nno_kll = true\n").is_err());
    }

    #[test]
    fn parse_error_has_line() {
        let err = parse("algorithm = \"ravr\"\ngroup_size = \"eight\"\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn invariant_violations() {
        assert!(matches!(parse("group_size = 1"), Err(RavrError::Validation(_))));
        assert!(matches!(parse("clip_low = 1.2"), Err(RavrError::Validation(_))));
        assert!(matches!(parse("lr = 0.0"), Err(RavrError::Validation(_))));
        assert!(matches!(parse("n_instances = 0"), Err(RavrError::Validation(_))));
        assert!(parse("[task]\nreason_alphabet_size = 8\nmax_reason_len = 6\nanswer_alphabet_size = 6\nanswer_len = 3").is_err());
        assert!(parse("[task]\nseed = 1\nfile = \"t.toml\"").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = parse("algorithm = \"grpo\"\ngroup_size = 24\nsteps = 7\n[ablations]\nno_kl = true\n[task]\nseed = 4\nhardness = 0.05\n")
            .unwrap();
        let echoed = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&echoed, FsPath::new("/")).unwrap(), cfg);
    }

    #[test]
    fn inline_and_file_sources() {
        let task = new_random_task(2, TaskSizes::default()).unwrap();
        let inline = format!("[task.inline]\n{}", task.to_toml_string());
        let cfg = parse(&inline).unwrap();
        assert_eq!(cfg.task, TaskSource::Inline(task.clone()));
        let cfg = parse("[task]\nfile = \"tasks/a.toml\"").unwrap();
        assert_eq!(cfg.task, TaskSource::File(PathBuf::from("/base/tasks/a.toml")));
    }

    #[test]
    fn generator_instances_differ() {
        let cfg = ExperimentConfig::default();
        let (a, _) = cfg.task.build(0, 0).unwrap();
        let (b, _) = cfg.task.build(1, 0).unwrap();
        assert_ne!(a.task_id(), b.task_id());
        assert_eq!(a.golden_paths().len(), 1);
    }

    #[test]
    fn run_ids() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.run_id(2), "ravr-s0-i2");
        cfg.train.ablations.no_baseline = true;
        cfg.train.seed = 5;
        assert_eq!(cfg.run_id(0), "ravr-no_baseline-s5-i0");
    }
}
