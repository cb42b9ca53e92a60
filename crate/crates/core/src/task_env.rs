//! Synthetic reasoning worlds with enumerable path spaces.
//!
//! A world is a question-free stand-in: a reasoning alphabet, a maximum
//! reasoning length, an answer alphabet with a fixed answer length and the
//! reference answer. Every reasoning path ends in an implicit end-of-think
//! terminator, so paths of different length form one proper distribution.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{RavrError, Result};
use crate::policy::{calibrate_hints, PolicyInitHints};
use crate::seeded_rng;

/// Upper bound on |reason|^L * |answer|^m.
pub const ENUMERABLE_BOUND: u64 = 1_000_000;

pub const REASON_ALPHABET_RANGE: (usize, usize) = (2, 8);
pub const MAX_REASON_LEN_RANGE: (usize, usize) = (1, 6);
pub const ANSWER_ALPHABET_RANGE: (usize, usize) = (2, 6);
pub const ANSWER_LEN_RANGE: (usize, usize) = (1, 3);

/// A reasoning path: the emitted tokens, excluding the terminator.
///
/// The end-of-think token is implicit and always present exactly once, at the
/// end. Ordering is lexicographic with a prefix sorting before its
/// extensions, which is the order of [`enumerate_paths`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Path {
    tokens: Vec<u8>,
}

impl Path {
    pub fn new(tokens: Vec<u8>) -> Self {
        Path { tokens }
    }

    pub fn empty() -> Self {
        Path::default()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    /// Number of reasoning tokens, not counting the terminator.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Dense index of this path among all paths over an alphabet of
    /// `alphabet` tokens: shorter paths first, then base-`alphabet` value.
    pub fn code(&self, alphabet: usize) -> usize {
        let mut offset = 0usize;
        let mut block = 1usize;
        for _ in 0..self.tokens.len() {
            offset += block;
            block *= alphabet;
        }
        let value = self
            .tokens
            .iter()
            .fold(0usize, |acc, &t| acc * alphabet + t as usize);
        offset + value
    }
}

/// Alphabet and length bounds used by the task generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSizes {
    pub reason_alphabet_size: usize,
    pub max_reason_len: usize,
    pub answer_alphabet_size: usize,
    pub answer_len: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        TaskSizes {
            reason_alphabet_size: 4,
            max_reason_len: 3,
            answer_alphabet_size: 2,
            answer_len: 1,
        }
    }
}

impl TaskSizes {
    /// Checks the enumerability bound first, then the per-field ranges.
    pub fn validate(&self) -> Result<()> {
        let bound = checked_space(self.reason_alphabet_size, self.max_reason_len)
            .and_then(|r| {
                checked_space(self.answer_alphabet_size, self.answer_len)
                    .and_then(|a| r.checked_mul(a))
            });
        match bound {
            Some(v) if v <= ENUMERABLE_BOUND => {}
            _ => {
                return Err(RavrError::SizeBound(format!(
                    "{}^{} * {}^{} exceeds {}",
                    self.reason_alphabet_size,
                    self.max_reason_len,
                    self.answer_alphabet_size,
                    self.answer_len,
                    ENUMERABLE_BOUND
                )))
            }
        }
        check_range("reason alphabet size", self.reason_alphabet_size, REASON_ALPHABET_RANGE)?;
        check_range("max reason length", self.max_reason_len, MAX_REASON_LEN_RANGE)?;
        check_range("answer alphabet size", self.answer_alphabet_size, ANSWER_ALPHABET_RANGE)?;
        check_range("answer length", self.answer_len, ANSWER_LEN_RANGE)?;
        Ok(())
    }
}

fn checked_space(base: usize, exp: usize) -> Option<u64> {
    (base as u64).checked_pow(exp.try_into().ok()?)
}

fn check_range(what: &str, value: usize, (lo, hi): (usize, usize)) -> Result<()> {
    if value < lo || value > hi {
        return Err(RavrError::InvalidTask(format!(
            "{what} {value} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// One reasoning world.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    task_id: String,
    reason_alphabet: Vec<String>,
    max_reason_len: usize,
    answer_alphabet: Vec<String>,
    answer_len: usize,
    reference_answer: Vec<u8>,
    golden_paths: Vec<Path>,
    hardness: Option<f64>,
}

impl TaskSpec {
    pub fn new(
        task_id: impl Into<String>,
        reason_alphabet: Vec<String>,
        max_reason_len: usize,
        answer_alphabet: Vec<String>,
        reference_answer: Vec<u8>,
    ) -> Result<Self> {
        let answer_len = reference_answer.len();
        let task = TaskSpec {
            task_id: task_id.into(),
            reason_alphabet,
            max_reason_len,
            answer_alphabet,
            answer_len,
            reference_answer,
            golden_paths: Vec::new(),
            hardness: None,
        };
        task.validate()?;
        Ok(task)
    }

    fn validate(&self) -> Result<()> {
        self.sizes().validate()?;
        if self.task_id.is_empty() {
            return Err(RavrError::InvalidTask("empty task_id".into()));
        }
        for (name, alphabet) in [("reason", &self.reason_alphabet), ("answer", &self.answer_alphabet)] {
            let distinct: BTreeSet<&String> = alphabet.iter().collect();
            if distinct.len() != alphabet.len() || alphabet.iter().any(|t| t.is_empty()) {
                return Err(RavrError::InvalidTask(format!(
                    "{name} alphabet tokens must be distinct and non-empty"
                )));
            }
        }
        if self.reference_answer.len() != self.answer_len
            || self
                .reference_answer
                .iter()
                .any(|&t| t as usize >= self.answer_alphabet.len())
        {
            return Err(RavrError::InvalidTask("reference answer out of alphabet".into()));
        }
        for path in &self.golden_paths {
            self.check_path(path)?;
        }
        let distinct: BTreeSet<&Path> = self.golden_paths.iter().collect();
        if distinct.len() != self.golden_paths.len() {
            return Err(RavrError::InvalidTask("duplicate golden path".into()));
        }
        if let Some(h) = self.hardness {
            if !(h > 0.0 && h <= 1.0) {
                return Err(RavrError::InvalidTask(format!("hardness {h} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn reason_alphabet(&self) -> &[String] {
        &self.reason_alphabet
    }

    pub fn reason_alphabet_size(&self) -> usize {
        self.reason_alphabet.len()
    }

    pub fn max_reason_len(&self) -> usize {
        self.max_reason_len
    }

    pub fn answer_alphabet(&self) -> &[String] {
        &self.answer_alphabet
    }

    pub fn answer_alphabet_size(&self) -> usize {
        self.answer_alphabet.len()
    }

    pub fn answer_len(&self) -> usize {
        self.answer_len
    }

    pub fn reference_answer(&self) -> &[u8] {
        &self.reference_answer
    }

    pub fn golden_paths(&self) -> &[Path] {
        &self.golden_paths
    }

    pub fn hardness(&self) -> Option<f64> {
        self.hardness
    }

    pub fn sizes(&self) -> TaskSizes {
        TaskSizes {
            reason_alphabet_size: self.reason_alphabet.len(),
            max_reason_len: self.max_reason_len,
            answer_alphabet_size: self.answer_alphabet.len(),
            answer_len: self.answer_len,
        }
    }

    /// Number of distinct reasoning paths, sum of |reason|^l for l in 0..=L.
    pub fn path_count(&self) -> usize {
        let s = self.reason_alphabet.len();
        (0..=self.max_reason_len).map(|l| s.pow(l as u32)).sum()
    }

    pub fn is_golden(&self, path: &Path) -> bool {
        self.golden_paths.iter().any(|g| g == path)
    }

    pub fn check_path(&self, path: &Path) -> Result<()> {
        if path.len() > self.max_reason_len {
            return Err(RavrError::InvalidPath(format!(
                "length {} exceeds max_reason_len {}",
                path.len(),
                self.max_reason_len
            )));
        }
        if let Some(&t) = path
            .tokens()
            .iter()
            .find(|&&t| t as usize >= self.reason_alphabet.len())
        {
            return Err(RavrError::InvalidPath(format!("token index {t} out of alphabet")));
        }
        Ok(())
    }

    pub fn check_answer(&self, answer: &[u8]) -> Result<()> {
        if answer.len() != self.answer_len {
            return Err(RavrError::InvalidAnswer(format!(
                "length {} != answer_len {}",
                answer.len(),
                self.answer_len
            )));
        }
        if answer.iter().any(|&t| t as usize >= self.answer_alphabet.len()) {
            return Err(RavrError::InvalidAnswer("token out of alphabet".into()));
        }
        Ok(())
    }

    /// Returns a copy with the given golden paths and target hardness.
    pub fn with_golden_paths(&self, golden: Vec<Path>, hardness: Option<f64>) -> Result<Self> {
        let mut task = self.clone();
        task.golden_paths = golden;
        task.golden_paths.sort();
        task.hardness = hardness;
        task.validate()?;
        Ok(task)
    }

    pub fn render_path(&self, path: &Path) -> String {
        let mut out: Vec<&str> = path
            .tokens()
            .iter()
            .map(|&t| self.reason_alphabet[t as usize].as_str())
            .collect();
        out.push("</think>");
        out.join(" ")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&TaskFile::from(self)).expect("task file serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TaskFile = toml::from_str(text).map_err(|e| RavrError::Parse {
            path: "<task>".into(),
            message: e.to_string(),
        })?;
        TaskSpec::try_from(file)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| RavrError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RavrError::io(path, e))?;
        TaskSpec::from_toml_str(&text).map_err(|e| match e {
            RavrError::Parse { message, .. } => RavrError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }
}

/// On-disk form of a [`TaskSpec`]; tokens are written by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub task_id: String,
    pub reason_alphabet: Vec<String>,
    pub max_reason_len: usize,
    pub answer_alphabet: Vec<String>,
    pub answer_len: usize,
    pub reference_answer: Vec<String>,
    #[serde(default)]
    pub golden_paths: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardness: Option<f64>,
}

impl From<&TaskSpec> for TaskFile {
    fn from(task: &TaskSpec) -> Self {
        TaskFile {
            task_id: task.task_id.clone(),
            reason_alphabet: task.reason_alphabet.clone(),
            max_reason_len: task.max_reason_len,
            answer_alphabet: task.answer_alphabet.clone(),
            answer_len: task.answer_len,
            reference_answer: task
                .reference_answer
                .iter()
                .map(|&t| task.answer_alphabet[t as usize].clone())
                .collect(),
            golden_paths: task
                .golden_paths
                .iter()
                .map(|p| {
                    p.tokens()
                        .iter()
                        .map(|&t| task.reason_alphabet[t as usize].clone())
                        .collect()
                })
                .collect(),
            hardness: task.hardness,
        }
    }
}

impl TryFrom<TaskFile> for TaskSpec {
    type Error = RavrError;

    fn try_from(file: TaskFile) -> Result<Self> {
        let lookup = |alphabet: &[String], name: &str, what: &str| -> Result<u8> {
            alphabet
                .iter()
                .position(|t| t == name)
                .map(|i| i as u8)
                .ok_or_else(|| RavrError::InvalidTask(format!("unknown {what} token '{name}'")))
        };
        let reference_answer = file
            .reference_answer
            .iter()
            .map(|n| lookup(&file.answer_alphabet, n, "answer"))
            .collect::<Result<Vec<_>>>()?;
        let golden_paths = file
            .golden_paths
            .iter()
            .map(|p| {
                p.iter()
                    .map(|n| lookup(&file.reason_alphabet, n, "reason"))
                    .collect::<Result<Vec<_>>>()
                    .map(Path::new)
            })
            .collect::<Result<Vec<_>>>()?;
        if reference_answer.len() != file.answer_len {
            return Err(RavrError::InvalidTask(format!(
                "reference answer has {} tokens, answer_len is {}",
                reference_answer.len(),
                file.answer_len
            )));
        }
        let task = TaskSpec {
            task_id: file.task_id,
            reason_alphabet: file.reason_alphabet,
            max_reason_len: file.max_reason_len,
            answer_alphabet: file.answer_alphabet,
            answer_len: file.answer_len,
            reference_answer,
            golden_paths,
            hardness: file.hardness,
        };
        task.validate()?;
        Ok(task)
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (|reason|={}, L={}, |answer|={}, m={}, golden={})",
            self.task_id,
            self.reason_alphabet.len(),
            self.max_reason_len,
            self.answer_alphabet.len(),
            self.answer_len,
            self.golden_paths.len()
        )
    }
}

/// Default reasoning token names: a, b, c, ...
pub fn reason_token_names(n: usize) -> Vec<String> {
    (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect()
}

/// Default answer token names: A, B, C, ...
pub fn answer_token_names(n: usize) -> Vec<String> {
    (0..n).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
}

/// Builds a world with a uniformly drawn reference answer and no golden paths.
pub fn new_random_task(seed: u64, sizes: TaskSizes) -> Result<TaskSpec> {
    sizes.validate()?;
    let mut rng = seeded_rng(seed);
    let reference: Vec<u8> = (0..sizes.answer_len)
        .map(|_| rng.gen_range(0..sizes.answer_alphabet_size) as u8)
        .collect();
    TaskSpec::new(
        format!("task-{seed}"),
        reason_token_names(sizes.reason_alphabet_size),
        sizes.max_reason_len,
        answer_token_names(sizes.answer_alphabet_size),
        reference,
    )
}

/// All paths in lexicographic order, each exactly once.
pub fn enumerate_paths(task: &TaskSpec) -> Vec<Path> {
    fn walk(prefix: &mut Vec<u8>, alphabet: u8, max_len: usize, out: &mut Vec<Path>) {
        out.push(Path::new(prefix.clone()));
        if prefix.len() == max_len {
            return;
        }
        for t in 0..alphabet {
            prefix.push(t);
            walk(prefix, alphabet, max_len, out);
            prefix.pop();
        }
    }
    let mut out = Vec::with_capacity(task.path_count());
    walk(
        &mut Vec::new(),
        task.reason_alphabet_size() as u8,
        task.max_reason_len(),
        &mut out,
    );
    out
}

/// Picks `k` distinct golden paths and calibrates initialization hints so the
/// initialized prior puts roughly `hardness` mass on them.
pub fn plant_golden_paths(
    task: &TaskSpec,
    k: usize,
    hardness: f64,
    seed: u64,
) -> Result<(TaskSpec, PolicyInitHints)> {
    let total = task.path_count();
    if k == 0 || k > total {
        return Err(RavrError::Infeasible(format!(
            "asked for {k} golden paths out of {total}"
        )));
    }
    if !(hardness > 0.0 && hardness <= 1.0) {
        return Err(RavrError::Infeasible(format!("hardness {hardness} outside (0, 1]")));
    }
    let paths = enumerate_paths(task);
    let mut rng = seeded_rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let golden: Vec<Path> = sample(&mut rng, total, k)
        .into_iter()
        .map(|i| paths[i].clone())
        .collect();
    let planted = task.with_golden_paths(golden, Some(hardness))?;
    let hints = calibrate_hints(&planted, seed)?;
    Ok((planted, hints))
}
