//! Tabular autoregressive policy.
//!
//! One parameter set realizes three conditionals:
//! - the prior over reasoning tokens, keyed by the last `w` reasoning tokens
//!   with the answer slot empty,
//! - the amortized posterior, the same key with the reference answer in the
//!   slot (a separate row of the same table),
//! - the answer head, keyed by the cue flag, the reasoning path and the last
//!   answer tokens emitted so far.
//!
//! Rows are softmaxed after clamping every logit to within
//! `ln(1e12 / n)` of the row maximum, which keeps every probability at or
//! above [`PROB_FLOOR`].

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{RavrError, Result};
use crate::task_env::{enumerate_paths, Path, TaskSpec};
use crate::{seeded_rng, Rng};

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_CONTEXT_WINDOW: usize = 2;
pub const SNAPSHOT_VERSION: u32 = 1;

/// Largest row width: eight reasoning tokens plus the terminator.
pub(crate) const MAX_ROW: usize = 9;

/// What occupies the answer slot of a reasoning context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSlot {
    /// Question only: the prior.
    QuestionOnly,
    /// Question plus reference answer: the amortized posterior.
    Reference,
}

impl AnswerSlot {
    fn index(self) -> usize {
        match self {
            AnswerSlot::QuestionOnly => 0,
            AnswerSlot::Reference => 1,
        }
    }
}

/// Key of one reasoning row. `None` entries in the window are left padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContextKey {
    pub task_id: String,
    pub answer_slot: AnswerSlot,
    pub window: Vec<Option<u8>>,
}

impl ContextKey {
    pub fn for_prefix(task_id: &str, answer_slot: AnswerSlot, prefix: &[u8], window: usize) -> Self {
        let start = prefix.len().saturating_sub(window);
        let tail = &prefix[start..];
        let mut w = vec![None; window - tail.len()];
        w.extend(tail.iter().map(|&t| Some(t)));
        ContextKey {
            task_id: task_id.to_string(),
            answer_slot,
            window: w,
        }
    }
}

/// Width of the answer-prefix window actually used: the prefix never holds
/// more than `answer_len - 1` tokens.
fn answer_window(context_window: usize, answer_len: usize) -> usize {
    context_window.min(answer_len.saturating_sub(1))
}

fn window_code(prefix: &[u8], window: usize, base: usize) -> usize {
    let start = prefix.len().saturating_sub(window);
    let tail = &prefix[start..];
    let pad = window - tail.len();
    let mut code = 0usize;
    for _ in 0..pad {
        code *= base;
    }
    for &t in tail {
        code = code * base + t as usize + 1;
    }
    code
}

fn clamp_gap(n: usize) -> f64 {
    (1.0 / PROB_FLOOR / n as f64).ln()
}

fn argmax(logits: &[f64]) -> (usize, f64) {
    logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) })
}

/// Floored softmax of `logits` into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let n = logits.len();
    let (_, max) = argmax(logits);
    let lo = max - clamp_gap(n);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l.max(lo) - max).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut().take(n) {
        *o /= z;
    }
}

/// Floored softmax as a fresh vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Maps a gradient with respect to the clamped logits back onto the raw
/// logits: clamped entries follow the row maximum.
pub(crate) fn route_through_clamp(logits: &[f64], g_eff: &[f64], g_raw: &mut [f64]) {
    let n = logits.len();
    let (imax, max) = argmax(logits);
    let lo = max - clamp_gap(n);
    for i in 0..n {
        if logits[i] >= lo {
            g_raw[i] += g_eff[i];
        } else {
            g_raw[imax] += g_eff[i];
        }
    }
}

/// Adds `coef * d log p(token) / d logits` into `g_raw`.
pub(crate) fn add_logprob_grad(logits: &[f64], token: usize, coef: f64, g_raw: &mut [f64]) {
    let n = logits.len();
    let mut p = [0.0; MAX_ROW];
    softmax_into(logits, &mut p[..n]);
    let mut g = [0.0; MAX_ROW];
    for j in 0..n {
        g[j] = coef * (if j == token { 1.0 } else { 0.0 } - p[j]);
    }
    route_through_clamp(logits, &g[..n], g_raw);
}

/// Log-probability of `token` under the floored softmax of `logits`.
pub(crate) fn row_logprob(logits: &[f64], token: usize) -> f64 {
    let n = logits.len();
    let mut p = [0.0; MAX_ROW];
    softmax_into(logits, &mut p[..n]);
    p[token].ln()
}

/// A path drawn from one conditioning, scored under both.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub path: Path,
    /// One entry per emitted token plus the terminator; a terminator forced
    /// at the length limit scores 0 under both conditionings.
    pub logp_prior: Vec<f64>,
    pub logp_posterior: Vec<f64>,
    pub total_logp_prior: f64,
    pub total_logp_posterior: f64,
}

impl SampledPath {
    pub fn token_logprobs(&self, slot: AnswerSlot) -> &[f64] {
        match slot {
            AnswerSlot::QuestionOnly => &self.logp_prior,
            AnswerSlot::Reference => &self.logp_posterior,
        }
    }
}

/// How to fill a fresh parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// All logits zero.
    Uniform,
    /// Independent uniform logits in `[-scale, scale]`, seeded.
    Random { scale: f64 },
    /// Planted hard-exploration initialization.
    Hinted(PolicyInitHints),
}

/// Initialization recipe produced by golden-path planting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyInitHints {
    /// Subtracted from every prior logit that a golden path passes through.
    pub golden_penalty: f64,
    /// Half-width of the uniform jitter on prior reasoning logits.
    pub jitter: f64,
    pub jitter_seed: u64,
    /// Sequence probability of the reference answer after a golden path.
    pub golden_answer_prob: f64,
    /// Per-token probability of the reference answer after any other path.
    pub decoy_answer_prob: f64,
    /// Scale applied to cued answer logits to obtain the uncued rows.
    pub uncued_strength: f64,
    /// Start the posterior rows at the projection of the exact Bayes posterior.
    pub posterior_from_bayes: bool,
}

impl PolicyInitHints {
    pub fn new(jitter_seed: u64) -> Self {
        PolicyInitHints {
            golden_penalty: 0.0,
            jitter: 0.5,
            jitter_seed,
            golden_answer_prob: 0.95,
            decoy_answer_prob: 0.02,
            uncued_strength: 0.5,
            posterior_from_bayes: true,
        }
    }
}

/// Tabular logits for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    task_id: String,
    context_window: usize,
    reason_alphabet: usize,
    max_reason_len: usize,
    answer_alphabet: usize,
    answer_len: usize,
    reference_answer: Vec<u8>,
    reason_logits: Vec<f64>,
    answer_logits: Vec<f64>,
}

impl PolicyParams {
    /// Zero logits everywhere (uniform rows).
    pub fn zeros(task: &TaskSpec, context_window: usize) -> Self {
        assert!(context_window >= 1, "context window must be positive");
        let s = task.reason_alphabet_size();
        let a = task.answer_alphabet_size();
        let reason_windows = (s + 1).pow(context_window as u32);
        let aw = answer_window(context_window, task.answer_len());
        let answer_windows = (a + 1).pow(aw as u32);
        PolicyParams {
            task_id: task.task_id().to_string(),
            context_window,
            reason_alphabet: s,
            max_reason_len: task.max_reason_len(),
            answer_alphabet: a,
            answer_len: task.answer_len(),
            reference_answer: task.reference_answer().to_vec(),
            reason_logits: vec![0.0; 2 * reason_windows * (s + 1)],
            answer_logits: vec![0.0; 2 * task.path_count() * answer_windows * a],
        }
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    /// Number of entries in a reasoning row: tokens plus terminator.
    pub fn reason_row_len(&self) -> usize {
        self.reason_alphabet + 1
    }

    /// Index of the terminator within a reasoning row.
    pub fn end_token(&self) -> usize {
        self.reason_alphabet
    }

    pub fn answer_row_len(&self) -> usize {
        self.answer_alphabet
    }

    pub fn reason_logits(&self) -> &[f64] {
        &self.reason_logits
    }

    pub fn answer_logits(&self) -> &[f64] {
        &self.answer_logits
    }

    /// Total number of scalar parameters (reasoning then answer logits).
    pub fn num_coordinates(&self) -> usize {
        self.reason_logits.len() + self.answer_logits.len()
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        let r = self.reason_logits.len();
        if i < r {
            self.reason_logits[i]
        } else {
            self.answer_logits[i - r]
        }
    }

    pub fn set_coordinate(&mut self, i: usize, value: f64) {
        let r = self.reason_logits.len();
        if i < r {
            self.reason_logits[i] = value;
        } else {
            self.answer_logits[i - r] = value;
        }
    }

    /// Offset of the reasoning row used after `prefix` under `slot`.
    pub fn reason_row_offset(&self, slot: AnswerSlot, prefix: &[u8]) -> usize {
        let base = self.reason_alphabet + 1;
        let windows = base.pow(self.context_window as u32);
        let code = window_code(prefix, self.context_window, base);
        (slot.index() * windows + code) * base
    }

    pub fn reason_row(&self, slot: AnswerSlot, prefix: &[u8]) -> &[f64] {
        let off = self.reason_row_offset(slot, prefix);
        &self.reason_logits[off..off + self.reason_alphabet + 1]
    }

    pub fn set_reason_row(&mut self, slot: AnswerSlot, prefix: &[u8], logits: &[f64]) {
        let off = self.reason_row_offset(slot, prefix);
        let n = self.reason_alphabet + 1;
        self.reason_logits[off..off + n].copy_from_slice(logits);
    }

    /// Offset of the answer row used after `path` once `answer_prefix` has
    /// been emitted.
    pub fn answer_row_offset(&self, cue: bool, path: &Path, answer_prefix: &[u8]) -> usize {
        let a = self.answer_alphabet;
        let aw = answer_window(self.context_window, self.answer_len);
        let windows = (a + 1).pow(aw as u32);
        let paths = self.answer_logits.len() / (2 * windows * a);
        let row = ((cue as usize) * paths + path.code(self.reason_alphabet)) * windows
            + window_code(answer_prefix, aw, a + 1);
        row * a
    }

    pub fn answer_row(&self, cue: bool, path: &Path, answer_prefix: &[u8]) -> &[f64] {
        let off = self.answer_row_offset(cue, path, answer_prefix);
        &self.answer_logits[off..off + self.answer_alphabet]
    }

    pub fn set_answer_row(&mut self, cue: bool, path: &Path, answer_prefix: &[u8], logits: &[f64]) {
        let off = self.answer_row_offset(cue, path, answer_prefix);
        let n = self.answer_alphabet;
        self.answer_logits[off..off + n].copy_from_slice(logits);
    }

    fn check_task(&self, task: &TaskSpec) -> Result<()> {
        if task.task_id() != self.task_id
            || task.reason_alphabet_size() != self.reason_alphabet
            || task.max_reason_len() != self.max_reason_len
            || task.answer_alphabet_size() != self.answer_alphabet
            || task.answer_len() != self.answer_len
        {
            return Err(RavrError::UnknownContext(format!(
                "task '{}' does not match parameters for '{}'",
                task.task_id(),
                self.task_id
            )));
        }
        Ok(())
    }

    /// Next-token distribution (tokens then terminator) for a context key.
    pub fn next_token_dist(&self, key: &ContextKey) -> Result<Vec<f64>> {
        if key.task_id != self.task_id {
            return Err(RavrError::UnknownContext(format!("task '{}'", key.task_id)));
        }
        if key.window.len() != self.context_window {
            return Err(RavrError::UnknownContext(format!(
                "window length {} != {}",
                key.window.len(),
                self.context_window
            )));
        }
        // Padding may only appear on the left.
        let first_token = key.window.iter().position(|t| t.is_some()).unwrap_or(key.window.len());
        let tail = &key.window[first_token..];
        if tail.iter().any(|t| t.is_none_or(|t| t as usize >= self.reason_alphabet)) {
            return Err(RavrError::UnknownContext(format!("malformed window {:?}", key.window)));
        }
        let prefix: Vec<u8> = tail.iter().map(|t| t.unwrap()).collect();
        Ok(softmax(self.reason_row(key.answer_slot, &prefix)))
    }

    /// Per-step log-probabilities of `path` under `slot`, terminator included.
    /// A terminator forced at the length limit contributes 0.
    pub fn path_token_logprobs(&self, slot: AnswerSlot, path: &Path) -> Vec<f64> {
        let tokens = path.tokens();
        let mut out = Vec::with_capacity(tokens.len() + 1);
        for (t, &tok) in tokens.iter().enumerate() {
            out.push(row_logprob(self.reason_row(slot, &tokens[..t]), tok as usize));
        }
        if tokens.len() < self.max_reason_len {
            out.push(row_logprob(self.reason_row(slot, tokens), self.end_token()));
        } else {
            out.push(0.0);
        }
        out
    }

    pub fn path_logprob(&self, task: &TaskSpec, slot: AnswerSlot, path: &Path) -> Result<f64> {
        self.check_task(task)?;
        task.check_path(path)?;
        Ok(self.path_token_logprobs(slot, path).iter().sum())
    }

    /// Per-token log-probabilities of `answer` after `path`.
    pub fn answer_token_logprobs(&self, cue: bool, path: &Path, answer: &[u8]) -> Vec<f64> {
        (0..answer.len())
            .map(|j| row_logprob(self.answer_row(cue, path, &answer[..j]), answer[j] as usize))
            .collect()
    }

    pub fn answer_logprob(&self, task: &TaskSpec, cue: bool, path: &Path, answer: &[u8]) -> Result<f64> {
        self.check_task(task)?;
        task.check_path(path)?;
        task.check_answer(answer)?;
        Ok(self.answer_token_logprobs(cue, path, answer).iter().sum())
    }

    /// Ancestral sampling under `slot`; both conditionings are scored on the
    /// realized path.
    pub fn sample_path(&self, task: &TaskSpec, slot: AnswerSlot, rng: &mut Rng) -> SampledPath {
        debug_assert!(self.check_task(task).is_ok());
        let n = self.reason_alphabet + 1;
        let end = self.end_token();
        let mut tokens: Vec<u8> = Vec::with_capacity(self.max_reason_len);
        let mut lp_prior = Vec::with_capacity(self.max_reason_len + 1);
        let mut lp_post = Vec::with_capacity(self.max_reason_len + 1);
        let mut probs = [0.0; MAX_ROW];
        loop {
            if tokens.len() == self.max_reason_len {
                lp_prior.push(0.0);
                lp_post.push(0.0);
                break;
            }
            softmax_into(self.reason_row(slot, &tokens), &mut probs[..n]);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut choice = n - 1;
            for (i, &p) in probs[..n].iter().enumerate() {
                acc += p;
                if u < acc {
                    choice = i;
                    break;
                }
            }
            lp_prior.push(row_logprob(self.reason_row(AnswerSlot::QuestionOnly, &tokens), choice));
            lp_post.push(row_logprob(self.reason_row(AnswerSlot::Reference, &tokens), choice));
            if choice == end {
                break;
            }
            tokens.push(choice as u8);
        }
        SampledPath {
            path: Path::new(tokens),
            total_logp_prior: lp_prior.iter().sum(),
            total_logp_posterior: lp_post.iter().sum(),
            logp_prior: lp_prior,
            logp_posterior: lp_post,
        }
    }

    /// Adds `lr * grad` to every logit.
    pub fn apply_update(&mut self, reason: &[f64], answer: &[f64], lr: f64) {
        assert_eq!(reason.len(), self.reason_logits.len());
        assert_eq!(answer.len(), self.answer_logits.len());
        for (p, g) in self.reason_logits.iter_mut().zip(reason) {
            *p += lr * g;
        }
        for (p, g) in self.answer_logits.iter_mut().zip(answer) {
            *p += lr * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reason_logits.iter().chain(&self.answer_logits).all(|v| v.is_finite())
    }

    /// Versioned text snapshot; logits are stored as raw IEEE-754 bits.
    pub fn to_snapshot_string(&self) -> String {
        let header = SnapshotHeader {
            format_version: SNAPSHOT_VERSION,
            task_id: self.task_id.clone(),
            context_window: self.context_window,
            reason_alphabet: self.reason_alphabet,
            max_reason_len: self.max_reason_len,
            answer_alphabet: self.answer_alphabet,
            answer_len: self.answer_len,
            reference_answer: self.reference_answer.clone(),
        };
        let mut out = String::new();
        writeln!(out, "ravr-snapshot").unwrap();
        writeln!(out, "{}", serde_json::to_string(&header).unwrap()).unwrap();
        for (name, values, width) in [
            ("reason", &self.reason_logits, self.reason_alphabet + 1),
            ("answer", &self.answer_logits, self.answer_alphabet),
        ] {
            writeln!(out, "{name} {}", values.len()).unwrap();
            for row in values.chunks(width) {
                let line: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                writeln!(out, "{}", line.join(" ")).unwrap();
            }
        }
        out
    }

    pub fn from_snapshot_str(text: &str) -> Result<Self> {
        let bad = |m: &str| RavrError::Snapshot(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("ravr-snapshot") {
            return Err(bad("missing magic line"));
        }
        let header: SnapshotHeader = serde_json::from_str(lines.next().ok_or_else(|| bad("missing header"))?)
            .map_err(|e| RavrError::Snapshot(format!("header: {e}")))?;
        if header.format_version != SNAPSHOT_VERSION {
            return Err(RavrError::Snapshot(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut read_block = |name: &str| -> Result<Vec<f64>> {
            let head = lines.next().ok_or_else(|| bad("truncated"))?;
            let count: usize = head
                .strip_prefix(name)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| RavrError::Snapshot(format!("expected '{name} <count>'")))?;
            let mut values = Vec::with_capacity(count);
            while values.len() < count {
                let line = lines.next().ok_or_else(|| bad("truncated block"))?;
                for word in line.split_whitespace() {
                    let bits = u64::from_str_radix(word, 16).map_err(|_| bad("bad hex word"))?;
                    values.push(f64::from_bits(bits));
                }
            }
            if values.len() != count {
                return Err(bad("block length mismatch"));
            }
            Ok(values)
        };
        let reason_logits = read_block("reason")?;
        let answer_logits = read_block("answer")?;
        let params = PolicyParams {
            task_id: header.task_id,
            context_window: header.context_window,
            reason_alphabet: header.reason_alphabet,
            max_reason_len: header.max_reason_len,
            answer_alphabet: header.answer_alphabet,
            answer_len: header.answer_len,
            reference_answer: header.reference_answer,
            reason_logits,
            answer_logits,
        };
        let s = params.reason_alphabet;
        if params.context_window == 0
            || params.reason_alphabet < 2
            || params.reason_alphabet + 1 > MAX_ROW
            || params.reason_logits.len() != 2 * (s + 1).pow(params.context_window as u32) * (s + 1)
        {
            return Err(bad("reason table shape does not match header"));
        }
        let a = params.answer_alphabet;
        let aw = answer_window(params.context_window, params.answer_len);
        let paths: usize = (0..=params.max_reason_len).map(|l| s.pow(l as u32)).sum();
        if params.answer_logits.len() != 2 * paths * (a + 1).pow(aw as u32) * a {
            return Err(bad("answer table shape does not match header"));
        }
        Ok(params)
    }

    pub fn save_snapshot(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot_string()).map_err(|e| RavrError::io(path, e))
    }

    pub fn load_snapshot(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RavrError::io(path, e))?;
        PolicyParams::from_snapshot_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    format_version: u32,
    task_id: String,
    context_window: usize,
    reason_alphabet: usize,
    max_reason_len: usize,
    answer_alphabet: usize,
    answer_len: usize,
    reference_answer: Vec<u8>,
}

/// Builds parameters with the default context window.
pub fn init_params(task: &TaskSpec, scheme: &InitScheme, seed: u64) -> PolicyParams {
    init_params_windowed(task, scheme, DEFAULT_CONTEXT_WINDOW, seed)
}

pub fn init_params_windowed(task: &TaskSpec, scheme: &InitScheme, context_window: usize, seed: u64) -> PolicyParams {
    let mut params = PolicyParams::zeros(task, context_window);
    match scheme {
        InitScheme::Uniform => {}
        InitScheme::Random { scale } => {
            let mut rng = seeded_rng(seed);
            for v in params.reason_logits.iter_mut().chain(params.answer_logits.iter_mut()) {
                *v = rng.gen_range(-1.0..1.0) * scale;
            }
        }
        InitScheme::Hinted(hints) => init_hinted(&mut params, task, hints),
    }
    params
}

/// Prior reasoning rows of a hinted initialization (slot 0 only).
fn hinted_prior_rows(params: &mut PolicyParams, task: &TaskSpec, hints: &PolicyInitHints) {
    let mut rng = seeded_rng(hints.jitter_seed);
    let n = params.reason_row_len();
    let windows = params.reason_logits.len() / (2 * n);
    for v in params.reason_logits[..windows * n].iter_mut() {
        *v = rng.gen_range(-1.0..1.0) * hints.jitter;
    }
    for (off, tok) in golden_transitions(params, task) {
        params.reason_logits[off + tok] -= hints.golden_penalty;
    }
}

/// Distinct (prior row offset, token) pairs visited by golden paths.
fn golden_transitions(params: &PolicyParams, task: &TaskSpec) -> Vec<(usize, usize)> {
    let mut marks = Vec::new();
    for g in task.golden_paths() {
        let t = g.tokens();
        for i in 0..t.len() {
            marks.push((params.reason_row_offset(AnswerSlot::QuestionOnly, &t[..i]), t[i] as usize));
        }
        if t.len() < task.max_reason_len() {
            marks.push((params.reason_row_offset(AnswerSlot::QuestionOnly, t), params.end_token()));
        }
    }
    marks.sort_unstable();
    marks.dedup();
    marks
}

fn golden_prior_mass(params: &PolicyParams, task: &TaskSpec) -> f64 {
    task.golden_paths()
        .iter()
        .map(|g| {
            params
                .path_token_logprobs(AnswerSlot::QuestionOnly, g)
                .iter()
                .sum::<f64>()
                .exp()
        })
        .sum()
}

/// Logits giving probability `p` to `target` and spreading the rest evenly.
fn biased_row(n: usize, target: usize, p: f64) -> Vec<f64> {
    let rest = (1.0 - p) / (n - 1) as f64;
    let mut row = vec![0.0; n];
    row[target] = p.ln() - rest.ln();
    row
}

fn init_hinted(params: &mut PolicyParams, task: &TaskSpec, hints: &PolicyInitHints) {
    hinted_prior_rows(params, task, hints);

    let m = task.answer_len();
    let a = task.answer_alphabet_size();
    let golden_tok = hints.golden_answer_prob.powf(1.0 / m as f64);
    let decoy_tok = hints.decoy_answer_prob.min(1.0 / a as f64);
    let reference = task.reference_answer().to_vec();
    let paths = enumerate_paths(task);
    for path in &paths {
        let p = if task.is_golden(path) { golden_tok } else { decoy_tok };
        for j in 0..m {
            let cued = biased_row(a, reference[j] as usize, p);
            let uncued: Vec<f64> = cued.iter().map(|v| v * hints.uncued_strength).collect();
            params.set_answer_row(true, path, &reference[..j], &cued);
            params.set_answer_row(false, path, &reference[..j], &uncued);
        }
    }

    let n = params.reason_row_len();
    let windows = params.reason_logits.len() / (2 * n);
    let (prior_half, post_half) = params.reason_logits.split_at_mut(windows * n);
    post_half.copy_from_slice(prior_half);
    if hints.posterior_from_bayes {
        project_bayes_posterior(params, task, &paths);
    }
}

/// Sets the posterior rows to the tabular projection of the exact Bayes
/// posterior `s(z) prior(z) / mu` (cued utility). When the context window
/// covers every prefix the projection is exact.
fn project_bayes_posterior(params: &mut PolicyParams, task: &TaskSpec, paths: &[Path]) {
    let reference = task.reference_answer();
    let joint: Vec<f64> = paths
        .iter()
        .map(|z| {
            let lp: f64 = params.path_token_logprobs(AnswerSlot::QuestionOnly, z).iter().sum();
            let ls: f64 = params.answer_token_logprobs(true, z, reference).iter().sum();
            (lp + ls).exp()
        })
        .collect();
    let mu: f64 = joint.iter().sum();
    let n = params.reason_row_len();
    let mut counts = vec![0.0; params.reason_logits.len()];
    for (z, &j) in paths.iter().zip(&joint) {
        let q = j / mu;
        let t = z.tokens();
        for i in 0..t.len() {
            counts[params.reason_row_offset(AnswerSlot::Reference, &t[..i]) + t[i] as usize] += q;
        }
        if t.len() < task.max_reason_len() {
            counts[params.reason_row_offset(AnswerSlot::Reference, t) + params.end_token()] += q;
        }
    }
    for (row_counts, row_logits) in counts.chunks(n).zip(params.reason_logits.chunks_mut(n)) {
        let total: f64 = row_counts.iter().sum();
        if total > 0.0 {
            for (l, &c) in row_logits.iter_mut().zip(row_counts) {
                *l = (c / total).max(1e-300).ln();
            }
        }
    }
}

/// Solves for the golden-path penalty that puts `hardness` prior mass on the
/// golden paths of `task`.
pub fn calibrate_hints(task: &TaskSpec, seed: u64) -> Result<PolicyInitHints> {
    let hardness = task
        .hardness()
        .ok_or_else(|| RavrError::Infeasible("task has no hardness target".into()))?;
    if task.golden_paths().is_empty() {
        return Err(RavrError::Infeasible("task has no golden paths".into()));
    }
    const BRACKET: f64 = 30.0;
    let mut hints = PolicyInitHints::new(seed);
    let mut params = PolicyParams::zeros(task, DEFAULT_CONTEXT_WINDOW);
    let mut mass_at = |penalty: f64| {
        hints.golden_penalty = penalty;
        hinted_prior_rows(&mut params, task, &hints);
        golden_prior_mass(&params, task)
    };
    let high = mass_at(-BRACKET);
    let low = mass_at(BRACKET);
    let within = |m: f64| (m - hardness).abs() <= 0.2 * hardness;
    let penalty = if hardness >= high {
        if !within(high) {
            return Err(RavrError::Infeasible(format!(
                "golden mass cannot exceed {high:.4}, target {hardness}"
            )));
        }
        -BRACKET
    } else if hardness <= low {
        if !within(low) {
            return Err(RavrError::Infeasible(format!(
                "golden mass cannot fall below {low:.4}, target {hardness}"
            )));
        }
        BRACKET
    } else {
        let (mut lo, mut hi) = (-BRACKET, BRACKET);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass_at(mid) > hardness {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    hints.golden_penalty = penalty;
    Ok(hints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_env::{new_random_task, plant_golden_paths, TaskSizes};

    fn task(s: usize, l: usize, a: usize, m: usize) -> TaskSpec {
        new_random_task(
            5,
            TaskSizes {
                reason_alphabet_size: s,
                max_reason_len: l,
                answer_alphabet_size: a,
                answer_len: m,
            },
        )
        .unwrap()
    }

    #[test]
    fn uniform_rows() {
        let t = task(2, 2, 2, 1);
        let p = init_params(&t, &InitScheme::Uniform, 0);
        let key = ContextKey::for_prefix(t.task_id(), AnswerSlot::QuestionOnly, &[], 2);
        let d = p.next_token_dist(&key).unwrap();
        assert_eq!(d.len(), 3);
        for v in d {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let lp = p.path_logprob(&t, AnswerSlot::QuestionOnly, &Path::empty()).unwrap();
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_by_hand() {
        let d = softmax(&[0.0, 0.0, 2f64.ln()]);
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] - 0.25).abs() < 1e-15);
        assert!((d[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn floor_holds_for_extreme_logits() {
        let d = softmax(&[500.0, -500.0, 0.0, -1e9]);
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&p| p >= PROB_FLOOR));
    }

    #[test]
    fn unknown_context() {
        let t = task(2, 2, 2, 1);
        let p = init_params(&t, &InitScheme::Uniform, 0);
        let key = ContextKey::for_prefix("other", AnswerSlot::QuestionOnly, &[], 2);
        assert!(matches!(p.next_token_dist(&key), Err(RavrError::UnknownContext(_))));
        let key = ContextKey {
            task_id: t.task_id().into(),
            answer_slot: AnswerSlot::Reference,
            window: vec![Some(0), None],
        };
        assert!(matches!(p.next_token_dist(&key), Err(RavrError::UnknownContext(_))));
    }

    #[test]
    fn answer_logprob_uniform() {
        let t = task(2, 2, 2, 1);
        let p = init_params(&t, &InitScheme::Uniform, 0);
        let lp = p.answer_logprob(&t, true, &Path::new(vec![1]), &[0]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        let t2 = task(2, 2, 2, 2);
        let p2 = init_params(&t2, &InitScheme::Uniform, 0);
        let lp = p2.answer_logprob(&t2, false, &Path::empty(), &[1, 0]).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        assert!(matches!(
            p2.answer_logprob(&t2, true, &Path::empty(), &[1]),
            Err(RavrError::InvalidAnswer(_))
        ));
    }

    #[test]
    fn invalid_path_rejected() {
        let t = task(2, 2, 2, 1);
        let p = init_params(&t, &InitScheme::Uniform, 0);
        assert!(matches!(
            p.path_logprob(&t, AnswerSlot::QuestionOnly, &Path::new(vec![0, 0, 0])),
            Err(RavrError::InvalidPath(_))
        ));
        assert!(matches!(
            p.path_logprob(&t, AnswerSlot::QuestionOnly, &Path::new(vec![2])),
            Err(RavrError::InvalidPath(_))
        ));
    }

    #[test]
    fn deterministic_terminator_gives_empty_path() {
        let t = task(3, 3, 2, 1);
        let mut p = init_params(&t, &InitScheme::Uniform, 0);
        p.set_reason_row(AnswerSlot::QuestionOnly, &[], &[-1e6, -1e6, -1e6, 0.0]);
        let mut rng = seeded_rng(1);
        for _ in 0..20 {
            let s = p.sample_path(&t, AnswerSlot::QuestionOnly, &mut rng);
            assert!(s.path.is_empty());
            assert!(s.total_logp_prior.abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_totals_match_tokens_and_scoring() {
        let t = task(3, 3, 2, 2);
        let p = init_params(&t, &InitScheme::Random { scale: 2.0 }, 9);
        let mut rng = seeded_rng(2);
        for _ in 0..200 {
            let s = p.sample_path(&t, AnswerSlot::Reference, &mut rng);
            assert!(s.path.len() <= 3);
            assert_eq!(s.logp_prior.len(), s.path.len() + 1);
            assert!((s.total_logp_prior - s.logp_prior.iter().sum::<f64>()).abs() < 1e-12);
            let lp = p.path_logprob(&t, AnswerSlot::QuestionOnly, &s.path).unwrap();
            assert!((lp - s.total_logp_prior).abs() < 1e-12);
            let lq = p.path_logprob(&t, AnswerSlot::Reference, &s.path).unwrap();
            assert!((lq - s.total_logp_posterior).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_and_posterior_differ_only_when_rows_differ() {
        let t = task(2, 2, 2, 1);
        let mut p = init_params(&t, &InitScheme::Uniform, 0);
        let z = Path::new(vec![1, 0]);
        let a = p.path_logprob(&t, AnswerSlot::QuestionOnly, &z).unwrap();
        let b = p.path_logprob(&t, AnswerSlot::Reference, &z).unwrap();
        assert_eq!(a, b);
        p.set_reason_row(AnswerSlot::Reference, &[1], &[1.0, 0.0, 0.0]);
        let b = p.path_logprob(&t, AnswerSlot::Reference, &z).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn same_seed_same_tables() {
        let t = task(3, 2, 3, 2);
        let s = InitScheme::Random { scale: 1.0 };
        assert_eq!(init_params(&t, &s, 4), init_params(&t, &s, 4));
        assert_ne!(init_params(&t, &s, 4), init_params(&t, &s, 5));
    }

    #[test]
    fn snapshot_round_trip_bit_exact() {
        let t = task(3, 3, 3, 2);
        let p = init_params(&t, &InitScheme::Random { scale: 3.0 }, 17);
        let text = p.to_snapshot_string();
        let back = PolicyParams::from_snapshot_str(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_snapshot_string(), text);
        let broken = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        assert!(PolicyParams::from_snapshot_str(&broken).is_err());
    }

    #[test]
    fn hinted_init_meets_planting_contract() {
        let t = task(3, 2, 2, 1);
        let (planted, hints) = plant_golden_paths(&t, 1, 0.01, 3).unwrap();
        let p = init_params(&planted, &InitScheme::Hinted(hints), 0);
        let mass = golden_prior_mass(&p, &planted);
        assert!((0.008..=0.012).contains(&mass), "mass {mass}");
        let y = planted.reference_answer();
        for z in enumerate_paths(&planted) {
            let s = p.answer_logprob(&planted, true, &z, y).unwrap().exp();
            if planted.is_golden(&z) {
                assert!(s >= 0.8);
            } else {
                assert!(s <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn all_golden_degenerates() {
        let t = task(3, 2, 2, 1);
        let (planted, hints) = plant_golden_paths(&t, t.path_count(), 1.0, 3).unwrap();
        let p = init_params(&planted, &InitScheme::Hinted(hints), 0);
        assert!((golden_prior_mass(&p, &planted) - 1.0).abs() < 1e-9);
        let y = planted.reference_answer();
        let first = p.answer_logprob(&planted, true, &Path::empty(), y).unwrap();
        for z in enumerate_paths(&planted) {
            assert_eq!(p.answer_logprob(&planted, true, &z, y).unwrap(), first);
        }
    }
}
