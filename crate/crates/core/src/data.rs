//! Synthetic prompt/answer tasks with exactly checkable answers.
//!
//! Rows are encoded as `prompt ⊕ SEP ⊕ answer ⊕ pad`. Labels carry the answer
//! token at its own position and [`IGNORE_INDEX`] elsewhere; the loss compares
//! the logits at position `t` with the label at `t + 1`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::IGNORE_INDEX;
use crate::echo::{build_answer_mask, find_boundary};
use crate::error::{Error, Result};
use crate::rng::{derive, stream, Stream};

pub fn sep_token(vocab_size: usize) -> usize {
    vocab_size - 1
}

pub fn pad_token(vocab_size: usize) -> usize {
    vocab_size - 2
}

/// First token of every generated prompt; tells the model which task to solve.
pub fn task_token(task: Task, vocab_size: usize) -> usize {
    vocab_size - 3 - task as usize
}

/// Number of ids available for operands: everything below the task markers.
pub fn content_tokens(vocab_size: usize) -> usize {
    vocab_size.saturating_sub(2 + Task::ALL.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    SortedSelection,
    ModularSum,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Copy, Task::Reverse, Task::SortedSelection, Task::ModularSum];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::SortedSelection => "sorted-selection",
            Task::ModularSum => "modular-sum",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tasks: Vec<Task>,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    /// Operand count for the sequence tasks; modular-sum prompts always have two operands.
    pub prompt_len: usize,
    pub modulus: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { tasks: Task::ALL.to_vec(), train_per_task: 768, eval_per_task: 100, prompt_len: 3, modulus: 10 }
    }
}

/// A generated prompt is the task marker followed by the operands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub task: Task,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Sample {
    /// The prompt without its task marker.
    pub fn operands(&self) -> &[usize] {
        self.prompt.get(1..).unwrap_or(&[])
    }
}

/// The answer a task assigns to its operands.
pub fn solve(task: Task, prompt: &[usize], modulus: usize) -> Vec<usize> {
    match task {
        Task::Copy => prompt.to_vec(),
        Task::Reverse => prompt.iter().rev().copied().collect(),
        Task::SortedSelection => {
            let mut s = prompt.to_vec();
            s.sort_unstable();
            s
        }
        Task::ModularSum => vec![prompt.iter().sum::<usize>() % modulus],
    }
}

fn check_task(task: Task, config: &DataConfig, vocab_size: usize) -> Result<()> {
    let content = content_tokens(vocab_size);
    if content < 2 {
        return Err(Error::Config(format!("vocabulary of {vocab_size} leaves no content tokens")));
    }
    match task {
        Task::ModularSum if config.modulus < 2 || config.modulus > content => {
            Err(Error::Config(format!("modulus {} needs 2..={content} content tokens", config.modulus)))
        }
        Task::ModularSum => Ok(()),
        _ if config.prompt_len == 0 => Err(Error::Config("prompt_len must be at least 1".into())),
        _ => Ok(()),
    }
}

/// `n` deterministic samples of one task.
pub fn gen_dataset(task: Task, n: usize, config: &DataConfig, vocab_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    check_task(task, config, vocab_size)?;
    let mut rng = stream(derive(seed, &[task as u64]), Stream::Data);
    let content = content_tokens(vocab_size);
    let samples = (0..n)
        .map(|_| {
            let operands: Vec<usize> = match task {
                Task::ModularSum => (0..2).map(|_| rng.random_range(0..config.modulus)).collect(),
                _ => (0..config.prompt_len).map(|_| rng.random_range(0..content)).collect(),
            };
            let answer = solve(task, &operands, config.modulus);
            let mut prompt = vec![task_token(task, vocab_size)];
            prompt.extend(operands);
            Sample { task, prompt, answer }
        })
        .collect();
    Ok(samples)
}

/// `per_task` samples of every task, interleaved task by task.
pub fn gen_mixture(
    tasks: &[Task],
    per_task: usize,
    config: &DataConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if tasks.is_empty() {
        return Err(Error::Config("task list must not be empty".into()));
    }
    let sets = tasks.iter().map(|&t| gen_dataset(t, per_task, config, vocab_size, seed)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(per_task * tasks.len());
    for i in 0..per_task {
        for set in &sets {
            out.push(set[i].clone());
        }
    }
    Ok(out)
}

/// One encoded row, unpadded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedRow {
    pub tokens: Vec<usize>,
    pub labels: Vec<i64>,
    pub t_star: usize,
    pub mask: Vec<bool>,
}

impl EncodedRow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Labels aligned with logits: entry `t` is the label of position `t + 1`.
    pub fn shifted_labels(&self) -> Vec<i64> {
        let mut out: Vec<i64> = self.labels[1..].to_vec();
        out.push(IGNORE_INDEX);
        out
    }
}

pub fn encode(sample: &Sample, vocab_size: usize, max_seq_len: usize) -> Result<EncodedRow> {
    if sample.prompt.is_empty() || sample.answer.is_empty() {
        return Err(Error::Data("prompt and answer must be non-empty".into()));
    }
    let len = sample.prompt.len() + 1 + sample.answer.len();
    if len > max_seq_len {
        return Err(Error::Data(format!("encoded length {len} exceeds max_seq_len {max_seq_len}")));
    }
    if let Some(&bad) = sample.prompt.iter().chain(&sample.answer).find(|&&t| t >= vocab_size - 2) {
        return Err(Error::Data(format!("token {bad} collides with the reserved ids")));
    }
    let mut tokens = sample.prompt.clone();
    tokens.push(sep_token(vocab_size));
    tokens.extend_from_slice(&sample.answer);
    let labels: Vec<i64> =
        (0..len).map(|i| if i > sample.prompt.len() { tokens[i] as i64 } else { IGNORE_INDEX }).collect();
    let t_star = find_boundary(&labels)?;
    let mask = build_answer_mask(&labels);
    Ok(EncodedRow { tokens, labels, t_star, mask })
}

/// Inverse of [`encode`]; `task` is not stored in the row.
pub fn decode(row: &EncodedRow, task: Task, vocab_size: usize) -> Result<Sample> {
    let sep = row
        .tokens
        .iter()
        .position(|&t| t == sep_token(vocab_size))
        .ok_or_else(|| Error::Data("row has no separator".into()))?;
    let answer = row.tokens[sep + 1..]
        .iter()
        .zip(&row.labels[sep + 1..])
        .filter(|(_, &y)| y != IGNORE_INDEX)
        .map(|(&t, _)| t)
        .collect();
    Ok(Sample { task, prompt: row.tokens[..sep].to_vec(), answer })
}

/// Right-padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<EncodedRow>,
    pub width: usize,
    pub pad: usize,
}

impl Batch {
    pub fn new(samples: &[&Sample], vocab_size: usize, max_seq_len: usize) -> Result<Self> {
        let rows = samples.iter().map(|s| encode(s, vocab_size, max_seq_len)).collect::<Result<Vec<_>>>()?;
        let width = rows.iter().map(EncodedRow::len).max().unwrap_or(0);
        Ok(Batch { rows, width, pad: pad_token(vocab_size) })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[B × width]` token ids with padding.
    pub fn padded_tokens(&self) -> Vec<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| {
                let mut t = r.tokens.clone();
                t.resize(self.width, self.pad);
                t
            })
            .collect()
    }

    /// `[B × width]` labels with padding ignored.
    pub fn padded_labels(&self) -> Vec<Vec<i64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut l = r.labels.clone();
                l.resize(self.width, IGNORE_INDEX);
                l
            })
            .collect()
    }

    /// Number of supervised next-token targets across the batch.
    pub fn supervised_count(&self) -> usize {
        self.rows.iter().map(|r| r.mask.iter().filter(|&&m| m).count()).sum()
    }
}

/// Splits `samples` into batches in an epoch-specific shuffled order.
pub fn epoch_batches(samples: &[Sample], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<&Sample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = stream(derive(seed, &[epoch as u64]), Stream::Shuffle);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.iter().map(|&i| &samples[i]).collect()).collect()
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples.div_ceil(batch_size.max(1))
}

/// Anything that yields next-token logits `[T × V]` (row-major) for a token prefix.
pub trait NextTokenPredictor {
    fn vocab_size(&self) -> usize;
    fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>>;
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Greedily generates `n` tokens after `prompt ⊕ SEP`.
pub fn greedy_decode(model: &impl NextTokenPredictor, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    let v = model.vocab_size();
    let mut seq = prompt.to_vec();
    seq.push(sep_token(v));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = model.logits(&seq)?;
        let last = &logits[(seq.len() - 1) * v..seq.len() * v];
        let next = argmax(last);
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Whether greedy decoding reproduces `sample.answer`.
///
/// Uses a single forward over the full reference sequence: greedy decoding
/// matches exactly when the argmax at every answer step equals the reference
/// token under the reference prefix, which is what causal logits give.
pub fn exact_match(model: &impl NextTokenPredictor, sample: &Sample) -> Result<bool> {
    let v = model.vocab_size();
    let mut seq = sample.prompt.clone();
    seq.push(sep_token(v));
    seq.extend_from_slice(&sample.answer);
    let logits = model.logits(&seq[..seq.len() - 1])?;
    let start = sample.prompt.len();
    Ok(sample.answer.iter().enumerate().all(|(i, &tok)| argmax(&logits[(start + i) * v..(start + i + 1) * v]) == tok))
}

/// Exact-match fraction over `samples`, in `[0, 1]`.
pub fn eval_accuracy(model: &impl NextTokenPredictor, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if exact_match(model, s)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Accuracy per task, in first-appearance order.
pub fn eval_by_task(model: &impl NextTokenPredictor, samples: &[Sample]) -> Result<Vec<(Task, f64)>> {
    let mut tasks: Vec<Task> = Vec::new();
    for s in samples {
        if !tasks.contains(&s.task) {
            tasks.push(s.task);
        }
    }
    tasks
        .into_iter()
        .map(|t| {
            let subset: Vec<Sample> = samples.iter().filter(|s| s.task == t).cloned().collect();
            Ok((t, eval_accuracy(model, &subset)?))
        })
        .collect()
}

/// Writes one JSON record per line.
pub fn dump_jsonl(samples: &[Sample], mut out: impl Write) -> Result<()> {
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(())
}

pub fn load_jsonl(input: impl BufRead) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
