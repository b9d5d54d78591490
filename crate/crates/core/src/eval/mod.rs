//! Task scoring and latency measurement.

pub mod latency;
pub mod results;
pub mod tasks;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_tokens, generate_ar_batch, generate_diffusion_batch, Mode, ModelCheckpoint, MASK};
pub use results::{EvalResult, Latency, Method};
pub use tasks::Task;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuite {
    pub tasks: Vec<Task>,
    pub n_eval_prompts: usize,
    pub seed: u64,
    /// Denoising steps per completion for diffusion checkpoints.
    pub diffusion_steps: usize,
}

impl Default for TaskSuite {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            n_eval_prompts: 128,
            seed: 1_000_003,
            diffusion_steps: 16,
        }
    }
}

impl TaskSuite {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.n_eval_prompts == 0 {
            return Err(Error::Contract("task suite is empty".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Parameter("diffusion_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn generative(&self) -> Vec<Task> {
        let g: Vec<Task> = self.tasks.iter().copied().filter(|t| t.is_generative()).collect();
        if g.is_empty() {
            Task::GENERATIVE.to_vec()
        } else {
            g
        }
    }
}

/// Score per task, each in `[0, 1]`.
pub type TaskScores = BTreeMap<Task, f64>;

/// Mean exact-match score over the generative tasks present.
pub fn aggregate_score(scores: &TaskScores) -> f64 {
    let exact: Vec<f64> = scores
        .iter()
        .filter(|(t, _)| t.is_generative())
        .map(|(_, &s)| s)
        .collect();
    if exact.is_empty() {
        return 0.0;
    }
    exact.iter().sum::<f64>() / exact.len() as f64
}

/// Completions the checkpoint produces for equal-length prompts.
pub fn complete(ck: &ModelCheckpoint, prompts: &[Vec<u32>], suite: &TaskSuite) -> Result<Vec<Vec<u32>>> {
    let n = tasks::COMPLETION_LEN;
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(EVAL_CHUNK) {
        let seqs = match ck.config.mode {
            Mode::Ar => generate_ar_batch(ck, chunk, n)?,
            Mode::Diffusion => generate_diffusion_batch(ck, chunk, n, suite.diffusion_steps)?.sequences,
        };
        out.extend(seqs.into_iter().map(|s| s[s.len() - n..].to_vec()));
    }
    Ok(out)
}

fn exact_match(ck: &ModelCheckpoint, task: Task, suite: &TaskSuite) -> Result<f64> {
    let set = tasks::heldout_set(task, suite.n_eval_prompts, suite.seed)?;
    let prompts: Vec<Vec<u32>> = set.iter().map(|e| e.prompt.clone()).collect();
    let got = complete(ck, &prompts, suite)?;
    let hits = got.iter().zip(&set).filter(|(g, e)| **g == e.completion).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Fraction of completion tokens the checkpoint predicts from gold context:
/// teacher-forced next-token argmax for autoregressive checkpoints, and a
/// single pass over a fully masked completion for diffusion checkpoints.
fn token_accuracy(ck: &ModelCheckpoint, suite: &TaskSuite) -> Result<f64> {
    let (p, n) = (tasks::PROMPT_LEN, tasks::COMPLETION_LEN);
    let vocab = ck.config.vocab_size;
    let mut examples = Vec::new();
    for task in suite.generative() {
        examples.extend(tasks::heldout_set(task, suite.n_eval_prompts, suite.seed)?);
    }
    let mut hits = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<Vec<u32>> = chunk
            .iter()
            .map(|e| match ck.config.mode {
                Mode::Ar => e.sequence()[..p + n - 1].to_vec(),
                Mode::Diffusion => [e.prompt.as_slice(), &[MASK; tasks::COMPLETION_LEN]].concat(),
            })
            .collect();
        let len = seqs[0].len();
        let logits = forward_tokens(ck, &seqs.concat(), seqs.len(), len)?;
        for (b, e) in chunk.iter().enumerate() {
            for i in 0..n {
                let pos = match ck.config.mode {
                    Mode::Ar => p - 1 + i,
                    Mode::Diffusion => p + i,
                };
                let row = &logits.data()[(b * len + pos) * vocab..(b * len + pos + 1) * vocab];
                let mut best = 0;
                for t in 1..vocab {
                    if t != MASK as usize && row[t] > row[best] {
                        best = t;
                    }
                }
                if best as u32 == e.completion[i] {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / (examples.len() * n) as f64)
}

/// Scores a checkpoint on every task in the suite.
pub fn evaluate_tasks(ck: &ModelCheckpoint, suite: &TaskSuite) -> Result<TaskScores> {
    suite.validate()?;
    let mut scores = TaskScores::new();
    for &task in &suite.tasks {
        let s = match task {
            Task::HeldoutTokenAccuracy => token_accuracy(ck, suite)?,
            t => exact_match(ck, t, suite)?,
        };
        scores.insert(task, s);
    }
    Ok(scores)
}
