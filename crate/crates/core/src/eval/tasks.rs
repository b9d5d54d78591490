//! Synthetic exact-match tasks.
//!
//! Every example is a 16-token sequence
//!
//! ```text
//! BOS  t0 t1  x0 x1 x2 x3 x4 x5  '='  y0 y1 y2 y3 y4 y5
//! ```
//!
//! where `t0 t1` is a two-byte task tag, `x` the payload over the letters
//! `a..=h`, and `y` the completion the task defines. The first ten tokens
//! are the prompt.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::BOS;
use crate::numerics::Rng;

pub const PAYLOAD_LEN: usize = 6;
pub const COMPLETION_LEN: usize = 6;
pub const PROMPT_LEN: usize = 1 + 2 + PAYLOAD_LEN + 1;
pub const SEQ_LEN: usize = PROMPT_LEN + COMPLETION_LEN;
pub const ALPHABET: &[u8] = b"abcdefgh";
pub const PATTERN_PERIODS: [usize; 3] = [3, 4, 5];

/// One in this many payloads is reserved for evaluation.
const HELDOUT_BUCKETS: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    PatternCompletion,
    /// Per-token accuracy on the completions of all generative tasks.
    HeldoutTokenAccuracy,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Copy,
        Task::Reverse,
        Task::PatternCompletion,
        Task::HeldoutTokenAccuracy,
    ];
    pub const GENERATIVE: [Task; 3] = [Task::Copy, Task::Reverse, Task::PatternCompletion];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::PatternCompletion => "pattern_completion",
            Task::HeldoutTokenAccuracy => "heldout_token_accuracy",
        }
    }

    pub fn is_generative(self) -> bool {
        self != Task::HeldoutTokenAccuracy
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
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// A task instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub task: Task,
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
}

impl Example {
    pub fn sequence(&self) -> Vec<u32> {
        [self.prompt.as_slice(), &self.completion].concat()
    }
}

fn tag(task: Task, period: usize) -> [u8; 2] {
    match task {
        Task::Copy => *b"c:",
        Task::Reverse => *b"r:",
        Task::PatternCompletion => [b'p', b'0' + period as u8],
        Task::HeldoutTokenAccuracy => unreachable!("not a generator"),
    }
}

/// Deterministic train/heldout assignment of a tagged payload.
pub fn split_of(tag: &[u8], payload: &[u8]) -> Split {
    let digest = Sha256::new().chain_update(tag).chain_update(payload).finalize();
    if digest[0] % HELDOUT_BUCKETS == 0 {
        Split::Heldout
    } else {
        Split::Train
    }
}

/// Completion the task oracle assigns to a payload.
pub fn oracle(task: Task, period: usize, payload: &[u8]) -> Vec<u8> {
    match task {
        Task::Copy => payload.to_vec(),
        Task::Reverse => payload.iter().rev().copied().collect(),
        Task::PatternCompletion => (0..COMPLETION_LEN)
            .map(|i| payload[(PAYLOAD_LEN + i) % period])
            .collect(),
        Task::HeldoutTokenAccuracy => unreachable!("not a generator"),
    }
}

fn draw_payload(task: Task, rng: &mut Rng) -> (usize, Vec<u8>) {
    let letter = |rng: &mut Rng| ALPHABET[rng.below(ALPHABET.len())];
    match task {
        Task::PatternCompletion => {
            let period = PATTERN_PERIODS[rng.below(PATTERN_PERIODS.len())];
            let base: Vec<u8> = (0..period).map(|_| letter(rng)).collect();
            (period, (0..PAYLOAD_LEN).map(|i| base[i % period]).collect())
        }
        _ => (0, (0..PAYLOAD_LEN).map(|_| letter(rng)).collect()),
    }
}

/// Draws one example of `task` from the requested split by rejection.
pub fn sample(task: Task, split: Split, rng: &mut Rng) -> Result<Example> {
    if !task.is_generative() {
        return Err(Error::Parameter(format!("{task} has no generator of its own")));
    }
    loop {
        let (period, payload) = draw_payload(task, rng);
        let tag = tag(task, period);
        if split_of(&tag, &payload) != split {
            continue;
        }
        let mut prompt = vec![BOS];
        prompt.extend(tag.iter().chain(&payload).map(|&b| b as u32));
        prompt.push(b'=' as u32);
        let completion = oracle(task, period, &payload).into_iter().map(u32::from).collect();
        return Ok(Example {
            task,
            prompt,
            completion,
        });
    }
}

/// Evaluation set for one task, a pure function of `seed`.
pub fn heldout_set(task: Task, n: usize, seed: u64) -> Result<Vec<Example>> {
    let idx = Task::GENERATIVE
        .iter()
        .position(|&t| t == task)
        .ok_or_else(|| Error::Parameter(format!("{task} has no generator of its own")))?;
    let mut rng = Rng::new(seed).fork(0xE7A1 + idx as u64);
    (0..n).map(|_| sample(task, Split::Heldout, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| if t == BOS { '^' } else { t as u8 as char })
            .collect()
    }

    #[test]
    fn layout() {
        let mut rng = Rng::new(1);
        for task in Task::GENERATIVE {
            let ex = sample(task, Split::Train, &mut rng).unwrap();
            assert_eq!(ex.prompt.len(), PROMPT_LEN);
            assert_eq!(ex.sequence().len(), SEQ_LEN);
            assert_eq!(ex.prompt[PROMPT_LEN - 1], b'=' as u32);
        }
    }

    #[test]
    fn oracles() {
        assert_eq!(oracle(Task::Copy, 0, b"abcdef"), b"abcdef");
        assert_eq!(oracle(Task::Reverse, 0, b"abcdef"), b"fedcba");
        assert_eq!(oracle(Task::PatternCompletion, 3, b"abcabc"), b"abcabc");
        assert_eq!(oracle(Task::PatternCompletion, 4, b"abcdab"), b"cdabcd");
        assert_eq!(oracle(Task::PatternCompletion, 5, b"abcdea"), b"bcdeab");
    }

    #[test]
    fn heldout_is_disjoint_from_train() {
        let mut rng = Rng::new(2);
        for task in Task::GENERATIVE {
            let held: std::collections::BTreeSet<_> = heldout_set(task, 200, 3)
                .unwrap()
                .into_iter()
                .map(|e| e.prompt)
                .collect();
            for _ in 0..2000 {
                assert!(!held.contains(&sample(task, Split::Train, &mut rng).unwrap().prompt));
            }
        }
    }

    #[test]
    fn heldout_set_is_deterministic() {
        let a = heldout_set(Task::Reverse, 20, 5).unwrap();
        assert_eq!(a, heldout_set(Task::Reverse, 20, 5).unwrap());
        assert_ne!(a, heldout_set(Task::Reverse, 20, 6).unwrap());
        assert!(text(&a[0].prompt).starts_with("^r:"));
    }
}
