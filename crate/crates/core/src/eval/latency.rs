//! Per-step latency under a fixed warm-up / timed-run protocol.

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logits_for_rows, Mode, ModelCheckpoint, BOS, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitOfWork {
    /// One next-token forward over a `seq_len` context.
    ArToken,
    /// One full-sequence forward scoring the masked half of the sequence.
    DiffusionStep,
}

impl UnitOfWork {
    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Ar => UnitOfWork::ArToken,
            Mode::Diffusion => UnitOfWork::DiffusionStep,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitOfWork::ArToken => "ar_token",
            UnitOfWork::DiffusionStep => "diffusion_step",
        }
    }
}

impl fmt::Display for UnitOfWork {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub seq_len: usize,
    /// Derived from the checkpoint mode when unset.
    pub unit_of_work: Option<UnitOfWork>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        Self {
            warmup_runs: 200,
            timed_runs: 2000,
            seq_len: 128,
            unit_of_work: None,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timed_runs < 2 {
            return Err(Error::Parameter("timed_runs must be at least 2".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Parameter("seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyResult {
    pub unit_of_work: UnitOfWork,
    pub seq_len: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub mean_ms: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std_ms: f64,
    /// Set when the clock's resolution exceeds 1% of the mean.
    pub coarse_timer: bool,
}

/// Sample mean and standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Smallest non-zero step of the monotonic clock seen over a short probe.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

struct Work<'a> {
    ck: &'a ModelCheckpoint,
    tokens: Vec<u32>,
    rows: Vec<usize>,
    seq_len: usize,
}

impl Work<'_> {
    fn run(&self) -> Result<()> {
        let logits = logits_for_rows(self.ck, &self.tokens, 1, self.seq_len, &self.rows)?;
        std::hint::black_box(logits);
        Ok(())
    }
}

fn work<'a>(ck: &'a ModelCheckpoint, cfg: &LatencyConfig) -> Result<Work<'a>> {
    cfg.validate()?;
    let unit = cfg.unit_of_work.unwrap_or(UnitOfWork::for_mode(ck.config.mode));
    if unit != UnitOfWork::for_mode(ck.config.mode) {
        return Err(Error::Contract(format!(
            "{unit} cannot be timed on a {} checkpoint",
            ck.config.mode
        )));
    }
    let s = cfg.seq_len;
    if s > ck.config.max_seq_len {
        return Err(Error::Parameter(format!(
            "latency seq_len {s} exceeds max_seq_len {}",
            ck.config.max_seq_len
        )));
    }
    let text = crate::trainer::BUNDLED_SHARD.as_bytes();
    let mut tokens: Vec<u32> = std::iter::once(BOS)
        .chain(text.iter().cycle().take(s - 1).map(|&b| b as u32))
        .collect();
    let rows = match unit {
        UnitOfWork::ArToken => vec![s - 1],
        UnitOfWork::DiffusionStep => {
            for t in &mut tokens[s / 2..] {
                *t = MASK;
            }
            (s / 2..s).collect()
        }
    };
    Ok(Work {
        ck,
        tokens,
        rows,
        seq_len: s,
    })
}

/// Runs `warmup_runs` untimed and `timed_runs` timed units of work.
pub fn measure_latency(ck: &ModelCheckpoint, cfg: &LatencyConfig) -> Result<LatencyResult> {
    let w = work(ck, cfg)?;
    for _ in 0..cfg.warmup_runs {
        w.run()?;
    }
    let mut samples = Vec::with_capacity(cfg.timed_runs);
    for _ in 0..cfg.timed_runs {
        let start = Instant::now();
        w.run()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (mean_ms, std_ms) = mean_std(&samples);
    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    Ok(LatencyResult {
        unit_of_work: UnitOfWork::for_mode(ck.config.mode),
        seq_len: cfg.seq_len,
        warmup_runs: cfg.warmup_runs,
        timed_runs: samples.len(),
        mean_ms,
        std_ms,
        coarse_timer: resolution_ms > 0.01 * mean_ms,
    })
}
