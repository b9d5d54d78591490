//! Adam training on the synthetic task mix plus a text shard.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::tasks::{self, Split, Task};
use crate::hash::{config_hash, sha256_hex};
use crate::model::{mean_loss_and_grads, Batch, Mode, ModelCheckpoint, ModelConfig, ParamMap, BOS};
use crate::numerics::{Rng, Tensor};

/// Public-domain text bundled with the crate.
pub const BUNDLED_SHARD: &str = include_str!("../data/shard.txt");

const DATA_STREAM: u64 = 0xDA7A;
const MASK_STREAM: u64 = 0x3A5C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Generative tasks mixed into training, drawn uniformly.
    pub tasks: Vec<Task>,
    /// Text file cut into windows; the bundled shard when unset.
    pub text_path: Option<PathBuf>,
    /// Probability that a training row is a text window.
    pub text_weight: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            tasks: Task::GENERATIVE.to_vec(),
            text_path: None,
            text_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Range of the per-row mask ratio in diffusion mode.
    pub mask_ratio: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            batch_size: 32,
            steps: 3000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mask_ratio: (0.1, 0.9),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        let (lo, hi) = self.mask_ratio;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("mask_ratio must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.corpus.text_weight) {
            return bad("text_weight must lie in [0, 1]");
        }
        if self.corpus.tasks.is_empty() && self.corpus.text_weight < 1.0 {
            return bad("corpus needs at least one task unless it is all text");
        }
        if self.corpus.tasks.iter().any(|t| !t.is_generative()) {
            return bad("only generative tasks can be trained on");
        }
        if self.model.max_seq_len < tasks::SEQ_LEN {
            return Err(Error::Parameter(format!(
                "max_seq_len must be at least {}",
                tasks::SEQ_LEN
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Training data source: the task generators and a byte string of text.
pub struct Corpus {
    tasks: Vec<Task>,
    text: Vec<u8>,
    text_weight: f64,
    hash: String,
}

impl Corpus {
    pub fn load(cfg: &CorpusConfig, base: Option<&Path>) -> Result<Self> {
        let text = match &cfg.text_path {
            None => BUNDLED_SHARD.as_bytes().to_vec(),
            Some(p) => {
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                std::fs::read(&p).map_err(|e| Error::io(&p, e))?
            }
        };
        if cfg.text_weight > 0.0 && text.len() < tasks::SEQ_LEN {
            return Err(Error::Parameter(format!(
                "text shard must hold at least {} bytes",
                tasks::SEQ_LEN
            )));
        }
        let mut hashed = serde_json::to_vec(&(&cfg.tasks, cfg.text_weight)).expect("serializable");
        hashed.extend_from_slice(&text);
        Ok(Self {
            tasks: cfg.tasks.clone(),
            text,
            text_weight: cfg.text_weight,
            hash: sha256_hex(&hashed),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn text(&self) -> &[u8] {
        &self.text
    }

    /// One training row and the positions a denoiser may hide.
    fn draw(&self, rng: &mut Rng) -> Result<(Vec<u32>, Vec<bool>)> {
        if rng.uniform() < self.text_weight {
            let start = rng.below(self.text.len() - (tasks::SEQ_LEN - 1) + 1);
            let mut seq = vec![BOS];
            seq.extend(self.text[start..start + tasks::SEQ_LEN - 1].iter().map(|&b| b as u32));
            let mut maskable = vec![true; tasks::SEQ_LEN];
            maskable[0] = false;
            Ok((seq, maskable))
        } else {
            let task = self.tasks[rng.below(self.tasks.len())];
            let ex = tasks::sample(task, Split::Train, rng)?;
            let maskable = (0..tasks::SEQ_LEN).map(|i| i >= tasks::PROMPT_LEN).collect();
            Ok((ex.sequence(), maskable))
        }
    }
}

/// Batches of text windows only, in the batch format `mode` trains on.
/// Diffusion batches hide each position with probability `mask_ratio`.
pub fn text_batches(
    text: &[u8],
    mode: Mode,
    n_batches: usize,
    batch_size: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<Vec<Batch>> {
    if text.len() < tasks::SEQ_LEN {
        return Err(Error::Parameter(format!(
            "text shard must hold at least {} bytes",
            tasks::SEQ_LEN
        )));
    }
    let corpus = Corpus {
        tasks: Vec::new(),
        text: text.to_vec(),
        text_weight: 1.0,
        hash: String::new(),
    };
    let root = Rng::new(seed);
    let mut data = root.fork(DATA_STREAM);
    let mut masks = root.fork(MASK_STREAM);
    (0..n_batches)
        .map(|_| {
            let (seqs, maskable): (Vec<_>, Vec<_>) = (0..batch_size)
                .map(|_| corpus.draw(&mut data))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            match mode {
                Mode::Ar => Batch::next_token(&seqs),
                Mode::Diffusion => Batch::masked(&seqs, &maskable, mask_ratio, &mut masks),
            }
        })
        .collect()
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    /// `(step, loss)` for every step, 1-based.
    pub log: Vec<(usize, f64)>,
}

struct Adam {
    m: ParamMap,
    v: ParamMap,
    t: i32,
}

impl Adam {
    fn new(params: &ParamMap) -> Self {
        let zeros: ParamMap = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, ck: &mut ModelCheckpoint, grads: &ParamMap, cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("same layout").data_mut();
            let v = self.v.get_mut(name).expect("same layout").data_mut();
            let w = ck.param_mut(name)?.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                w[i] = ((w[i] - update) as f32) as f64;
            }
        }
        Ok(())
    }
}

/// Builds the training batch for `step` from the shared data stream.
fn next_batch(corpus: &Corpus, cfg: &TrainConfig, data: &mut Rng, masks: &mut Rng) -> Result<Batch> {
    let mut seqs = Vec::with_capacity(cfg.batch_size);
    let mut maskable = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let (s, m) = corpus.draw(data)?;
        seqs.push(s);
        maskable.push(m);
    }
    match cfg.model.mode {
        Mode::Ar => Batch::next_token(&seqs),
        Mode::Diffusion => {
            let ratios: Vec<f64> = (0..seqs.len())
                .map(|_| masks.uniform_in(cfg.mask_ratio.0, cfg.mask_ratio.1))
                .collect();
            Batch::masked_per_row(&seqs, &maskable, &ratios, masks)
        }
    }
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(cfg, None, |_, _| {})
}

/// Trains and calls `observe(step, loss)` after every step. Text paths in
/// the corpus config resolve against `base`.
pub fn train_observed(
    cfg: &TrainConfig,
    base: Option<&Path>,
    mut observe: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = Corpus::load(&cfg.corpus, base)?;
    let mut ck = ModelCheckpoint::init(cfg.model.clone(), cfg.seed)?;
    ck.meta.corpus_hash = corpus.hash().to_string();
    ck.meta.config_hash = cfg.hash();
    let root = Rng::new(cfg.seed);
    let mut data = root.fork(DATA_STREAM);
    let mut masks = root.fork(MASK_STREAM);
    let mut adam = Adam::new(ck.params());
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let batch = next_batch(&corpus, cfg, &mut data, &mut masks)?;
        let diverged = |loss: f64, ck: &ModelCheckpoint| Error::Divergence {
            step,
            loss,
            last_good: Box::new(ck.clone()),
        };
        let (loss, grads) = match mean_loss_and_grads(&ck, std::slice::from_ref(&batch)) {
            Ok(r) => r,
            Err(Error::Numeric(_)) => return Err(diverged(f64::NAN, &ck)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(loss, &ck));
        }
        let before = ck.clone();
        adam.step(&mut ck, &grads, cfg)?;
        if ck.params().values().any(|t| !t.is_finite()) {
            return Err(diverged(loss, &before));
        }
        ck.meta.steps = step;
        log.push((step, loss));
        observe(step, loss);
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Trains the autoregressive and diffusion variants of one config on the
/// same data stream from the same initialization.
pub fn make_paired_checkpoints(cfg: &TrainConfig) -> Result<(ModelCheckpoint, ModelCheckpoint)> {
    let ar = train(&TrainConfig {
        model: cfg.model.with_mode(Mode::Ar),
        ..cfg.clone()
    })?;
    let diff = train(&TrainConfig {
        model: cfg.model.with_mode(Mode::Diffusion),
        ..cfg.clone()
    })?;
    Ok((ar.checkpoint, diff.checkpoint))
}

/// Writes a `step,loss` CSV.
pub fn write_log_csv(log: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
        what: "training log",
        detail: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Format {
        what: "training log",
        detail: e.to_string(),
    };
    w.write_record(["step", "loss"]).map_err(io)?;
    for (step, loss) in log {
        w.write_record([step.to_string(), loss.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
