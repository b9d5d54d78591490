//! The single config file behind every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alloc::{SplitRatios, Tiers};
use crate::error::{Error, Result};
use crate::eval::latency::LatencyConfig;
use crate::eval::TaskSuite;
use crate::gptq::GptqConfig;
use crate::hash::config_hash;
use crate::hawq::{RankMode, SensitivityConfig};
use crate::model::Mode;
use crate::quant::SUPPORTED_BITS;
use crate::trainer::TrainConfig;

/// Text batches used for GPTQ Hessians and for the sensitivity loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    /// Masking probability for diffusion calibration batches.
    pub mask_ratio: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_batches: 8,
            batch_size: 16,
            mask_ratio: 0.5,
        }
    }
}

/// A sensitivity-ranked plan: a named split, or a bit budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HawqPlanSpec {
    /// Row label, e.g. `16/8`.
    pub name: String,
    #[serde(default)]
    pub ratios: Option<SplitRatios>,
    #[serde(default)]
    pub tiers: Option<Tiers>,
    /// Mean-bit target; replaces `ratios` when set.
    #[serde(default)]
    pub budget_bits: Option<f64>,
}

impl HawqPlanSpec {
    pub fn split(name: &str, ratios: SplitRatios, tiers: Tiers) -> Self {
        Self {
            name: name.into(),
            ratios: Some(ratios),
            tiers: Some(tiers),
            budget_bits: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['\\', '"']) {
            return Err(Error::Parameter(format!("bad plan name {:?}", self.name)));
        }
        match (&self.ratios, self.budget_bits) {
            (Some(r), None) => r.validate(),
            (None, Some(b)) if (4.0..=16.0).contains(&b) => Ok(()),
            (None, Some(b)) => Err(Error::Parameter(format!(
                "plan {}: budget {b} outside [4, 16]",
                self.name
            ))),
            _ => Err(Error::Parameter(format!(
                "plan {} needs exactly one of ratios and budget_bits",
                self.name
            ))),
        }
    }

    /// File-system friendly form of the name.
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    pub rank_mode: RankMode,
    pub plans: Vec<HawqPlanSpec>,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        let half = SplitRatios {
            p16: 0.5,
            p8: 0.5,
            p4: 0.0,
        };
        Self {
            rank_mode: RankMode::Raw,
            plans: vec![
                HawqPlanSpec::split("16/8", half, Tiers::SIXTEEN_EIGHT_FOUR),
                HawqPlanSpec::split("8/4", half, Tiers::EIGHT_FOUR),
            ],
        }
    }
}

/// Uniform-width cells of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rtn_bits: Vec<u8>,
    pub gptq_bits: Vec<u8>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rtn_bits: vec![8, 4, 3, 2],
            gptq_bits: vec![8, 4, 3, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Relative paths resolve against the config file's directory.
    pub workspace: PathBuf,
    /// Seeds training, calibration and sensitivity directions.
    pub seed: u64,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    /// `bits` is ignored; the grid supplies widths.
    pub gptq: GptqConfig,
    pub sensitivity: SensitivityConfig,
    pub allocation: AllocationConfig,
    pub grid: GridConfig,
    pub suite: TaskSuite,
    pub latency: LatencyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("workspace"),
            seed: 0,
            train: TrainConfig::default(),
            calibration: CalibrationConfig::default(),
            gptq: GptqConfig::default(),
            sensitivity: SensitivityConfig::default(),
            allocation: AllocationConfig::default(),
            grid: GridConfig::default(),
            suite: TaskSuite::default(),
            latency: LatencyConfig::default(),
        }
    }
}

pub const CALIBRATION_STREAM: u64 = 0xCA1B;
pub const SENSITIVITY_STREAM: u64 = 0x5E45;

impl PipelineConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Format {
            what: "pipeline config",
            detail: d,
        };
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| bad(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| bad(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; a relative workspace is taken
    /// relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| e.context(path.display().to_string()))?;
        if cfg.workspace.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.workspace = dir.join(&cfg.workspace);
            }
        }
        Ok(cfg)
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<()> {
        self.train_config(Mode::Ar).validate()?;
        GptqConfig {
            bits: 4,
            ..self.gptq.clone()
        }
        .validate()?;
        self.sensitivity.validate()?;
        self.suite.validate()?;
        self.latency.validate()?;
        if self.latency.seq_len > self.train.model.max_seq_len {
            return Err(Error::Parameter(format!(
                "latency seq_len {} exceeds the model's max_seq_len {}",
                self.latency.seq_len, self.train.model.max_seq_len
            )));
        }
        let c = &self.calibration;
        if c.n_batches < 1 || c.batch_size < 1 || !(c.mask_ratio > 0.0 && c.mask_ratio <= 1.0) {
            return Err(Error::Parameter(
                "calibration needs batches and a mask ratio in (0, 1]".into(),
            ));
        }
        for &b in &self.grid.rtn_bits {
            if !SUPPORTED_BITS.contains(&b) || b == 16 {
                return Err(Error::Parameter(format!(
                    "round-to-nearest width {b} not in 2, 3, 4, 8"
                )));
            }
        }
        for &b in &self.grid.gptq_bits {
            GptqConfig {
                bits: b,
                ..self.gptq.clone()
            }
            .validate()?;
        }
        let mut names = std::collections::BTreeSet::new();
        for p in &self.allocation.plans {
            p.validate()?;
            if !names.insert(p.slug()) {
                return Err(Error::Parameter(format!("plan name {} used twice", p.name)));
            }
        }
        Ok(())
    }

    /// Training config for one of the paired models.
    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            model: self.train.model.with_mode(mode),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn sensitivity_config(&self) -> SensitivityConfig {
        SensitivityConfig {
            seed: self.seed ^ SENSITIVITY_STREAM,
            ..self.sensitivity.clone()
        }
    }

    pub fn calibration_seed(&self) -> u64 {
        self.seed ^ CALIBRATION_STREAM
    }

    pub fn hash(&self) -> String {
        let mut scrubbed = self.clone();
        scrubbed.workspace = PathBuf::new();
        config_hash(&scrubbed)
    }
}

pub fn model_name(mode: Mode) -> String {
    format!("toy-{mode}")
}
