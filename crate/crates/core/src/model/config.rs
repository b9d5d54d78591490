use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte-level vocabulary: ids 0..=255 are raw bytes, followed by specials.
pub const MASK: u32 = 256;
pub const BOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Causal next-token model.
    Ar,
    /// Bidirectional masked-denoising model.
    Diffusion,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ar => "ar",
            Mode::Diffusion => "diffusion",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Mode::Ar),
            "diffusion" => Ok(Mode::Diffusion),
            other => Err(Error::Parameter(format!(
                "unknown mode {other:?} (expected ar|diffusion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            mode: Mode::Ar,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < BYTE_VOCAB {
            return Err(Error::Parameter(format!(
                "vocab_size must cover bytes and specials ({BYTE_VOCAB}), got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Parameter("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn causal(&self) -> bool {
        self.mode == Mode::Ar
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }
}
