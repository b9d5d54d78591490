//! Mixed-precision post-training quantization lab.
//!
//! A small byte-level transformer is trained twice on identical data, once
//! as a causal next-token model and once as a masked-diffusion denoiser.
//! Both are then quantized with round-to-nearest and GPTQ at several bit
//! widths, and with Hessian-ranked mixed-precision plans, and compared on
//! exact-match tasks, per-step latency and memory.

pub mod alloc;
pub mod error;
pub mod eval;
pub mod gptq;
pub mod hash;
pub mod hawq;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
