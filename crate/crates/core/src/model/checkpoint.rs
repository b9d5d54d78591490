use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub type ParamMap = BTreeMap<String, Tensor>;

pub const TOKEN_EMBEDDING: &str = "tok_emb";
pub const POSITION_EMBEDDING: &str = "pos_emb";
pub const OUTPUT_HEAD: &str = "head";

/// Linear projections of one block, in the order the forward pass uses them.
pub const BLOCK_LINEARS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "ff.in", "ff.out"];

pub fn layer_path(layer: usize, name: &str) -> String {
    format!("layers.{layer}.{name}")
}

/// Every parameter of the architecture with its shape, in forward order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, s) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
    let mut out = vec![
        (TOKEN_EMBEDDING.to_string(), vec![v, d]),
        (POSITION_EMBEDDING.to_string(), vec![s, d]),
    ];
    for l in 0..cfg.n_layers {
        out.push((layer_path(l, "ln1.gain"), vec![d]));
        out.push((layer_path(l, "ln1.bias"), vec![d]));
        for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            out.push((layer_path(l, name), vec![d, d]));
        }
        out.push((layer_path(l, "ln2.gain"), vec![d]));
        out.push((layer_path(l, "ln2.bias"), vec![d]));
        out.push((layer_path(l, "ff.in"), vec![f, d]));
        out.push((layer_path(l, "ff.out"), vec![d, f]));
    }
    out.push(("ln_f.gain".to_string(), vec![d]));
    out.push(("ln_f.bias".to_string(), vec![d]));
    out.push((OUTPUT_HEAD.to_string(), vec![v, d]));
    out
}

/// 2-D weights eligible for quantization, in forward order.
///
/// Block projections always; token embedding and output head only when
/// `include_embeddings` is set.
pub fn quantizable_paths(cfg: &ModelConfig, include_embeddings: bool) -> Vec<String> {
    let mut out = Vec::new();
    if include_embeddings {
        out.push(TOKEN_EMBEDDING.to_string());
    }
    for l in 0..cfg.n_layers {
        for name in BLOCK_LINEARS {
            out.push(layer_path(l, name));
        }
    }
    if include_embeddings {
        out.push(OUTPUT_HEAD.to_string());
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: usize,
    pub corpus_hash: String,
    /// Hash of the configuration that produced this checkpoint.
    pub config_hash: String,
    /// Free-form provenance, e.g. the quantization applied.
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    params: ParamMap,
}

impl ModelCheckpoint {
    /// Assembles a checkpoint, checking that `params` matches the layout.
    pub fn from_params(config: ModelConfig, meta: TrainingMeta, params: ParamMap) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected {} parameters, got {}", layout.len(), params.len()),
            });
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format {
                        what: "checkpoint",
                        detail: format!("{name}: shape {:?}, expected {shape:?}", t.shape()),
                    })
                }
                None => {
                    return Err(Error::Format {
                        what: "checkpoint",
                        detail: format!("missing parameter {name}"),
                    })
                }
            }
        }
        Ok(Self { config, meta, params })
    }

    /// Random initialization: embeddings and head N(0, 0.02²), projections
    /// N(0, 1/fan_in) with residual outputs shrunk by `1/sqrt(2·n_layers)`,
    /// norms at unit gain and zero bias.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let residual_scale = 1.0 / ((2 * config.n_layers.max(1)) as f64).sqrt();
        let mut params = ParamMap::new();
        for (name, shape) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let std = if name == TOKEN_EMBEDDING || name == POSITION_EMBEDDING || name == OUTPUT_HEAD {
                    0.02
                } else {
                    let fan_in = shape[1] as f64;
                    let s = 1.0 / fan_in.sqrt();
                    if name.ends_with("attn.o") || name.ends_with("ff.out") {
                        s * residual_scale
                    } else {
                        s
                    }
                };
                (0..n).map(|_| rng.normal() * std).collect()
            };
            let mut t = Tensor::new(shape, data)?;
            t.snap_to_f32();
            params.insert(name, t);
        }
        Ok(Self {
            config,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
            params,
        })
    }

    /// All-zero parameters (norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        Ok(Self {
            config,
            meta: TrainingMeta::default(),
            params,
        })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn param(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {path:?}")))
    }

    pub fn param_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {path:?}")))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self.param_mut(path)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "{path}: shape {:?}, replacement {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn snap_to_f32(&mut self) {
        self.params.values_mut().for_each(Tensor::snap_to_f32);
    }

    pub fn quantizable_paths(&self, include_embeddings: bool) -> Vec<String> {
        quantizable_paths(&self.config, include_embeddings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_init() {
        let cfg = ModelConfig::default();
        let ck = ModelCheckpoint::init(cfg.clone(), 1).unwrap();
        assert_eq!(ck.params().len(), param_layout(&cfg).len());
        assert!(ck.params().values().all(Tensor::is_f32_exact));
    }

    #[test]
    fn quantizable_paths_are_matrices() {
        let cfg = ModelConfig::default();
        let ck = ModelCheckpoint::init(cfg, 1).unwrap();
        for path in ck.quantizable_paths(true) {
            assert_eq!(ck.param(&path).unwrap().ndim(), 2, "{path}");
        }
        assert_eq!(ck.quantizable_paths(false).len(), 12);
        assert_eq!(ck.quantizable_paths(true).len(), 14);
    }

    #[test]
    fn set_param_checks_shape() {
        let mut ck = ModelCheckpoint::init(ModelConfig::default(), 1).unwrap();
        assert!(ck.set_param("head", Tensor::zeros(&[2, 2])).is_err());
    }
}
