//! Per-group symmetric simulated quantization.
//!
//! A 2-D weight `[d_out, d_in]` is split along the input dimension into
//! groups of `group_size` columns (the last group of a row may be shorter).
//! Each group gets one scale `max|w| / qmax` with `qmax = 2^(bits-1) - 1`, and
//! values are rounded half away from zero onto the symmetric integer grid
//! `[-qmax, qmax]`. Dequantized values are written back as ordinary floats,
//! so a quantized checkpoint has the same layout as the original.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alloc::SplitRatios;
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::numerics::Tensor;

pub const SUPPORTED_BITS: [u8; 5] = [2, 3, 4, 8, 16];
pub const DEFAULT_GROUP_SIZE: usize = 128;
pub const PLAN_VERSION: u32 = 1;

/// Largest code magnitude of the symmetric grid.
pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_grid_bits(bits: u8) -> Result<()> {
    if matches!(bits, 2 | 3 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "grid quantization supports 2, 3, 4 or 8 bits, got {bits}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupQuantSpec {
    pub bits: u8,
    pub group_size: usize,
}

impl GroupQuantSpec {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(Error::Parameter(format!("unsupported bit width {bits}")));
        }
        if group_size == 0 {
            return Err(Error::Parameter("group_size must be at least 1".into()));
        }
        Ok(Self { bits, group_size })
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 16
    }

    pub fn groups_per_row(&self, cols: usize) -> usize {
        cols.div_ceil(self.group_size)
    }
}

/// Scale and codes for one group.
///
/// An all-zero group gets scale 1 and all-zero codes.
pub fn quantize_group(values: &[f64], bits: u8) -> Result<(f64, Vec<i8>)> {
    check_grid_bits(bits)?;
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cannot quantize {v}")));
    }
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = group_scale(max, bits);
    Ok((scale, quantize_with_scale(values, scale, bits)))
}

/// Scale of a group whose largest magnitude is `max_abs`: `max_abs / qmax`,
/// or 1 for an all-zero group.
///
/// When `max_abs / qmax` does not survive the round trip `(qmax · s) / qmax`
/// in floating point, the nearest scale within a few ulps that does is used
/// instead, so re-quantizing a dequantized group reproduces its scale.
pub fn group_scale(max_abs: f64, bits: u8) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let q = qmax(bits) as f64;
    let scale = max_abs / q;
    let stable = |s: f64| (q * s) / q == s;
    if stable(scale) {
        return scale;
    }
    let (mut up, mut down) = (scale, scale);
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        if stable(up) {
            return up;
        }
        if stable(down) {
            return down;
        }
    }
    scale
}

/// Codes for `values` on the grid of a given scale.
pub fn quantize_with_scale(values: &[f64], scale: f64, bits: u8) -> Vec<i8> {
    let q = qmax(bits) as f64;
    values.iter().map(|v| (v / scale).round().clamp(-q, q) as i8).collect()
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Exact(Vec<f64>),
    Grid { scales: Vec<f64>, codes: Vec<i8> },
}

/// A weight matrix in quantized form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    spec: GroupQuantSpec,
    rows: usize,
    cols: usize,
    payload: Payload,
}

impl QuantizedWeight {
    /// Assembles a grid-quantized weight from its parts; `scales` is
    /// `[rows, groups_per_row]` and `codes` is `[rows, cols]`.
    pub fn from_parts(
        spec: GroupQuantSpec,
        rows: usize,
        cols: usize,
        scales: Vec<f64>,
        codes: Vec<i8>,
    ) -> Result<Self> {
        check_grid_bits(spec.bits)?;
        let groups = spec.groups_per_row(cols);
        if scales.len() != rows * groups || codes.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} weight with {} scales and {} codes",
                scales.len(),
                codes.len()
            )));
        }
        let q = qmax(spec.bits) as i8;
        if codes.iter().any(|&c| c < -q || c > q) {
            return Err(Error::Parameter(format!("code outside ±{q}")));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Parameter("scales must be finite and non-negative".into()));
        }
        Ok(Self {
            spec,
            rows,
            cols,
            payload: Payload::Grid { scales, codes },
        })
    }

    pub fn spec(&self) -> GroupQuantSpec {
        self.spec
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    /// Per-group scales, `[rows, groups_per_row]`; `None` for passthrough.
    pub fn scales(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::Grid { scales, .. } => Some(scales),
            Payload::Exact(_) => None,
        }
    }

    /// Integer codes, `[rows, cols]`; `None` for passthrough.
    pub fn codes(&self) -> Option<&[i8]> {
        match &self.payload {
            Payload::Grid { codes, .. } => Some(codes),
            Payload::Exact(_) => None,
        }
    }

    pub fn scale_at(&self, row: usize, col: usize) -> Option<f64> {
        let groups = self.spec.groups_per_row(self.cols);
        self.scales().map(|s| s[row * groups + col / self.spec.group_size])
    }
}

/// Round-to-nearest quantization of a `[d_out, d_in]` weight.
pub fn quantize_weight(w: &Tensor, spec: GroupQuantSpec) -> Result<QuantizedWeight> {
    let (rows, cols) = w.dims2()?;
    if spec.is_passthrough() {
        return Ok(QuantizedWeight {
            spec,
            rows,
            cols,
            payload: Payload::Exact(w.data().to_vec()),
        });
    }
    let groups = spec.groups_per_row(cols);
    let mut scales = Vec::with_capacity(rows * groups);
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for chunk in w.row(r).chunks(spec.group_size) {
            let (s, c) = quantize_group(chunk, spec.bits)?;
            scales.push(s);
            codes.extend(c);
        }
    }
    QuantizedWeight::from_parts(spec, rows, cols, scales, codes)
}

/// `code · scale` per element; passthrough weights come back unchanged.
pub fn dequantize(qw: &QuantizedWeight) -> Tensor {
    let shape = vec![qw.rows, qw.cols];
    match &qw.payload {
        Payload::Exact(v) => Tensor::new(shape, v.clone()).expect("shape checked at construction"),
        Payload::Grid { scales, codes } => {
            let groups = qw.spec.groups_per_row(qw.cols);
            let mut out = Vec::with_capacity(codes.len());
            for r in 0..qw.rows {
                for c in 0..qw.cols {
                    let s = scales[r * groups + c / qw.spec.group_size];
                    out.push(codes[r * qw.cols + c] as f64 * s);
                }
            }
            Tensor::new(shape, out).expect("shape checked at construction")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Uniform,
    HawqSplit,
    Manual,
}

/// Bit width per quantizable module.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub group_size: usize,
    pub provenance: Provenance,
    /// Whether token embedding and output head are part of the plan.
    pub include_embeddings: bool,
    pub modules: BTreeMap<String, u8>,
    /// Split that produced a HAWQ plan, if any.
    pub ratios: Option<SplitRatios>,
    /// Hash of the pipeline config that produced the plan, if any.
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PlanEntry {
    path: String,
    bits: u8,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    version: u32,
    group_size: usize,
    provenance: Provenance,
    #[serde(default)]
    include_embeddings: bool,
    modules: Vec<PlanEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ratios: Option<SplitRatios>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl QuantPlan {
    /// Every quantizable module of `ck` at the same width.
    pub fn uniform(ck: &ModelCheckpoint, bits: u8, group_size: usize, include_embeddings: bool) -> Result<Self> {
        GroupQuantSpec::new(bits, group_size)?;
        Ok(Self {
            group_size,
            provenance: Provenance::Uniform,
            include_embeddings,
            modules: ck
                .quantizable_paths(include_embeddings)
                .into_iter()
                .map(|p| (p, bits))
                .collect(),
            ratios: None,
            config_hash: None,
        })
    }

    pub fn spec_for(&self, path: &str) -> Option<GroupQuantSpec> {
        self.modules.get(path).map(|&bits| GroupQuantSpec {
            bits,
            group_size: self.group_size,
        })
    }

    /// Checks that the plan names exactly the quantizable modules of `ck`.
    pub fn check_coverage(&self, ck: &ModelCheckpoint) -> Result<()> {
        let expected: BTreeSet<String> = ck.quantizable_paths(self.include_embeddings).into_iter().collect();
        let got: BTreeSet<String> = self.modules.keys().cloned().collect();
        let missing: Vec<String> = expected.difference(&got).cloned().collect();
        let unknown: Vec<String> = got.difference(&expected).cloned().collect();
        if missing.is_empty() && unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Coverage { missing, unknown })
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (path, &bits) in &self.modules {
            GroupQuantSpec::new(bits, self.group_size).map_err(|e| e.context(path.clone()))?;
        }
        Ok(())
    }

    /// Bit width label such as `4` for uniform plans, or `16/8` style
    /// summaries (distinct widths, descending) for mixed ones.
    pub fn label(&self) -> String {
        let widths: BTreeSet<u8> = self.modules.values().copied().collect();
        widths.iter().rev().map(u8::to_string).collect::<Vec<_>>().join("/")
    }

    pub fn to_json(&self) -> String {
        let file = PlanFile {
            version: PLAN_VERSION,
            group_size: self.group_size,
            provenance: self.provenance,
            include_embeddings: self.include_embeddings,
            modules: self
                .modules
                .iter()
                .map(|(path, &bits)| PlanEntry {
                    path: path.clone(),
                    bits,
                })
                .collect(),
            ratios: self.ratios,
            config_hash: self.config_hash.clone(),
        };
        serde_json::to_string_pretty(&file).expect("plan serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "quant plan",
            detail: e.to_string(),
        })?;
        if file.version != PLAN_VERSION {
            return Err(Error::Format {
                what: "quant plan",
                detail: format!("unsupported version {}", file.version),
            });
        }
        let mut modules = BTreeMap::new();
        for e in file.modules {
            if modules.insert(e.path.clone(), e.bits).is_some() {
                return Err(Error::Format {
                    what: "quant plan",
                    detail: format!("{} listed twice", e.path),
                });
            }
        }
        let plan = Self {
            group_size: file.group_size,
            provenance: file.provenance,
            include_embeddings: file.include_embeddings,
            modules,
            ratios: file.ratios,
            config_hash: file.config_hash,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Replaces each planned weight with its round-to-nearest reconstruction.
/// 16-bit modules and all non-planned parameters are left untouched.
pub fn rtn_quantize_model(ck: &ModelCheckpoint, plan: &QuantPlan) -> Result<ModelCheckpoint> {
    plan.validate()?;
    plan.check_coverage(ck)?;
    let mut out = ck.clone();
    for (path, _) in plan.modules.iter().filter(|(_, &b)| b != 16) {
        let spec = plan.spec_for(path).expect("path from plan");
        let qw = quantize_weight(ck.param(path)?, spec).map_err(|e| e.context(path.clone()))?;
        let mut w = dequantize(&qw);
        w.snap_to_f32();
        out.set_param(path, w)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    /// Parameter-weighted mean bit width over planned modules.
    pub raw_avg_bits: f64,
    /// As above plus 16 bits of scale per group of each quantized module.
    pub effective_avg_bits: f64,
    /// Planned modules at their effective width plus every other parameter
    /// at 16 bits, in bytes.
    pub total_bytes_effective: f64,
}

pub fn memory_footprint(plan: &QuantPlan, ck: &ModelCheckpoint) -> Result<Footprint> {
    plan.check_coverage(ck)?;
    let mut n_total = 0.0;
    let mut raw = 0.0;
    let mut overhead = 0.0;
    for (path, &bits) in &plan.modules {
        let (rows, cols) = ck.param(path)?.dims2()?;
        let n = (rows * cols) as f64;
        n_total += n;
        raw += n * bits as f64;
        if bits != 16 {
            overhead += 16.0 * (rows * cols.div_ceil(plan.group_size)) as f64;
        }
    }
    let other: usize = ck
        .params()
        .iter()
        .filter(|(p, _)| !plan.modules.contains_key(*p))
        .map(|(_, t)| t.len())
        .sum();
    Ok(Footprint {
        raw_avg_bits: raw / n_total,
        effective_avg_bits: (raw + overhead) / n_total,
        total_bytes_effective: (raw + overhead + 16.0 * other as f64) / 8.0,
    })
}
