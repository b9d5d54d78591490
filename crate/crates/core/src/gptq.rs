//! Layer-wise GPTQ with sequential calibration.
//!
//! For a linear layer `y = x Wᵀ` with calibration inputs `X`, the layer
//! Hessian is `H = 2 Σ x xᵀ`. Columns of `W` are quantized one at a time;
//! the rounding error of column `j` is spread over the columns not yet
//! quantized through the inverse Hessian restricted to them, which is read
//! off the upper Cholesky factor `U` of `H⁻¹` (`H⁻¹ = UᵀU`): row `j` of `U`
//! divided by `U[j, j]` is row `j` of the inverse after the earlier columns
//! have been eliminated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{linear_inputs, Batch, ModelCheckpoint, OUTPUT_HEAD, TOKEN_EMBEDDING};
use crate::numerics::{cholesky, cholesky_invert_spd, Tensor};
use crate::quant::{dequantize, group_scale, quantize_weight, quantize_with_scale, GroupQuantSpec, QuantizedWeight};

const MAX_DAMPING_RETRIES: usize = 3;

/// Accumulated `2 Σ x xᵀ` for one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub path: String,
    pub h: Tensor,
    pub n_samples: usize,
}

impl LayerCalibration {
    pub fn new(path: impl Into<String>, d_in: usize) -> Self {
        Self {
            path: path.into(),
            h: Tensor::zeros(&[d_in, d_in]),
            n_samples: 0,
        }
    }

    /// Adds every row of `x` (`[rows, d_in]`) as a sample.
    pub fn add_inputs(&mut self, x: &Tensor) -> Result<()> {
        let (rows, d) = x.dims2()?;
        if d != self.h.shape()[0] {
            return Err(Error::Dimension(format!(
                "{}: calibration input width {d}, expected {}",
                self.path,
                self.h.shape()[0]
            )));
        }
        x.ensure_finite(&self.path)?;
        // Summed into a fresh buffer first, so feeding the same inputs twice
        // doubles H exactly.
        let mut s = vec![0.0; d * d];
        for r in 0..rows {
            let xr = x.row(r);
            for i in 0..d {
                let xi = 2.0 * xr[i];
                if xi == 0.0 {
                    continue;
                }
                for j in i..d {
                    s[i * d + j] += xi * xr[j];
                }
            }
        }
        let h = self.h.data_mut();
        for i in 0..d {
            for j in i..d {
                h[i * d + j] += s[i * d + j];
                h[j * d + i] = h[i * d + j];
            }
        }
        self.n_samples += rows;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnOrder {
    Ascending,
    /// Columns with the largest Hessian diagonal first. Groups still cover
    /// contiguous original columns.
    ByDiagDesc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptqConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Fraction of the mean Hessian diagonal added before inversion.
    pub damping: f64,
    pub column_order: ColumnOrder,
    /// Quantize the token embedding (round-to-nearest) and the output head.
    pub include_embeddings: bool,
    /// Calibrate each layer on the already-quantized prefix of the model.
    /// When false every layer sees activations of the original model.
    pub sequential: bool,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: crate::quant::DEFAULT_GROUP_SIZE,
            damping: 0.01,
            column_order: ColumnOrder::Ascending,
            include_embeddings: false,
            sequential: true,
        }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 3 | 4 | 8) {
            return Err(Error::Parameter(format!(
                "GPTQ quantizes to 2, 3, 4 or 8 bits, got {}",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Parameter("group_size must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(Error::Parameter("damping must be positive".into()));
        }
        Ok(())
    }

    fn spec(&self) -> GroupQuantSpec {
        GroupQuantSpec {
            bits: self.bits,
            group_size: self.group_size,
        }
    }
}

/// `tr(Δ H Δᵀ) / 2` for `Δ = a − b`, the summed squared output error over
/// the calibration samples.
pub fn recon_error(a: &Tensor, b: &Tensor, h: &Tensor) -> Result<f64> {
    let (rows, cols) = a.dims2()?;
    if b.shape() != a.shape() || h.shape() != [cols, cols] {
        return Err(Error::Dimension("recon_error operands disagree".into()));
    }
    let mut total = 0.0;
    let mut delta = vec![0.0; cols];
    for r in 0..rows {
        for (d, (x, y)) in delta.iter_mut().zip(a.row(r).iter().zip(b.row(r))) {
            *d = x - y;
        }
        for i in 0..cols {
            let hi = h.row(i);
            let s: f64 = hi.iter().zip(&delta).map(|(p, q)| p * q).sum();
            total += delta[i] * s;
        }
    }
    Ok(total / 2.0)
}

/// Inverse of `H + δI` with `δ = damping · mean(diag H)`, multiplying the
/// damping by 10 after each Cholesky failure. Returns the inverse and the δ
/// that succeeded.
fn damped_inverse(h: &Tensor, damping: f64, path: &str) -> Result<(Tensor, f64)> {
    let n = h.shape()[0];
    let mean_diag = (0..n).map(|i| h.at(i, i)).sum::<f64>() / n as f64;
    // An all-zero Hessian still needs a positive shift.
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut delta = damping * base;
    let mut last = None;
    for _ in 0..=MAX_DAMPING_RETRIES {
        let mut damped = h.clone();
        for i in 0..n {
            damped.set(i, i, h.at(i, i) + delta);
        }
        match cholesky_invert_spd(&damped) {
            Ok(inv) => return Ok((inv, delta)),
            Err(e @ Error::NotPositiveDefinite { .. }) => {
                last = Some(e);
                delta *= 10.0;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last
        .expect("at least one attempt")
        .context(format!("{path}: Hessian not invertible after damping")))
}

/// Output of [`gptq_quantize_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub weight: QuantizedWeight,
    pub recon_error: f64,
    pub damping: f64,
}

/// Quantizes one weight matrix against its calibration Hessian.
pub fn gptq_quantize_layer(w: &Tensor, calib: &LayerCalibration, cfg: &GptqConfig) -> Result<LayerResult> {
    cfg.validate()?;
    let (rows, cols) = w.dims2()?;
    if calib.h.shape() != [cols, cols] {
        return Err(Error::Dimension(format!(
            "{}: Hessian {:?} for a weight with {cols} columns",
            calib.path,
            calib.h.shape()
        )));
    }
    if calib.n_samples == 0 {
        return Err(Error::Contract(format!("{}: no calibration samples", calib.path)));
    }
    w.ensure_finite(&calib.path)?;

    let order: Vec<usize> = match cfg.column_order {
        ColumnOrder::Ascending => (0..cols).collect(),
        ColumnOrder::ByDiagDesc => {
            let mut o: Vec<usize> = (0..cols).collect();
            o.sort_by(|&a, &b| calib.h.at(b, b).total_cmp(&calib.h.at(a, a)).then(a.cmp(&b)));
            o
        }
    };
    let mut permuted_h = Tensor::zeros(&[cols, cols]);
    for (i, &oi) in order.iter().enumerate() {
        for (j, &oj) in order.iter().enumerate() {
            permuted_h.set(i, j, calib.h.at(oi, oj));
        }
    }
    let (hinv, damping) = damped_inverse(&permuted_h, cfg.damping, &calib.path)?;
    // Upper factor U = Lᵀ of H⁻¹ = L Lᵀ; U[j][k] = L[k][j].
    let l = cholesky(&hinv).map_err(|e| e.context(format!("{}: factoring H⁻¹", calib.path)))?;

    let spec = cfg.spec();
    let groups = spec.groups_per_row(cols);
    // Working copy in permuted column order.
    let mut work: Vec<f64> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        work.extend(order.iter().map(|&c| w.at(r, c)));
    }
    let mut position = vec![0; cols];
    for (p, &c) in order.iter().enumerate() {
        position[c] = p;
    }
    let mut scales = vec![f64::NAN; rows * groups];
    let mut codes = vec![0i8; rows * cols];

    for j in 0..cols {
        let col = order[j];
        let g = col / cfg.group_size;
        let group_cols = g * cfg.group_size..((g + 1) * cfg.group_size).min(cols);
        let ujj = l.at(j, j);
        for r in 0..rows {
            let row = &mut work[r * cols..(r + 1) * cols];
            if scales[r * groups + g].is_nan() {
                let max = group_cols.clone().fold(0.0f64, |m, c| m.max(row[position[c]].abs()));
                scales[r * groups + g] = group_scale(max, cfg.bits);
            }
            let scale = scales[r * groups + g];
            let code = quantize_with_scale(&[row[j]], scale, cfg.bits)[0];
            codes[r * cols + col] = code;
            let deq = code as f64 * scale;
            let err = (row[j] - deq) / ujj;
            for k in j + 1..cols {
                row[k] -= err * l.at(k, j);
            }
            row[j] = deq;
        }
    }

    let weight = QuantizedWeight::from_parts(spec, rows, cols, scales, codes)?;
    let recon = recon_error(w, &dequantize(&weight), &calib.h)?;
    Ok(LayerResult {
        weight,
        recon_error: recon,
        damping,
    })
}

/// Hessians of the given linear layers over all positions of `batches`.
pub fn collect_calibration(
    ck: &ModelCheckpoint,
    batches: &[Batch],
    paths: &[String],
) -> Result<BTreeMap<String, LayerCalibration>> {
    let total: usize = batches.iter().map(|b| b.inputs.len()).sum();
    if total == 0 {
        return Err(Error::Contract("no calibration tokens".into()));
    }
    let mut out: BTreeMap<String, LayerCalibration> = BTreeMap::new();
    for b in batches {
        for (path, x) in linear_inputs(ck, &b.inputs, b.batch_size, b.seq_len, paths)? {
            let d = x.shape()[1];
            out.entry(path.clone())
                .or_insert_with(|| LayerCalibration::new(path, d))
                .add_inputs(&x)?;
        }
    }
    Ok(out)
}

/// One line of the per-layer report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub path: String,
    pub bits: u8,
    pub recon_error: f64,
    pub scale_min: f64,
    pub scale_mean: f64,
    pub scale_max: f64,
    pub damping: f64,
}

impl LayerReport {
    fn new(path: &str, bits: u8, qw: &QuantizedWeight, recon_error: f64, damping: f64) -> Self {
        let s = qw.scales().unwrap_or(&[]);
        let n = s.len().max(1) as f64;
        Self {
            path: path.to_string(),
            bits,
            recon_error,
            scale_min: s.iter().copied().fold(f64::INFINITY, f64::min),
            scale_mean: s.iter().sum::<f64>() / n,
            scale_max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            damping,
        }
    }
}

/// Quantized model, the weights in grid form, and a report per layer.
pub struct GptqOutput {
    pub checkpoint: ModelCheckpoint,
    pub weights: Vec<(String, QuantizedWeight)>,
    pub report: Vec<LayerReport>,
}

/// Calibration stages in forward order: layers whose inputs are produced by
/// the same prefix of the network are solved together.
fn stages(ck: &ModelCheckpoint, include_head: bool) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for l in 0..ck.config.n_layers {
        let p = |n: &str| crate::model::layer_path(l, n);
        out.push(vec![p("attn.q"), p("attn.k"), p("attn.v")]);
        out.push(vec![p("attn.o")]);
        out.push(vec![p("ff.in")]);
        out.push(vec![p("ff.out")]);
    }
    if include_head {
        out.push(vec![OUTPUT_HEAD.to_string()]);
    }
    out
}

/// Quantizes every block linear (and optionally the embeddings) with GPTQ.
pub fn gptq_quantize_model(ck: &ModelCheckpoint, batches: &[Batch], cfg: &GptqConfig) -> Result<GptqOutput> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Contract("GPTQ needs calibration batches".into()));
    }
    let mut out = ck.clone();
    let mut weights = Vec::new();
    let mut report = Vec::new();

    if cfg.include_embeddings {
        // The embedding is a lookup table, not a layer with inputs to
        // calibrate on; it gets plain rounding.
        let qw = quantize_weight(ck.param(TOKEN_EMBEDDING)?, cfg.spec())?;
        let mut deq = dequantize(&qw);
        deq.snap_to_f32();
        let h = Tensor::identity(ck.config.d_model);
        let err = recon_error(ck.param(TOKEN_EMBEDDING)?, &deq, &h)?;
        report.push(LayerReport::new(TOKEN_EMBEDDING, cfg.bits, &qw, err, 0.0));
        out.set_param(TOKEN_EMBEDDING, deq)?;
        weights.push((TOKEN_EMBEDDING.to_string(), qw));
    }

    let all = stages(ck, cfg.include_embeddings);
    let isolated = if cfg.sequential {
        None
    } else {
        let paths: Vec<String> = all.concat();
        Some(collect_calibration(ck, batches, &paths)?)
    };
    for stage in all {
        let calib = match &isolated {
            Some(c) => stage.iter().map(|p| (p.clone(), c[p].clone())).collect(),
            None => collect_calibration(&out, batches, &stage)?,
        };
        for path in &stage {
            let res = gptq_quantize_layer(ck.param(path)?, &calib[path], cfg).map_err(|e| e.context(path.clone()))?;
            let mut deq = dequantize(&res.weight);
            deq.snap_to_f32();
            report.push(LayerReport::new(
                path,
                cfg.bits,
                &res.weight,
                res.recon_error,
                res.damping,
            ));
            out.set_param(path, deq)?;
            weights.push((path.clone(), res.weight));
        }
    }
    Ok(GptqOutput {
        checkpoint: out,
        weights,
        report,
    })
}

/// Writes the per-layer report as CSV.
pub fn write_report_csv(report: &[LayerReport], path: &Path) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format {
        what: "GPTQ report",
        detail: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
    for r in report {
        w.serialize(r).map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
