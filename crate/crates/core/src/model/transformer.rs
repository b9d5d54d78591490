//! Pre-norm transformer with hand-written reverse mode.
//!
//! Activations are row-major `[rows, width]` buffers where `rows` is
//! `batch_size * seq_len`. Linear weights are stored `[d_out, d_in]` and
//! applied as `y = x Wᵀ`; every reduction runs in ascending index order so
//! results are reproducible bit for bit.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::batch::Batch;
use super::checkpoint::{layer_path, ModelCheckpoint, ParamMap, OUTPUT_HEAD, POSITION_EMBEDDING, TOKEN_EMBEDDING};
use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

static FORWARD_PASSES: AtomicU64 = AtomicU64::new(0);

/// Number of transformer forward passes run by this process so far.
pub fn forward_pass_count() -> u64 {
    FORWARD_PASSES.load(Ordering::Relaxed)
}

struct Linear<'a> {
    w: &'a [f64],
    wt: Vec<f64>,
    d_out: usize,
    d_in: usize,
}

impl<'a> Linear<'a> {
    fn new(t: &'a Tensor) -> Self {
        let (d_out, d_in) = (t.shape()[0], t.shape()[1]);
        let w = t.data();
        let mut wt = vec![0.0; d_out * d_in];
        for o in 0..d_out {
            for i in 0..d_in {
                wt[i * d_out + o] = w[o * d_in + i];
            }
        }
        Self { w, wt, d_out, d_in }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (di, dout) = (self.d_in, self.d_out);
        let mut y = vec![0.0; rows * dout];
        for r in 0..rows {
            let yr = &mut y[r * dout..(r + 1) * dout];
            for (k, &xv) in x[r * di..(r + 1) * di].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (yo, wv) in yr.iter_mut().zip(&self.wt[k * dout..(k + 1) * dout]) {
                    *yo += xv * wv;
                }
            }
        }
        y
    }

    /// Returns `(dx, dW)`.
    fn backward(&self, dy: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        let (di, dout) = (self.d_in, self.d_out);
        let mut dx = vec![0.0; rows * di];
        let mut dw = vec![0.0; dout * di];
        for r in 0..rows {
            let xr = &x[r * di..(r + 1) * di];
            let dxr = &mut dx[r * di..(r + 1) * di];
            for o in 0..dout {
                let g = dy[r * dout + o];
                if g == 0.0 {
                    continue;
                }
                let wrow = &self.w[o * di..(o + 1) * di];
                for (d, wv) in dxr.iter_mut().zip(wrow) {
                    *d += g * wv;
                }
                for (d, xv) in dw[o * di..(o + 1) * di].iter_mut().zip(xr) {
                    *d += g * xv;
                }
            }
        }
        (dx, dw)
    }
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn norm_forward(x: &[f64], rows: usize, d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
fn norm_backward(dy: &[f64], cache: &NormCache, gain: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * d];
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] = rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct Shape {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
    causal: bool,
}

impl Shape {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Returns `(context, probabilities)`; probabilities are laid out
/// `[batch][head][query][key]`.
fn attention_forward(q: &[f64], k: &[f64], v: &[f64], sh: &Shape) -> (Vec<f64>, Vec<f64>) {
    let (s, hd, d) = (sh.seq, sh.head_dim, sh.width());
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0; sh.batch * s * d];
    let mut probs = vec![0.0; sh.batch * sh.heads * s * s];
    let mut scores = vec![0.0; s];
    for b in 0..sh.batch {
        for h in 0..sh.heads {
            let off = h * hd;
            for i in 0..s {
                let qi = &q[(b * s + i) * d + off..(b * s + i) * d + off + hd];
                let keys = if sh.causal { i + 1 } else { s };
                let mut max = f64::NEG_INFINITY;
                for j in 0..keys {
                    let kj = &k[(b * s + j) * d + off..(b * s + j) * d + off + hd];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, c)| a * c).sum();
                    scores[j] = dot * scale;
                    max = max.max(scores[j]);
                }
                let mut total = 0.0;
                for sc in scores.iter_mut().take(keys) {
                    *sc = (*sc - max).exp();
                    total += *sc;
                }
                let prow = &mut probs[((b * sh.heads + h) * s + i) * s..((b * sh.heads + h) * s + i + 1) * s];
                let crow = &mut ctx[(b * s + i) * d + off..(b * s + i) * d + off + hd];
                for j in 0..keys {
                    let p = scores[j] / total;
                    prow[j] = p;
                    let vj = &v[(b * s + j) * d + off..(b * s + j) * d + off + hd];
                    for (c, vv) in crow.iter_mut().zip(vj) {
                        *c += p * vv;
                    }
                }
            }
        }
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)`.
fn attention_backward(
    dctx: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    sh: &Shape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (s, hd, d) = (sh.seq, sh.head_dim, sh.width());
    let scale = 1.0 / (hd as f64).sqrt();
    let n = sh.batch * s * d;
    let (mut dq, mut dk, mut dv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut dp = vec![0.0; s];
    for b in 0..sh.batch {
        for h in 0..sh.heads {
            let off = h * hd;
            for i in 0..s {
                let keys = if sh.causal { i + 1 } else { s };
                let qi_at = (b * s + i) * d + off;
                let dci = &dctx[qi_at..qi_at + hd];
                let prow = &probs[((b * sh.heads + h) * s + i) * s..((b * sh.heads + h) * s + i + 1) * s];
                let mut weighted = 0.0;
                for j in 0..keys {
                    let vj_at = (b * s + j) * d + off;
                    let vj = &v[vj_at..vj_at + hd];
                    dp[j] = dci.iter().zip(vj).map(|(a, c)| a * c).sum();
                    weighted += prow[j] * dp[j];
                    for (dvv, g) in dv[vj_at..vj_at + hd].iter_mut().zip(dci) {
                        *dvv += prow[j] * g;
                    }
                }
                for j in 0..keys {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_at = (b * s + j) * d + off;
                    for t in 0..hd {
                        dq[qi_at + t] += ds * k[kj_at + t];
                        dk[kj_at + t] += ds * q[qi_at + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

struct BlockWeights<'a> {
    ln1_gain: &'a [f64],
    ln1_bias: &'a [f64],
    q: Linear<'a>,
    k: Linear<'a>,
    v: Linear<'a>,
    o: Linear<'a>,
    ln2_gain: &'a [f64],
    ln2_bias: &'a [f64],
    ff_in: Linear<'a>,
    ff_out: Linear<'a>,
}

struct Weights<'a> {
    cfg: &'a ModelConfig,
    tok_emb: &'a [f64],
    pos_emb: &'a [f64],
    blocks: Vec<BlockWeights<'a>>,
    lnf_gain: &'a [f64],
    lnf_bias: &'a [f64],
    head: &'a [f64],
}

impl<'a> Weights<'a> {
    fn bind(ck: &'a ModelCheckpoint) -> Result<Self> {
        let p = |name: &str| -> Result<&'a Tensor> { ck.param(name) };
        let mut blocks = Vec::with_capacity(ck.config.n_layers);
        for l in 0..ck.config.n_layers {
            let lp = |name: &str| p(&layer_path(l, name));
            blocks.push(BlockWeights {
                ln1_gain: lp("ln1.gain")?.data(),
                ln1_bias: lp("ln1.bias")?.data(),
                q: Linear::new(lp("attn.q")?),
                k: Linear::new(lp("attn.k")?),
                v: Linear::new(lp("attn.v")?),
                o: Linear::new(lp("attn.o")?),
                ln2_gain: lp("ln2.gain")?.data(),
                ln2_bias: lp("ln2.bias")?.data(),
                ff_in: Linear::new(lp("ff.in")?),
                ff_out: Linear::new(lp("ff.out")?),
            });
        }
        Ok(Self {
            cfg: &ck.config,
            tok_emb: p(TOKEN_EMBEDDING)?.data(),
            pos_emb: p(POSITION_EMBEDDING)?.data(),
            blocks,
            lnf_gain: p("ln_f.gain")?.data(),
            lnf_bias: p("ln_f.bias")?.data(),
            head: p(OUTPUT_HEAD)?.data(),
        })
    }
}

struct BlockCache {
    norm1: NormCache,
    a1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    norm2: NormCache,
    a2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Intermediate values of one forward pass.
pub(crate) struct Activations {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    /// Input to the output head, `[rows, d_model]`.
    hidden: Vec<f64>,
    rows: usize,
}

impl Activations {
    /// The matrix a quantizable linear layer reads, `[rows, d_in]`.
    pub(crate) fn linear_input(&self, path: &str, cfg: &ModelConfig) -> Option<Tensor> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        if path == OUTPUT_HEAD {
            return Tensor::new(vec![self.rows, d], self.hidden.clone()).ok();
        }
        let rest = path.strip_prefix("layers.")?;
        let (layer, name) = rest.split_once('.')?;
        let block = self.blocks.get(layer.parse::<usize>().ok()?)?;
        let (buf, width) = match name {
            "attn.q" | "attn.k" | "attn.v" => (&block.a1, d),
            "attn.o" => (&block.ctx, d),
            "ff.in" => (&block.a2, d),
            "ff.out" => (&block.act, f),
            _ => return None,
        };
        Tensor::new(vec![self.rows, width], buf.clone()).ok()
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32], batch: usize, seq: usize) -> Result<()> {
    if batch == 0 || seq == 0 || tokens.len() != batch * seq {
        return Err(Error::Dimension(format!(
            "{} tokens for a {batch}x{seq} batch",
            tokens.len()
        )));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::Dimension(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Parameter(format!("token id {t} outside vocabulary")));
    }
    Ok(())
}

fn run_forward(w: &Weights, tokens: &[u32], batch: usize, seq: usize) -> Activations {
    FORWARD_PASSES.fetch_add(1, Ordering::Relaxed);
    let cfg = w.cfg;
    let d = cfg.d_model;
    let rows = batch * seq;
    let sh = Shape {
        batch,
        seq,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        causal: cfg.causal(),
    };

    let mut x = vec![0.0; rows * d];
    for r in 0..rows {
        let tok = tokens[r] as usize;
        let pos = r % seq;
        for i in 0..d {
            x[r * d + i] = w.tok_emb[tok * d + i] + w.pos_emb[pos * d + i];
        }
    }

    let mut blocks = Vec::with_capacity(w.blocks.len());
    for bw in &w.blocks {
        let (a1, norm1) = norm_forward(&x, rows, d, bw.ln1_gain, bw.ln1_bias);
        let q = bw.q.forward(&a1, rows);
        let k = bw.k.forward(&a1, rows);
        let v = bw.v.forward(&a1, rows);
        let (ctx, probs) = attention_forward(&q, &k, &v, &sh);
        let attn_out = bw.o.forward(&ctx, rows);
        for (xv, a) in x.iter_mut().zip(&attn_out) {
            *xv += a;
        }
        let (a2, norm2) = norm_forward(&x, rows, d, bw.ln2_gain, bw.ln2_bias);
        let pre = bw.ff_in.forward(&a2, rows);
        let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
        let ff_out = bw.ff_out.forward(&act, rows);
        for (xv, f) in x.iter_mut().zip(&ff_out) {
            *xv += f;
        }
        blocks.push(BlockCache {
            norm1,
            a1,
            q,
            k,
            v,
            probs,
            ctx,
            norm2,
            a2,
            pre,
            act,
        });
    }
    let (hidden, final_norm) = norm_forward(&x, rows, d, w.lnf_gain, w.lnf_bias);
    Activations {
        blocks,
        final_norm,
        hidden,
        rows,
    }
}

/// Output-head logits for the selected rows, `[rows.len(), vocab]`.
fn head_logits(w: &Weights, acts: &Activations, rows: &[usize]) -> Vec<f64> {
    let (d, vocab) = (w.cfg.d_model, w.cfg.vocab_size);
    let mut out = vec![0.0; rows.len() * vocab];
    for (i, &r) in rows.iter().enumerate() {
        let h = &acts.hidden[r * d..(r + 1) * d];
        for t in 0..vocab {
            let wrow = &w.head[t * d..(t + 1) * d];
            out[i * vocab + t] = h.iter().zip(wrow).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// Logits for every position, shape `[batch, seq, vocab]`.
pub fn forward(ck: &ModelCheckpoint, batch: &Batch) -> Result<Tensor> {
    forward_tokens(ck, &batch.inputs, batch.batch_size, batch.seq_len)
}

pub fn forward_tokens(ck: &ModelCheckpoint, tokens: &[u32], batch: usize, seq: usize) -> Result<Tensor> {
    let rows: Vec<usize> = (0..batch * seq).collect();
    let logits = logits_for_rows(ck, tokens, batch, seq, &rows)?;
    Tensor::new(vec![batch, seq, ck.config.vocab_size], logits)
}

/// Logits for a subset of flattened positions, `[rows.len(), vocab]`.
pub(crate) fn logits_for_rows(
    ck: &ModelCheckpoint,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    rows: &[usize],
) -> Result<Vec<f64>> {
    check_tokens(&ck.config, tokens, batch, seq)?;
    let w = Weights::bind(ck)?;
    let acts = run_forward(&w, tokens, batch, seq);
    let logits = head_logits(&w, &acts, rows);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("forward produced non-finite logits".into()));
    }
    Ok(logits)
}

/// Runs a forward pass and hands back the cached activations.
pub(crate) fn activations(ck: &ModelCheckpoint, tokens: &[u32], batch: usize, seq: usize) -> Result<Activations> {
    check_tokens(&ck.config, tokens, batch, seq)?;
    let w = Weights::bind(ck)?;
    Ok(run_forward(&w, tokens, batch, seq))
}

/// Mean cross-entropy over the supervised rows, and its gradient w.r.t.
/// the logits of those rows.
fn cross_entropy(logits: &[f64], targets: &[u32], vocab: usize) -> (f64, Vec<f64>) {
    let n = targets.len();
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &target) in targets.iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target as usize];
        let g = &mut grad[i * vocab..(i + 1) * vocab];
        for t in 0..vocab {
            g[t] = (row[t] - lse).exp() / n as f64;
        }
        g[target as usize] -= 1.0 / n as f64;
    }
    (total / n as f64, grad)
}

fn supervised(batch: &Batch) -> Result<(Vec<usize>, Vec<u32>)> {
    let rows: Vec<usize> = (0..batch.loss_mask.len()).filter(|&i| batch.loss_mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Contract("batch has an empty loss mask".into()));
    }
    let targets = rows.iter().map(|&r| batch.targets[r]).collect();
    Ok((rows, targets))
}

/// Mean cross-entropy over the batch's loss mask, without gradients.
pub fn loss(ck: &ModelCheckpoint, batch: &Batch) -> Result<f64> {
    let (rows, targets) = supervised(batch)?;
    if let Some(t) = targets.iter().find(|&&t| t as usize >= ck.config.vocab_size) {
        return Err(Error::Parameter(format!("target id {t} outside vocabulary")));
    }
    let logits = logits_for_rows(ck, &batch.inputs, batch.batch_size, batch.seq_len, &rows)?;
    Ok(cross_entropy(&logits, &targets, ck.config.vocab_size).0)
}

/// Mean cross-entropy over the loss mask and its gradient for every parameter.
pub fn loss_and_grads(ck: &ModelCheckpoint, batch: &Batch) -> Result<(f64, ParamMap)> {
    let cfg = &ck.config;
    let (rows_sel, targets) = supervised(batch)?;
    if let Some(t) = targets.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Parameter(format!("target id {t} outside vocabulary")));
    }
    check_tokens(cfg, &batch.inputs, batch.batch_size, batch.seq_len)?;
    let w = Weights::bind(ck)?;
    let acts = run_forward(&w, &batch.inputs, batch.batch_size, batch.seq_len);
    let logits = head_logits(&w, &acts, &rows_sel);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("forward produced non-finite logits".into()));
    }
    let (loss, dlogits) = cross_entropy(&logits, &targets, cfg.vocab_size);

    let (d, f, vocab) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let rows = acts.rows;
    let sh = Shape {
        batch: batch.batch_size,
        seq: batch.seq_len,
        heads: cfg.n_heads,
        head_dim: cfg.head_dim(),
        causal: cfg.causal(),
    };
    let mut grads = ParamMap::new();

    // Output head.
    let mut dhead = vec![0.0; vocab * d];
    let mut dhidden = vec![0.0; rows * d];
    for (i, &r) in rows_sel.iter().enumerate() {
        let h = &acts.hidden[r * d..(r + 1) * d];
        for t in 0..vocab {
            let g = dlogits[i * vocab + t];
            let wrow = &w.head[t * d..(t + 1) * d];
            for k in 0..d {
                dhead[t * d + k] += g * h[k];
                dhidden[r * d + k] += g * wrow[k];
            }
        }
    }
    grads.insert(OUTPUT_HEAD.to_string(), Tensor::new(vec![vocab, d], dhead)?);

    let (mut dx, dg, db) = norm_backward(&dhidden, &acts.final_norm, w.lnf_gain, rows, d);
    grads.insert("ln_f.gain".into(), Tensor::vector(dg));
    grads.insert("ln_f.bias".into(), Tensor::vector(db));

    for (l, (bw, bc)) in w.blocks.iter().zip(&acts.blocks).enumerate().rev() {
        // Feed-forward branch; dx is the gradient at the block output.
        let (dact, dw_out) = bw.ff_out.backward(&dx, &bc.act, rows);
        let dpre: Vec<f64> = dact.iter().zip(&bc.pre).map(|(g, &p)| g * gelu_grad(p)).collect();
        let (da2, dw_in) = bw.ff_in.backward(&dpre, &bc.a2, rows);
        let (dmid, dg2, db2) = norm_backward(&da2, &bc.norm2, bw.ln2_gain, rows, d);
        for (a, b) in dx.iter_mut().zip(&dmid) {
            *a += b;
        }
        grads.insert(layer_path(l, "ff.out"), Tensor::new(vec![d, f], dw_out)?);
        grads.insert(layer_path(l, "ff.in"), Tensor::new(vec![f, d], dw_in)?);
        grads.insert(layer_path(l, "ln2.gain"), Tensor::vector(dg2));
        grads.insert(layer_path(l, "ln2.bias"), Tensor::vector(db2));

        // Attention branch; dx is now the gradient after the attention residual.
        let (dctx, dw_o) = bw.o.backward(&dx, &bc.ctx, rows);
        let (dq, dk, dv) = attention_backward(&dctx, &bc.q, &bc.k, &bc.v, &bc.probs, &sh);
        let (mut da1, dw_q) = bw.q.backward(&dq, &bc.a1, rows);
        let (da1_k, dw_k) = bw.k.backward(&dk, &bc.a1, rows);
        let (da1_v, dw_v) = bw.v.backward(&dv, &bc.a1, rows);
        for ((a, b), c) in da1.iter_mut().zip(&da1_k).zip(&da1_v) {
            *a += b + c;
        }
        let (din, dg1, db1) = norm_backward(&da1, &bc.norm1, bw.ln1_gain, rows, d);
        for (a, b) in dx.iter_mut().zip(&din) {
            *a += b;
        }
        grads.insert(layer_path(l, "attn.o"), Tensor::new(vec![d, d], dw_o)?);
        grads.insert(layer_path(l, "attn.q"), Tensor::new(vec![d, d], dw_q)?);
        grads.insert(layer_path(l, "attn.k"), Tensor::new(vec![d, d], dw_k)?);
        grads.insert(layer_path(l, "attn.v"), Tensor::new(vec![d, d], dw_v)?);
        grads.insert(layer_path(l, "ln1.gain"), Tensor::vector(dg1));
        grads.insert(layer_path(l, "ln1.bias"), Tensor::vector(db1));
    }

    let mut dtok = vec![0.0; vocab * d];
    let mut dpos = vec![0.0; cfg.max_seq_len * d];
    for r in 0..rows {
        let tok = batch.inputs[r] as usize;
        let pos = r % batch.seq_len;
        for i in 0..d {
            dtok[tok * d + i] += dx[r * d + i];
            dpos[pos * d + i] += dx[r * d + i];
        }
    }
    grads.insert(TOKEN_EMBEDDING.to_string(), Tensor::new(vec![vocab, d], dtok)?);
    grads.insert(
        POSITION_EMBEDDING.to_string(),
        Tensor::new(vec![cfg.max_seq_len, d], dpos)?,
    );

    for (name, g) in &grads {
        g.ensure_finite(name)?;
    }
    Ok((loss, grads))
}

/// Gradients of several batches averaged with equal weight.
pub fn mean_loss_and_grads(ck: &ModelCheckpoint, batches: &[Batch]) -> Result<(f64, ParamMap)> {
    if batches.is_empty() {
        return Err(Error::Contract("no batches to average over".into()));
    }
    let mut total_loss = 0.0;
    let mut acc: Option<ParamMap> = None;
    for b in batches {
        let (l, g) = loss_and_grads(ck, b)?;
        total_loss += l;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => {
                for (name, t) in g {
                    a.get_mut(&name).expect("same layout").add_scaled(&t, 1.0)?;
                }
            }
        }
    }
    let n = batches.len() as f64;
    let mut grads = acc.expect("non-empty");
    grads.values_mut().for_each(|t| t.scale(1.0 / n));
    Ok((total_loss / n, grads))
}

/// Input activations of every quantizable linear layer for one batch.
pub(crate) fn linear_inputs(
    ck: &ModelCheckpoint,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    paths: &[String],
) -> Result<BTreeMap<String, Tensor>> {
    let acts = activations(ck, tokens, batch, seq)?;
    paths
        .iter()
        .map(|p| {
            acts.linear_input(p, &ck.config)
                .map(|t| (p.clone(), t))
                .ok_or_else(|| Error::Parameter(format!("{p} is not a linear layer")))
        })
        .collect()
}
