//! Hessian sensitivity by sparse power iteration on finite-difference
//! Hessian-vector products.
//!
//! For a module with weights `W` the product `Hv` is approximated by
//! `(∇L(W + εv) − ∇L(W)) / ε`. The direction `v` starts as a random sparse
//! unit vector; every iteration projects `Hv` back onto that initial support
//! before renormalizing, so the cost stays proportional to the support and
//! the estimate is the top eigenvalue of the Hessian restricted to it.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{layer_path, mean_loss_and_grads, Batch, ModelCheckpoint, BLOCK_LINEARS};
use crate::numerics::{sample_sparse_direction, Rng, Tensor};

/// A loss whose parameters can be perturbed and differentiated by name.
pub trait SecondOrderObjective {
    fn parameter(&self, path: &str) -> Result<&Tensor>;
    fn parameter_mut(&mut self, path: &str) -> Result<&mut Tensor>;
    /// Gradient of the loss at the current parameters, one tensor per path.
    fn gradients(&mut self, paths: &[String]) -> Result<Vec<Tensor>>;
}

/// Mean loss of a checkpoint over a fixed set of batches.
pub struct ModelObjective<'a> {
    pub checkpoint: &'a mut ModelCheckpoint,
    pub batches: &'a [Batch],
    /// Constant factor applied to the loss.
    pub loss_scale: f64,
}

impl<'a> ModelObjective<'a> {
    pub fn new(checkpoint: &'a mut ModelCheckpoint, batches: &'a [Batch]) -> Self {
        Self {
            checkpoint,
            batches,
            loss_scale: 1.0,
        }
    }
}

impl SecondOrderObjective for ModelObjective<'_> {
    fn parameter(&self, path: &str) -> Result<&Tensor> {
        self.checkpoint.param(path)
    }

    fn parameter_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.checkpoint.param_mut(path)
    }

    fn gradients(&mut self, paths: &[String]) -> Result<Vec<Tensor>> {
        let (_, mut grads) = mean_loss_and_grads(self.checkpoint, self.batches)?;
        paths
            .iter()
            .map(|p| {
                let mut g = grads
                    .remove(p)
                    .ok_or_else(|| Error::Parameter(format!("no parameter {p}")))?;
                if self.loss_scale != 1.0 {
                    g.scale(self.loss_scale);
                }
                Ok(g)
            })
            .collect()
    }
}

/// `L(w) = c · ½ wᵀAw` for named vectors, each with its own matrix.
#[derive(Debug, Clone)]
pub struct QuadraticProbe {
    names: Vec<String>,
    matrices: Vec<Tensor>,
    points: Vec<Tensor>,
    pub loss_scale: f64,
}

impl QuadraticProbe {
    /// One block per `(name, A, w)`; the full Hessian is block-diagonal.
    pub fn new(blocks: Vec<(String, Tensor, Tensor)>) -> Result<Self> {
        let mut probe = Self {
            names: Vec::new(),
            matrices: Vec::new(),
            points: Vec::new(),
            loss_scale: 1.0,
        };
        for (name, a, w) in blocks {
            let (r, c) = a.dims2()?;
            if r != c || w.len() != r {
                return Err(Error::Dimension(format!(
                    "{name}: matrix {r}x{c} for {} values",
                    w.len()
                )));
            }
            probe.names.push(name);
            probe.matrices.push(a);
            probe.points.push(w);
        }
        Ok(probe)
    }

    fn index(&self, path: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == path)
            .ok_or_else(|| Error::Parameter(format!("no parameter {path}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl SecondOrderObjective for QuadraticProbe {
    fn parameter(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.points[self.index(path)?])
    }

    fn parameter_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        let i = self.index(path)?;
        Ok(&mut self.points[i])
    }

    fn gradients(&mut self, paths: &[String]) -> Result<Vec<Tensor>> {
        paths
            .iter()
            .map(|p| {
                let i = self.index(p)?;
                let (a, w) = (&self.matrices[i], &self.points[i]);
                let n = w.len();
                let g = (0..n)
                    .map(|r| self.loss_scale * a.row(r).iter().zip(w.data()).map(|(x, y)| x * y).sum::<f64>())
                    .collect();
                Ok(Tensor::vector(g))
            })
            .collect()
    }
}

/// How the finite-difference step is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsPolicy {
    /// `ε = factor · (1 + max|W|)`.
    Relative(f64),
    Fixed(f64),
}

impl Default for EpsPolicy {
    fn default() -> Self {
        EpsPolicy::Relative(1e-3)
    }
}

impl EpsPolicy {
    pub fn step(&self, weights: &[&Tensor]) -> f64 {
        match *self {
            EpsPolicy::Relative(f) => f * (1.0 + weights.iter().map(|w| w.max_abs()).fold(0.0, f64::max)),
            EpsPolicy::Fixed(e) => e,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            EpsPolicy::Relative(f) | EpsPolicy::Fixed(f) => f,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "finite-difference step must be positive: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerModule,
    /// One score per transformer block over all of its linear layers.
    PerBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub rho: f64,
    pub n_power_iters: usize,
    pub eps: EpsPolicy,
    /// Calibration batches whose gradients are averaged.
    pub n_batches: usize,
    pub batch_size: usize,
    pub granularity: Granularity,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            n_power_iters: 5,
            eps: EpsPolicy::default(),
            n_batches: 8,
            batch_size: 8,
            granularity: Granularity::PerModule,
            seed: 0,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Parameter(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.n_power_iters < 1 {
            return Err(Error::Parameter("n_power_iters must be at least 1".into()));
        }
        if self.n_batches < 1 || self.batch_size < 1 {
            return Err(Error::Parameter("need at least one calibration batch".into()));
        }
        self.eps.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub path: String,
    pub lambda: f64,
    pub n_params: usize,
    pub sensitivity_raw: f64,
    pub sensitivity_normalized: f64,
    pub iters_used: usize,
    pub converged: bool,
    pub eps: f64,
    /// `‖Hv‖` after each iteration.
    pub trajectory: Vec<f64>,
}

fn read_params<O: SecondOrderObjective + ?Sized>(obj: &O, paths: &[String]) -> Result<Vec<Tensor>> {
    paths.iter().map(|p| obj.parameter(p).cloned()).collect()
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// `(∇L(W + εv) − g₀) / ε` over the concatenated parameters of `paths`,
/// restoring the original weights bit for bit before returning.
fn hvp_with_base<O: SecondOrderObjective + ?Sized>(
    obj: &mut O,
    paths: &[String],
    v: &[f64],
    eps: f64,
    base: &[f64],
) -> Result<Vec<f64>> {
    let originals = read_params(obj, paths)?;
    let mut offset = 0;
    for (p, orig) in paths.iter().zip(&originals) {
        let w = obj.parameter_mut(p)?;
        for (x, dv) in w.data_mut().iter_mut().zip(&v[offset..offset + orig.len()]) {
            *x += eps * dv;
        }
        offset += orig.len();
    }
    let perturbed = obj.gradients(paths);
    for (p, orig) in paths.iter().zip(originals) {
        *obj.parameter_mut(p)? = orig;
    }
    let g_plus = flatten(&perturbed?);
    let hv: Vec<f64> = g_plus.iter().zip(base).map(|(a, b)| (a - b) / eps).collect();
    if hv.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite Hessian-vector product with eps {eps}"
        )));
    }
    Ok(hv)
}

/// Finite-difference Hessian-vector product for the parameter at `path`.
pub fn hvp_finite_diff<O: SecondOrderObjective + ?Sized>(
    obj: &mut O,
    path: &str,
    v: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let shape = obj.parameter(path)?.shape().to_vec();
    if v.shape() != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "direction {:?} for parameter {shape:?}",
            v.shape()
        )));
    }
    if (v.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "direction must have unit norm, got {}",
            v.norm()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let paths = [path.to_string()];
    let base = flatten(&obj.gradients(&paths)?);
    if base.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at {path} (eps {eps})")));
    }
    Tensor::new(shape, hvp_with_base(obj, &paths, v.data(), eps, &base)?)
}

fn direction_seed(seed: u64, name: &str) -> Rng {
    let d = Sha256::digest(name.as_bytes());
    Rng::new(seed).fork(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

/// Power iteration over the concatenated parameters of `paths`, reported
/// under `name`.
pub fn power_iteration_group<O: SecondOrderObjective + ?Sized>(
    obj: &mut O,
    name: &str,
    paths: &[String],
    cfg: &SensitivityConfig,
) -> Result<SensitivityRecord> {
    cfg.validate()?;
    let weights = read_params(obj, paths)?;
    let n: usize = weights.iter().map(Tensor::len).sum();
    if n == 0 {
        return Err(Error::Parameter(format!("{name} has no parameters")));
    }
    let eps = cfg.eps.step(&weights.iter().collect::<Vec<_>>());
    let base = flatten(&obj.gradients(paths)?);
    if base.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at {name} (eps {eps})")));
    }
    let mut rng = direction_seed(cfg.seed, name);
    let mut v = sample_sparse_direction(&mut rng, n, cfg.rho)?.into_data();
    let support: Vec<usize> = (0..n).filter(|&i| v[i] != 0.0).collect();

    let mut trajectory = Vec::with_capacity(cfg.n_power_iters);
    for _ in 0..cfg.n_power_iters {
        let hv = hvp_with_base(obj, paths, &v, eps, &base).map_err(|e| e.context(name.to_string()))?;
        let norm = support.iter().map(|&i| hv[i] * hv[i]).sum::<f64>().sqrt();
        trajectory.push(norm);
        if norm == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x = 0.0);
        for &i in &support {
            v[i] = hv[i] / norm;
        }
    }
    let lambda = *trajectory.last().expect("at least one iteration");
    let converged = lambda == 0.0
        || (trajectory.len() >= 2 && {
            let prev = trajectory[trajectory.len() - 2];
            prev > 0.0 && ((lambda - prev) / prev).abs() < 1e-2
        });
    Ok(SensitivityRecord {
        path: name.to_string(),
        lambda,
        n_params: n,
        sensitivity_raw: lambda,
        sensitivity_normalized: lambda / n as f64,
        iters_used: trajectory.len(),
        converged,
        eps,
        trajectory,
    })
}

/// Sensitivity of the single parameter tensor at `path`.
pub fn power_iteration_sensitivity<O: SecondOrderObjective + ?Sized>(
    obj: &mut O,
    path: &str,
    cfg: &SensitivityConfig,
) -> Result<SensitivityRecord> {
    power_iteration_group(obj, path, &[path.to_string()], cfg)
}

/// Scores for every module (or block) of a checkpoint. The checkpoint is
/// perturbed during the run and restored bit for bit.
pub fn model_sensitivities(
    ck: &mut ModelCheckpoint,
    batches: &[Batch],
    cfg: &SensitivityConfig,
    include_embeddings: bool,
) -> Result<Vec<SensitivityRecord>> {
    cfg.validate()?;
    let units: Vec<(String, Vec<String>)> = match cfg.granularity {
        Granularity::PerModule => ck
            .quantizable_paths(include_embeddings)
            .into_iter()
            .map(|p| (p.clone(), vec![p]))
            .collect(),
        Granularity::PerBlock => (0..ck.config.n_layers)
            .map(|l| {
                (
                    format!("layers.{l}"),
                    BLOCK_LINEARS.iter().map(|m| layer_path(l, m)).collect(),
                )
            })
            .collect(),
    };
    let mut obj = ModelObjective::new(ck, batches);
    units
        .iter()
        .map(|(name, paths)| power_iteration_group(&mut obj, name, paths, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// `S = λ`.
    #[default]
    Raw,
    /// `S = λ / n`.
    Normalized,
}

/// Module names by descending sensitivity; equal scores fall back to
/// lexicographic name order.
pub fn rank_sensitivities(records: &[SensitivityRecord], mode: RankMode) -> Result<Vec<String>> {
    if records.is_empty() {
        return Err(Error::Contract("no sensitivity records to rank".into()));
    }
    let key = |r: &SensitivityRecord| match mode {
        RankMode::Raw => r.sensitivity_raw,
        RankMode::Normalized => r.sensitivity_normalized,
    };
    let mut sorted: Vec<&SensitivityRecord> = records.iter().collect();
    sorted.sort_by(|a, b| match key(b).total_cmp(&key(a)) {
        Ordering::Equal => a.path.cmp(&b.path),
        o => o,
    });
    Ok(sorted.into_iter().map(|r| r.path.clone()).collect())
}

/// Sensitivity file: the records and the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub version: u32,
    pub config: SensitivityConfig,
    pub config_hash: String,
    pub records: Vec<SensitivityRecord>,
}

impl SensitivityReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "sensitivity report",
            detail: e.to_string(),
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let fmt_err = |e: csv::Error| Error::Format {
            what: "sensitivity CSV",
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
        w.write_record([
            "path",
            "lambda",
            "n_params",
            "sensitivity_raw",
            "sensitivity_normalized",
            "iters_used",
            "converged",
            "eps",
        ])
        .map_err(fmt_err)?;
        for r in &self.records {
            w.write_record([
                r.path.clone(),
                r.lambda.to_string(),
                r.n_params.to_string(),
                r.sensitivity_raw.to_string(),
                r.sensitivity_normalized.to_string(),
                r.iters_used.to_string(),
                r.converged.to_string(),
                r.eps.to_string(),
            ])
            .map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, lambda: f64, n: usize) -> SensitivityRecord {
        SensitivityRecord {
            path: path.into(),
            lambda,
            n_params: n,
            sensitivity_raw: lambda,
            sensitivity_normalized: lambda / n as f64,
            iters_used: 1,
            converged: true,
            eps: 1e-3,
            trajectory: vec![lambda],
        }
    }

    #[test]
    fn raw_ranking() {
        let r = [rec("a", 5.0, 1), rec("b", 1.0, 1), rec("c", 3.0, 1)];
        assert_eq!(rank_sensitivities(&r, RankMode::Raw).unwrap(), ["a", "c", "b"]);
    }

    #[test]
    fn normalized_ranking() {
        let r = [rec("a", 4.0, 10), rec("b", 4.0, 2)];
        assert_eq!(rank_sensitivities(&r, RankMode::Normalized).unwrap(), ["b", "a"]);
    }

    #[test]
    fn ties_fall_back_to_path_order() {
        let r = [rec("z", 1.0, 1), rec("m", 1.0, 1), rec("a", 1.0, 1)];
        assert_eq!(rank_sensitivities(&r, RankMode::Raw).unwrap(), ["a", "m", "z"]);
        assert!(rank_sensitivities(&[], RankMode::Raw).is_err());
    }
}
