//! Workspace-backed pipeline: train, sensitivity, assign, eval, bench,
//! report. Every artifact records the hash of the config slice that
//! produced it; a stage whose output is present and current is skipped.

pub mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::alloc::{assign_bits, assign_precision, plan_for_budget, Tiers};
use crate::error::{Error, Result};
use crate::eval::latency::{measure_latency, LatencyResult};
use crate::eval::results::{read_results_csv, results_to_jsonl, write_results_csv};
use crate::eval::{evaluate_tasks, EvalResult, Latency, Method};
use crate::gptq::{gptq_quantize_model, write_report_csv, GptqConfig, GptqOutput};
use crate::hash::config_hash;
use crate::hawq::{model_sensitivities, rank_sensitivities, Granularity, SensitivityReport};
use crate::model::{
    layer_path, load_checkpoint, save_checkpoint, save_checkpoint_with, Batch, Mode, ModelCheckpoint, BLOCK_LINEARS,
};
use crate::quant::{memory_footprint, quantize_weight, rtn_quantize_model, Provenance, QuantPlan, QuantizedWeight};
use crate::report::{build_report, emit, Format, Report};
use crate::trainer::{text_batches, train_observed, write_log_csv, Corpus};
pub use config::{model_name, HawqPlanSpec, PipelineConfig};

pub const MODES: [Mode; 2] = [Mode::Ar, Mode::Diffusion];
const SENSITIVITY_VERSION: u32 = 1;

/// File layout under the workspace directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn checkpoint(&self, mode: Mode) -> PathBuf {
        self.root.join("train").join(format!("{mode}.ckpt"))
    }

    pub fn train_log(&self, mode: Mode) -> PathBuf {
        self.root.join("train").join(format!("{mode}.log.csv"))
    }

    pub fn sensitivity(&self, mode: Mode) -> PathBuf {
        self.root.join("sensitivity").join(format!("{mode}.json"))
    }

    pub fn plan(&self, mode: Mode, spec: &HawqPlanSpec) -> PathBuf {
        self.root
            .join("plans")
            .join(mode.as_str())
            .join(format!("{}.json", spec.slug()))
    }

    pub fn quantized(&self, mode: Mode, name: &str) -> PathBuf {
        self.root.join("quant").join(mode.as_str()).join(format!("{name}.ckpt"))
    }

    pub fn cell(&self, hash: &str) -> PathBuf {
        self.root.join("grid").join("cells").join(format!("{hash}.json"))
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("grid").join("results.csv")
    }

    pub fn latency_csv(&self) -> PathBuf {
        self.root.join("bench").join("latency.csv")
    }

    pub fn bench_lock(&self) -> PathBuf {
        self.root.join("bench").join(".lock")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// What one grid row measures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CellKind {
    Baseline,
    Rtn(u8),
    Gptq(u8),
    Hawq(HawqPlanSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub kind: CellKind,
}

impl Cell {
    pub fn method(&self) -> Method {
        match self.kind {
            CellKind::Baseline => Method::Baseline,
            CellKind::Rtn(_) => Method::Rtn,
            CellKind::Gptq(_) => Method::Gptq,
            CellKind::Hawq(_) => Method::Hawq,
        }
    }

    pub fn bits_or_plan(&self) -> String {
        match &self.kind {
            CellKind::Baseline => "16".into(),
            CellKind::Rtn(b) | CellKind::Gptq(b) => b.to_string(),
            CellKind::Hawq(spec) => spec.name.clone(),
        }
    }
}

/// Stage outcome for progress messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Built,
    Reused,
}

struct BenchLock(PathBuf);

impl BenchLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        ensure_parent(&path)?;
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Contract(format!(
                "another benchmark holds {} (delete it if no bench is running)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for BenchLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub ws: Workspace,
    /// Directory relative corpus paths resolve against.
    pub base_dir: PathBuf,
    /// Accept artifacts produced under a different config.
    pub force: bool,
    progress: Box<dyn Fn(&str)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, base_dir: PathBuf) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ws: Workspace {
                root: cfg.workspace.clone(),
            },
            cfg,
            base_dir,
            force: false,
            progress: Box::new(|_| {}),
        })
    }

    pub fn with_progress(mut self, f: impl Fn(&str) + 'static) -> Self {
        self.progress = Box::new(f);
        self
    }

    fn say(&self, msg: &str) {
        (self.progress)(msg)
    }

    fn check_hash(&self, path: &Path, expected: &str, found: &str) -> Result<()> {
        if expected == found || self.force {
            Ok(())
        } else {
            Err(Error::StaleArtifact {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: found.to_string(),
            })
        }
    }

    fn include_embeddings(&self) -> bool {
        self.cfg.gptq.include_embeddings
    }

    fn group_size(&self) -> usize {
        self.cfg.gptq.group_size
    }

    // Stage hashes. Each covers exactly the config that shapes the artifact.

    pub fn train_hash(&self, mode: Mode) -> String {
        self.cfg.train_config(mode).hash()
    }

    pub fn sensitivity_hash(&self, mode: Mode) -> String {
        config_hash(&(
            "sensitivity",
            self.train_hash(mode),
            self.cfg.sensitivity_config(),
            self.cfg.calibration.mask_ratio,
            self.include_embeddings(),
        ))
    }

    pub fn plan_hash(&self, mode: Mode, spec: &HawqPlanSpec) -> String {
        config_hash(&(
            "plan",
            self.sensitivity_hash(mode),
            self.cfg.allocation.rank_mode,
            spec,
            self.group_size(),
        ))
    }

    fn calibration_hash(&self) -> String {
        config_hash(&("calibration", &self.cfg.calibration, self.cfg.calibration_seed()))
    }

    pub fn cell_hash(&self, cell: &Cell) -> String {
        let method_key = match &cell.kind {
            CellKind::Baseline => String::new(),
            CellKind::Rtn(_) => config_hash(&(self.group_size(), self.include_embeddings())),
            CellKind::Gptq(b) => config_hash(&(
                GptqConfig {
                    bits: *b,
                    ..self.cfg.gptq.clone()
                },
                self.calibration_hash(),
            )),
            CellKind::Hawq(spec) => self.plan_hash(cell.mode, spec),
        };
        config_hash(&(
            "cell",
            self.train_hash(cell.mode),
            &cell.kind,
            method_key,
            &self.cfg.suite,
        ))
    }

    /// Grid rows in report order, without touching the workspace.
    pub fn grid_plan(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for mode in MODES {
            cells.push(Cell {
                mode,
                kind: CellKind::Baseline,
            });
            cells.extend(self.cfg.grid.rtn_bits.iter().map(|&b| Cell {
                mode,
                kind: CellKind::Rtn(b),
            }));
            cells.extend(self.cfg.grid.gptq_bits.iter().map(|&b| Cell {
                mode,
                kind: CellKind::Gptq(b),
            }));
            cells.extend(self.cfg.allocation.plans.iter().map(|p| Cell {
                mode,
                kind: CellKind::Hawq(p.clone()),
            }));
        }
        cells
    }

    /// One line per grid row: model, mode, method, bits or plan, cell hash.
    pub fn dry_run(&self) -> Vec<String> {
        self.grid_plan()
            .iter()
            .map(|c| {
                format!(
                    "{}\t{}\t{}\t{}\t{}",
                    model_name(c.mode),
                    c.mode,
                    c.method(),
                    c.bits_or_plan(),
                    self.cell_hash(c)
                )
            })
            .collect()
    }

    fn corpus_text(&self) -> Result<Vec<u8>> {
        Ok(Corpus::load(&self.cfg.train.corpus, Some(&self.base_dir))?
            .text()
            .to_vec())
    }

    fn calibration_batches(&self, mode: Mode) -> Result<Vec<Batch>> {
        let c = &self.cfg.calibration;
        text_batches(
            &self.corpus_text()?,
            mode,
            c.n_batches,
            c.batch_size,
            c.mask_ratio,
            self.cfg.calibration_seed(),
        )
    }

    fn sensitivity_batches(&self, mode: Mode) -> Result<Vec<Batch>> {
        let s = self.cfg.sensitivity_config();
        text_batches(
            &self.corpus_text()?,
            mode,
            s.n_batches,
            s.batch_size,
            self.cfg.calibration.mask_ratio,
            s.seed,
        )
    }

    // ---- train ----

    /// Trained checkpoint for `mode`, built if missing or out of date.
    pub fn train(&self, mode: Mode) -> Result<(ModelCheckpoint, Outcome)> {
        let path = self.ws.checkpoint(mode);
        let expected = self.train_hash(mode);
        if path.exists() {
            let ck = load_checkpoint(&path)?;
            if ck.meta.config_hash == expected {
                return Ok((ck, Outcome::Reused));
            }
        }
        self.say(&format!("training {}", model_name(mode)));
        let cfg = self.cfg.train_config(mode);
        let every = (cfg.steps / 10).max(1);
        let out = train_observed(&cfg, Some(&self.base_dir), |step, loss| {
            if step % every == 0 {
                self.say(&format!("  {mode} step {step} loss {loss:.4}"));
            }
        })?;
        ensure_parent(&path)?;
        save_checkpoint(&out.checkpoint, &path)?;
        write_log_csv(&out.log, &self.ws.train_log(mode))?;
        Ok((out.checkpoint, Outcome::Built))
    }

    /// Checkpoint as an input to a later stage.
    pub fn checkpoint(&self, mode: Mode) -> Result<ModelCheckpoint> {
        let path = self.ws.checkpoint(mode);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: "train",
            });
        }
        let ck = load_checkpoint(&path)?;
        self.check_hash(&path, &self.train_hash(mode), &ck.meta.config_hash)?;
        Ok(ck)
    }

    // ---- sensitivity ----

    pub fn sensitivity(&self, mode: Mode) -> Result<(SensitivityReport, Outcome)> {
        let path = self.ws.sensitivity(mode);
        let expected = self.sensitivity_hash(mode);
        if path.exists() {
            let rep = SensitivityReport::load_json(&path)?;
            if rep.config_hash == expected {
                return Ok((rep, Outcome::Reused));
            }
        }
        self.say(&format!("sensitivity {}", model_name(mode)));
        let mut ck = self.checkpoint(mode)?;
        let batches = self.sensitivity_batches(mode)?;
        let cfg = self.cfg.sensitivity_config();
        let records = model_sensitivities(&mut ck, &batches, &cfg, self.include_embeddings())?;
        let rep = SensitivityReport {
            version: SENSITIVITY_VERSION,
            config: cfg,
            config_hash: expected,
            records,
        };
        ensure_parent(&path)?;
        rep.save_json(&path)?;
        rep.save_csv(&path.with_extension("csv"))?;
        Ok((rep, Outcome::Built))
    }

    fn sensitivity_input(&self, mode: Mode) -> Result<SensitivityReport> {
        let path = self.ws.sensitivity(mode);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: "sensitivity",
            });
        }
        let rep = SensitivityReport::load_json(&path)?;
        self.check_hash(&path, &self.sensitivity_hash(mode), &rep.config_hash)?;
        Ok(rep)
    }

    // ---- assign ----

    /// Plan for one configured split or budget.
    pub fn build_plan(&self, ck: &ModelCheckpoint, rep: &SensitivityReport, spec: &HawqPlanSpec) -> Result<QuantPlan> {
        let ranking = rank_sensitivities(&rep.records, self.cfg.allocation.rank_mode)?;
        let gs = self.group_size();
        let incl = self.include_embeddings();
        let mut plan = match rep.config.granularity {
            Granularity::PerModule => match (spec.ratios, spec.budget_bits) {
                (Some(r), _) => assign_precision(&ranking, r, spec.tiers.unwrap_or_default(), gs, incl)?,
                (None, Some(target)) => {
                    let sizes = ranking
                        .iter()
                        .map(|p| Ok(ck.param(p)?.len()))
                        .collect::<Result<Vec<usize>>>()?;
                    plan_for_budget(&ranking, &sizes, target, gs, incl)?.0
                }
                (None, None) => return Err(Error::Parameter(format!("plan {} has no split", spec.name))),
            },
            Granularity::PerBlock => {
                if incl {
                    return Err(Error::Parameter(
                        "per-block plans do not cover the embeddings; disable include_embeddings".into(),
                    ));
                }
                let ratios = spec.ratios.ok_or_else(|| {
                    Error::Parameter(format!(
                        "plan {}: per-block ranking supports split ratios only",
                        spec.name
                    ))
                })?;
                let bits = assign_bits(ranking.len(), &ratios, spec.tiers.unwrap_or_default())?;
                let mut modules = BTreeMap::new();
                for (block, b) in ranking.iter().zip(bits) {
                    let layer: usize = block
                        .strip_prefix("layers.")
                        .and_then(|l| l.parse().ok())
                        .ok_or_else(|| Error::Format {
                            what: "sensitivity report",
                            detail: format!("{block} is not a block name"),
                        })?;
                    for m in BLOCK_LINEARS {
                        modules.insert(layer_path(layer, m), b);
                    }
                }
                QuantPlan {
                    group_size: gs,
                    provenance: Provenance::HawqSplit,
                    include_embeddings: false,
                    modules,
                    ratios: Some(ratios),
                    config_hash: None,
                }
            }
        };
        plan.check_coverage(ck)?;
        plan.config_hash = Some(self.plan_hash(ck.config.mode, spec));
        Ok(plan)
    }

    pub fn assign(&self, mode: Mode) -> Result<Vec<(QuantPlan, Outcome)>> {
        let mut out = Vec::new();
        let mut inputs: Option<(ModelCheckpoint, SensitivityReport)> = None;
        for spec in &self.cfg.allocation.plans {
            let path = self.ws.plan(mode, spec);
            let expected = self.plan_hash(mode, spec);
            if path.exists() {
                let plan = QuantPlan::load(&path)?;
                if plan.config_hash.as_deref() == Some(expected.as_str()) {
                    out.push((plan, Outcome::Reused));
                    continue;
                }
            }
            if inputs.is_none() {
                inputs = Some((self.checkpoint(mode)?, self.sensitivity_input(mode)?));
            }
            let (ck, rep) = inputs.as_ref().expect("loaded above");
            let plan = self.build_plan(ck, rep, spec)?;
            ensure_parent(&path)?;
            plan.save(&path)?;
            out.push((plan, Outcome::Built));
        }
        Ok(out)
    }

    fn plan_input(&self, mode: Mode, spec: &HawqPlanSpec) -> Result<QuantPlan> {
        let path = self.ws.plan(mode, spec);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: "assign",
            });
        }
        let plan = QuantPlan::load(&path)?;
        let found = plan.config_hash.clone().unwrap_or_default();
        self.check_hash(&path, &self.plan_hash(mode, spec), &found)?;
        Ok(plan)
    }

    // ---- quantize ----

    /// Quantized checkpoint for a grid cell, its plan, and the quantized
    /// weights when the method produces them.
    pub fn materialize(
        &self,
        ck: &ModelCheckpoint,
        cell: &Cell,
        calib: &mut Option<Vec<Batch>>,
    ) -> Result<(
        ModelCheckpoint,
        QuantPlan,
        Vec<(String, QuantizedWeight)>,
        Option<GptqOutput>,
    )> {
        let gs = self.group_size();
        let incl = self.include_embeddings();
        match &cell.kind {
            CellKind::Baseline => Ok((ck.clone(), QuantPlan::uniform(ck, 16, gs, incl)?, Vec::new(), None)),
            CellKind::Rtn(b) => {
                let plan = QuantPlan::uniform(ck, *b, gs, incl)?;
                let q = rtn_quantize_model(ck, &plan)?;
                let weights = rtn_weights(ck, &plan)?;
                Ok((q, plan, weights, None))
            }
            CellKind::Hawq(spec) => {
                let plan = self.plan_input(cell.mode, spec)?;
                let q = rtn_quantize_model(ck, &plan)?;
                let weights = rtn_weights(ck, &plan)?;
                Ok((q, plan, weights, None))
            }
            CellKind::Gptq(b) => {
                if calib.is_none() {
                    *calib = Some(self.calibration_batches(cell.mode)?);
                }
                let cfg = GptqConfig {
                    bits: *b,
                    ..self.cfg.gptq.clone()
                };
                let out = gptq_quantize_model(ck, calib.as_ref().expect("set above"), &cfg)?;
                let plan = QuantPlan::uniform(ck, *b, gs, incl)?;
                Ok((out.checkpoint.clone(), plan, out.weights.clone(), Some(out)))
            }
        }
    }

    /// Writes one quantized checkpoint (with scales and codes), its plan
    /// and, for GPTQ, the per-layer report.
    pub fn quantize(&self, mode: Mode, kind: CellKind) -> Result<PathBuf> {
        let ck = self.checkpoint(mode)?;
        let cell = Cell { mode, kind };
        let mut calib = None;
        let (mut q, mut plan, weights, gptq) = self.materialize(&ck, &cell, &mut calib)?;
        let name = format!("{}-{}", cell.method(), cell.bits_or_plan().replace('/', "_"));
        let path = self.ws.quantized(mode, &name);
        q.meta.note = format!("{} {}", cell.method(), cell.bits_or_plan());
        plan.config_hash = Some(self.cell_hash(&cell));
        ensure_parent(&path)?;
        save_checkpoint_with(&q, &weights, &path)?;
        plan.save(&path.with_extension("plan.json"))?;
        if let Some(g) = gptq {
            write_report_csv(&g.report, &path.with_extension("layers.csv"))?;
        }
        Ok(path)
    }

    // ---- eval ----

    fn run_cell(&self, ck: &ModelCheckpoint, cell: &Cell, calib: &mut Option<Vec<Batch>>) -> Result<EvalResult> {
        let (q, plan, _, _) = self.materialize(ck, cell, calib)?;
        let fp = memory_footprint(&plan, &q)?;
        let scores = evaluate_tasks(&q, &self.cfg.suite)?;
        Ok(EvalResult {
            model: model_name(cell.mode),
            mode: cell.mode,
            method: cell.method(),
            bits_or_plan: cell.bits_or_plan(),
            scores,
            latency: None,
            raw_bits: fp.raw_avg_bits,
            eff_bits: fp.effective_avg_bits,
            seed: self.cfg.seed,
            config_hash: self.cell_hash(cell),
            error: None,
        })
    }

    fn failed_cell(&self, ck: &ModelCheckpoint, cell: &Cell, err: &Error) -> EvalResult {
        let bits = match &cell.kind {
            CellKind::Baseline => Some(16),
            CellKind::Rtn(b) | CellKind::Gptq(b) => Some(*b),
            CellKind::Hawq(_) => None,
        };
        let fp = bits
            .and_then(|b| QuantPlan::uniform(ck, b, self.group_size(), self.include_embeddings()).ok())
            .and_then(|p| memory_footprint(&p, ck).ok());
        EvalResult {
            model: model_name(cell.mode),
            mode: cell.mode,
            method: cell.method(),
            bits_or_plan: cell.bits_or_plan(),
            scores: Default::default(),
            latency: None,
            raw_bits: fp.map(|f| f.raw_avg_bits).unwrap_or(f64::NAN),
            eff_bits: fp.map(|f| f.effective_avg_bits).unwrap_or(f64::NAN),
            seed: self.cfg.seed,
            config_hash: self.cell_hash(cell),
            error: Some(err.to_string()),
        }
    }

    /// Scores every grid row, reusing cached cells. A cell that fails is
    /// recorded with its error and the grid carries on; missing or stale
    /// inputs abort.
    pub fn eval(&self) -> Result<Vec<EvalResult>> {
        let mut results = Vec::new();
        for mode in MODES {
            let mut ck: Option<ModelCheckpoint> = None;
            let mut calib = None;
            for cell in self.grid_plan().into_iter().filter(|c| c.mode == mode) {
                let hash = self.cell_hash(&cell);
                let cache = self.ws.cell(&hash);
                if cache.exists() {
                    let text = std::fs::read_to_string(&cache).map_err(|e| Error::io(&cache, e))?;
                    let r: EvalResult = serde_json::from_str(&text).map_err(|e| Error::Format {
                        what: "cached grid cell",
                        detail: e.to_string(),
                    })?;
                    results.push(r);
                    continue;
                }
                if ck.is_none() {
                    ck = Some(self.checkpoint(mode)?);
                }
                let base = ck.as_ref().expect("loaded above");
                self.say(&format!(
                    "eval {} {} {}",
                    model_name(mode),
                    cell.method(),
                    cell.bits_or_plan()
                ));
                let r = match self.run_cell(base, &cell, &mut calib) {
                    Ok(r) => r,
                    Err(e @ (Error::MissingArtifact { .. } | Error::StaleArtifact { .. } | Error::Io { .. })) => {
                        return Err(e)
                    }
                    Err(e) => self.failed_cell(base, &cell, &e),
                };
                write(&cache, serde_json::to_string_pretty(&r).expect("serializable") + "\n")?;
                results.push(r);
            }
        }
        write_results_csv(&results, &self.ws.results_csv())?;
        write(
            &self.ws.results_csv().with_extension("jsonl"),
            results_to_jsonl(&results),
        )?;
        Ok(results)
    }

    fn results_input(&self) -> Result<Vec<EvalResult>> {
        let path = self.ws.results_csv();
        if !path.exists() {
            return Err(Error::MissingArtifact { path, producer: "eval" });
        }
        let results = read_results_csv(&path)?;
        let expected: Vec<String> = self.grid_plan().iter().map(|c| self.cell_hash(c)).collect();
        let found: Vec<String> = results.iter().map(|r| r.config_hash.clone()).collect();
        if expected != found {
            self.check_hash(&path, &config_hash(&expected), &config_hash(&found))?;
        }
        Ok(results)
    }

    // ---- bench ----

    /// Times one unit of work for every successful grid cell under the
    /// configured warm-up / timed-run protocol. Serialized by a lock file.
    pub fn bench(&self) -> Result<Vec<(EvalResult, LatencyResult)>> {
        let results = self.results_input()?;
        let _lock = BenchLock::acquire(self.ws.bench_lock())?;
        let cells: BTreeMap<String, Cell> = self.grid_plan().into_iter().map(|c| (self.cell_hash(&c), c)).collect();
        let mut out = Vec::new();
        let mut cks: BTreeMap<Mode, (ModelCheckpoint, Option<Vec<Batch>>)> = BTreeMap::new();
        for r in results.into_iter().filter(|r| !r.failed()) {
            let Some(cell) = cells.get(&r.config_hash) else {
                continue;
            };
            if !cks.contains_key(&cell.mode) {
                cks.insert(cell.mode, (self.checkpoint(cell.mode)?, None));
            }
            let (ck, calib) = cks.get_mut(&cell.mode).expect("inserted above");
            let (q, _, _, _) = self.materialize(ck, cell, calib)?;
            self.say(&format!("bench {} {}", r.model, r.label()));
            let lat = measure_latency(&q, &self.cfg.latency)?;
            out.push((r, lat));
        }
        write_latency_csv(&out, &self.ws.latency_csv())?;
        Ok(out)
    }

    // ---- report ----

    /// Grid results with any benchmark latencies merged in.
    pub fn merged_results(&self) -> Result<Vec<EvalResult>> {
        let mut results = self.results_input()?;
        let path = self.ws.latency_csv();
        if path.exists() {
            let lat = read_latency_csv(&path)?;
            for r in &mut results {
                if let Some(l) = lat.get(&r.config_hash) {
                    r.latency = Some(*l);
                }
            }
        }
        Ok(results)
    }

    pub fn report(&self) -> Result<(Report, Vec<PathBuf>)> {
        let report = build_report(&self.merged_results()?)?;
        let files = emit(&report, &self.ws.report_dir(), &Format::ALL)?;
        Ok((report, files))
    }

    // ---- reproduce ----

    /// Every stage in order. With everything cached this runs no forward
    /// passes at all.
    pub fn reproduce(&self, with_bench: bool) -> Result<(Report, Vec<PathBuf>)> {
        for mode in MODES {
            let (_, o) = self.train(mode)?;
            self.say(&format!("train {mode}: {o:?}"));
        }
        for mode in MODES {
            let (_, o) = self.sensitivity(mode)?;
            self.say(&format!("sensitivity {mode}: {o:?}"));
            self.assign(mode)?;
        }
        self.eval()?;
        if with_bench {
            self.bench()?;
        }
        self.report()
    }
}

fn rtn_weights(ck: &ModelCheckpoint, plan: &QuantPlan) -> Result<Vec<(String, QuantizedWeight)>> {
    plan.modules
        .iter()
        .filter(|(_, &b)| b != 16)
        .map(|(p, _)| {
            Ok((
                p.clone(),
                quantize_weight(ck.param(p)?, plan.spec_for(p).expect("planned"))?,
            ))
        })
        .collect()
}

const LATENCY_HEADER: [&str; 11] = [
    "config_hash",
    "model",
    "method",
    "bits_or_plan",
    "unit_of_work",
    "seq_len",
    "warmup_runs",
    "timed_runs",
    "mean_ms",
    "std_ms",
    "coarse_timer",
];

fn latency_err(e: csv::Error) -> Error {
    Error::Format {
        what: "latency CSV",
        detail: e.to_string(),
    }
}

pub fn write_latency_csv(rows: &[(EvalResult, LatencyResult)], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(latency_err)?;
    w.write_record(LATENCY_HEADER).map_err(latency_err)?;
    for (r, l) in rows {
        w.write_record([
            r.config_hash.clone(),
            r.model.clone(),
            r.method.to_string(),
            r.bits_or_plan.clone(),
            l.unit_of_work.to_string(),
            l.seq_len.to_string(),
            l.warmup_runs.to_string(),
            l.timed_runs.to_string(),
            l.mean_ms.to_string(),
            l.std_ms.to_string(),
            l.coarse_timer.to_string(),
        ])
        .map_err(latency_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean and standard deviation per cell hash.
pub fn read_latency_csv(path: &Path) -> Result<BTreeMap<String, Latency>> {
    let mut rd = csv::Reader::from_path(path).map_err(latency_err)?;
    let mut out = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(latency_err)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i).unwrap_or("").parse().map_err(|_| Error::Format {
                what: "latency CSV",
                detail: format!("bad number in column {}", LATENCY_HEADER[i]),
            })
        };
        out.insert(
            rec.get(0).unwrap_or("").to_string(),
            Latency {
                mean_ms: num(8)?,
                std_ms: num(9)?,
            },
        );
    }
    Ok(out)
}

/// Ranking file for the standalone `assign`: one module path per line,
/// most sensitive first.
pub fn read_ranking(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn parse_tiers(s: &str) -> Result<Tiers> {
    match s {
        "16/8/4" | "16-8-4" => Ok(Tiers::SIXTEEN_EIGHT_FOUR),
        "8/4" | "8-4" => Ok(Tiers::EIGHT_FOUR),
        other => Err(Error::Parameter(format!("unknown tiers {other:?}; use 16/8/4 or 8/4"))),
    }
}
