//! Tables, frontiers and charts built from grid results.

pub mod pareto;
pub mod svg;
pub mod table;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::results::results_to_csv;
use crate::eval::{EvalResult, Method};
use crate::model::Mode;
pub use pareto::{pareto_frontier, Frontier, ParetoPoint};
use svg::{Chart, Overlay, Series, SeriesPoint};
pub use table::{build_degradation_table, fmt3, DegradationTable, Pair};

pub const REPORT_VERSION: u32 = 1;

/// Score drop (in score units) past which a lower width beating a higher
/// one is called out.
pub const TREND_TOLERANCE: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFrontier {
    pub model: String,
    pub mode: Mode,
    pub frontier: Frontier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub results: Vec<EvalResult>,
    pub table: DegradationTable,
    pub frontiers: Vec<ModelFrontier>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Markdown,
    Svg,
}

impl Format {
    pub const ALL: [Format; 4] = [Format::Csv, Format::Json, Format::Markdown, Format::Svg];
}

fn models(results: &[EvalResult]) -> Vec<(String, Mode)> {
    let mut out: Vec<(String, Mode)> = Vec::new();
    for r in results {
        if !out.iter().any(|(m, _)| *m == r.model) {
            out.push((r.model.clone(), r.mode));
        }
    }
    out
}

fn find<'a>(results: &'a [EvalResult], model: &str, method: Method, bits: &str) -> Option<&'a EvalResult> {
    results
        .iter()
        .find(|r| r.model == model && r.method == method && r.bits_or_plan == bits && !r.failed())
}

/// Trend observations: non-monotone degradation beyond the tolerance, and
/// which model loses less at 3 and 4 bits. Reported, never enforced.
pub fn trend_notes(results: &[EvalResult]) -> Vec<String> {
    let mut notes = Vec::new();
    let ms = models(results);
    for (model, _) in &ms {
        for method in [Method::Rtn, Method::Gptq] {
            let mut ladder: Vec<(String, f64)> = Vec::new();
            if let Some(b) = results
                .iter()
                .find(|r| r.model == *model && r.method == Method::Baseline && !r.failed())
            {
                ladder.push(("16".into(), b.aggregate().unwrap_or(0.0)));
            }
            for bits in ["8", "4", "3", "2"] {
                if let Some(r) = find(results, model, method, bits) {
                    ladder.push((bits.into(), r.aggregate().unwrap_or(0.0)));
                }
            }
            for w in ladder.windows(2) {
                let ((hi, s_hi), (lo, s_lo)) = (&w[0], &w[1]);
                if s_lo - s_hi > TREND_TOLERANCE {
                    notes.push(format!(
                        "{model}/{method}: {lo}-bit scores {} against {} at {hi} bits (non-monotone)",
                        fmt3(*s_lo),
                        fmt3(*s_hi)
                    ));
                }
            }
        }
    }
    let by_mode = |mode: Mode| ms.iter().find(|(_, m)| *m == mode).map(|(n, _)| n.clone());
    if let (Some(ar), Some(diff)) = (by_mode(Mode::Ar), by_mode(Mode::Diffusion)) {
        let base = |model: &str| find(results, model, Method::Baseline, "16").and_then(EvalResult::aggregate);
        for method in [Method::Gptq, Method::Rtn] {
            for bits in ["4", "3"] {
                let drop = |model: &str| Some(base(model)? - find(results, model, method, bits)?.aggregate()?);
                if let (Some(da), Some(dd)) = (drop(&ar), drop(&diff)) {
                    let verdict = if dd < da {
                        "diffusion more robust"
                    } else {
                        "diffusion not more robust"
                    };
                    notes.push(format!(
                        "{method} {bits}-bit: drop from baseline {} diffusion vs {} autoregressive ({verdict})",
                        fmt3(dd),
                        fmt3(da)
                    ));
                }
            }
        }
    }
    notes
}

pub fn build_report(results: &[EvalResult]) -> Result<Report> {
    let table = build_degradation_table(results)?;
    let frontiers = models(results)
        .into_iter()
        .map(|(model, mode)| {
            let points: Vec<ParetoPoint> = results
                .iter()
                .filter(|r| r.model == model)
                .filter_map(|r| Some(ParetoPoint::new(r.label(), r.eff_bits, r.aggregate()?)))
                .collect();
            ModelFrontier {
                model,
                mode,
                frontier: pareto_frontier(&points),
            }
        })
        .collect();
    Ok(Report {
        version: REPORT_VERSION,
        results: results.to_vec(),
        table,
        frontiers,
        notes: trend_notes(results),
    })
}

fn series_keys(results: &[EvalResult]) -> Vec<(String, Method)> {
    let mut keys: Vec<(String, Method)> = Vec::new();
    for r in results {
        if !keys.contains(&(r.model.clone(), r.method)) {
            keys.push((r.model.clone(), r.method));
        }
    }
    keys
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Degradation by quantization level\n\n");
        out.push_str("Cells show the diffusion score with the autoregressive score in parentheses.\n\n");
        out.push_str(&self.table.to_markdown());
        out.push_str("\n## Size and latency\n\n");
        out.push_str("| model | method | bits | raw bits | eff bits | score | latency ms | std ms |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in &self.results {
            let score = r.aggregate().map(fmt3).unwrap_or_else(|| "failed".into());
            let (mean, std) = r
                .latency
                .map(|l| (fmt3(l.mean_ms), fmt3(l.std_ms)))
                .unwrap_or_else(|| ("n/a".into(), "n/a".into()));
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {score} | {mean} | {std} |\n",
                r.model,
                r.method,
                r.bits_or_plan,
                fmt3(r.raw_bits),
                fmt3(r.eff_bits)
            ));
        }
        out.push_str("\n## Frontier\n\n");
        for f in &self.frontiers {
            let pts: Vec<String> = f
                .frontier
                .frontier
                .iter()
                .map(|p| format!("{} ({}, {})", p.label, fmt3(p.effective_avg_bits), fmt3(p.score)))
                .collect();
            out.push_str(&format!("- {}: {}\n", f.model, pts.join("; ")));
        }
        if !self.notes.is_empty() {
            out.push_str("\n## Notes\n\n");
            for n in &self.notes {
                out.push_str(&format!("- {n}\n"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    /// Mean latency against raw bits, one series per (model, method).
    pub fn latency_svg(&self) -> String {
        let series = series_keys(&self.results)
            .into_iter()
            .map(|(model, method)| Series {
                name: format!("{model}/{method}"),
                points: self
                    .results
                    .iter()
                    .filter(|r| r.model == model && r.method == method)
                    .filter_map(|r| {
                        let l = r.latency?;
                        Some(SeriesPoint {
                            x: r.raw_bits,
                            y: l.mean_ms,
                            label: None,
                            tooltip: format!(
                                "{} {}: {} ms (std {})",
                                r.model,
                                r.label(),
                                fmt3(l.mean_ms),
                                fmt3(l.std_ms)
                            ),
                        })
                    })
                    .collect(),
            })
            .collect();
        Chart {
            title: "Latency per unit of work".into(),
            x_label: "average bits".into(),
            y_label: "mean latency (ms)".into(),
            series,
            overlays: Vec::new(),
        }
        .render()
    }

    /// Score against effective bits with HAWQ points labeled and each
    /// model's frontier drawn dashed.
    pub fn pareto_svg(&self) -> String {
        let series = series_keys(&self.results)
            .into_iter()
            .map(|(model, method)| Series {
                name: format!("{model}/{method}"),
                points: self
                    .results
                    .iter()
                    .filter(|r| r.model == model && r.method == method)
                    .filter_map(|r| {
                        Some(SeriesPoint {
                            x: r.eff_bits,
                            y: r.aggregate()?,
                            label: (r.method == Method::Hawq).then(|| r.label()),
                            tooltip: format!("{} {}", r.model, r.label()),
                        })
                    })
                    .collect(),
            })
            .collect();
        let overlays = self
            .frontiers
            .iter()
            .map(|f| Overlay {
                class: "frontier".into(),
                name: f.model.clone(),
                points: f
                    .frontier
                    .frontier
                    .iter()
                    .map(|p| (p.effective_avg_bits, p.score))
                    .collect(),
            })
            .collect();
        Chart {
            title: "Score versus effective bits".into(),
            x_label: "effective average bits".into(),
            y_label: "mean exact-match score".into(),
            series,
            overlays,
        }
        .render()
    }
}

/// Writes the requested formats into `dir` and returns the paths written.
pub fn emit(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(&str, String)> = Vec::new();
    for f in Format::ALL.iter().filter(|f| formats.contains(f)) {
        match f {
            Format::Markdown => files.push(("table.md", report.to_markdown())),
            Format::Csv => files.push(("results.csv", results_to_csv(&report.results)?)),
            Format::Json => files.push(("report.json", report.to_json())),
            Format::Svg => {
                files.push(("latency.svg", report.latency_svg()));
                files.push(("pareto.svg", report.pareto_svg()));
            }
        }
    }
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
