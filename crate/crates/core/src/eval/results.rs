//! One row of the experiment grid and its CSV / JSON-lines forms.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{aggregate_score, Task, TaskScores};
use crate::error::{Error, Result};
use crate::model::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Rtn,
    Gptq,
    Hawq,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Rtn => "rtn",
            Method::Gptq => "gptq",
            Method::Hawq => "hawq",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "rtn" => Ok(Method::Rtn),
            "gptq" => Ok(Method::Gptq),
            "hawq" => Ok(Method::Hawq),
            other => Err(Error::Parameter(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Scores, latency and size of one (model, method, configuration) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub mode: Mode,
    pub method: Method,
    /// `16`, `4`, … for uniform widths; `16/8` style labels for mixed plans.
    pub bits_or_plan: String,
    pub scores: TaskScores,
    pub latency: Option<Latency>,
    pub raw_bits: f64,
    pub eff_bits: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Set when the cell failed; scores are then empty.
    pub error: Option<String>,
}

impl EvalResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    /// Mean exact-match score, or `None` for failed cells.
    pub fn aggregate(&self) -> Option<f64> {
        (!self.failed()).then(|| aggregate_score(&self.scores))
    }

    /// `method bits` label, e.g. `gptq 4`.
    pub fn label(&self) -> String {
        format!("{} {}", self.method, self.bits_or_plan)
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "model",
    "mode",
    "method",
    "bits_or_plan",
    "task",
    "score",
    "lat_mean_ms",
    "lat_std_ms",
    "raw_bits",
    "eff_bits",
    "seed",
    "config_hash",
    "error",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        what: "results CSV",
        detail: e.to_string(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Results as CSV, one line per (cell, task). Failed cells get a single
/// line with empty task and score. Floats use the shortest representation
/// that parses back to the same value.
pub fn results_to_csv(results: &[EvalResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in results {
        let lines: Vec<(String, String)> = if r.failed() || r.scores.is_empty() {
            vec![(String::new(), String::new())]
        } else {
            r.scores.iter().map(|(t, s)| (t.to_string(), s.to_string())).collect()
        };
        for (task, score) in lines {
            w.write_record([
                r.model.clone(),
                r.mode.to_string(),
                r.method.to_string(),
                r.bits_or_plan.clone(),
                task,
                score,
                opt(r.latency.map(|l| l.mean_ms)),
                opt(r.latency.map(|l| l.std_ms)),
                r.raw_bits.to_string(),
                r.eff_bits.to_string(),
                r.seed.to_string(),
                r.config_hash.clone(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        what: "results CSV",
        detail: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 fields"))
}

fn num<T: FromStr>(field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Format {
        what: "results CSV",
        detail: format!("bad {what}: {field:?}"),
    })
}

/// Parses [`results_to_csv`] output. Consecutive lines of one cell are
/// merged back into a single result.
pub fn results_from_csv(text: &str) -> Result<Vec<EvalResult>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Format {
            what: "results CSV",
            detail: format!("unexpected header {header:?}"),
        });
    }
    let mut out: Vec<EvalResult> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let latency = match (f(6), f(7)) {
            ("", "") => None,
            (m, s) => Some(Latency {
                mean_ms: num(m, "lat_mean_ms")?,
                std_ms: num(s, "lat_std_ms")?,
            }),
        };
        let row = EvalResult {
            model: f(0).to_string(),
            mode: f(1).parse()?,
            method: f(2).parse()?,
            bits_or_plan: f(3).to_string(),
            scores: TaskScores::new(),
            latency,
            raw_bits: num(f(8), "raw_bits")?,
            eff_bits: num(f(9), "eff_bits")?,
            seed: num(f(10), "seed")?,
            config_hash: f(11).to_string(),
            error: (!f(12).is_empty()).then(|| f(12).to_string()),
        };
        let same_cell = out.last().is_some_and(|last| {
            last.model == row.model
                && last.method == row.method
                && last.bits_or_plan == row.bits_or_plan
                && last.config_hash == row.config_hash
        });
        if !same_cell {
            out.push(row);
        }
        if !f(4).is_empty() {
            let task: Task = f(4).parse()?;
            let score: f64 = num(f(5), "score")?;
            out.last_mut().expect("pushed above").scores.insert(task, score);
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn results_to_jsonl(results: &[EvalResult]) -> String {
    results
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

pub fn results_from_jsonl(text: &str) -> Result<Vec<EvalResult>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                what: "results JSON lines",
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn write_results_csv(results: &[EvalResult], path: &Path) -> Result<()> {
    std::fs::write(path, results_to_csv(results)?).map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EvalResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    results_from_csv(&text).map_err(|e| e.context(path.display().to_string()))
}
