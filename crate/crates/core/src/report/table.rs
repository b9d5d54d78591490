//! Degradation table: one row per quantization level, diffusion score with
//! the autoregressive score in parentheses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalResult, Method, Task};
use crate::model::Mode;

/// Three-decimal rendering with negative zero folded into zero.
pub fn fmt3(x: f64) -> String {
    let r = (x * 1000.0).round() / 1000.0;
    format!("{:.3}", if r == 0.0 { 0.0 } else { r })
}

/// A pair of optional values shown as `diffusion (ar)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub diffusion: Option<f64>,
    pub ar: Option<f64>,
}

impl Pair {
    pub fn render(&self) -> String {
        let one = |v: Option<f64>| v.map(fmt3).unwrap_or_else(|| "n/a".into());
        format!("{} ({})", one(self.diffusion), one(self.ar))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub bits_or_plan: String,
    /// Score per task column.
    pub scores: Vec<Pair>,
    /// Score minus the 16-bit baseline, per task column.
    pub deltas: Vec<Pair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationTable {
    pub tasks: Vec<Task>,
    pub rows: Vec<TableRow>,
}

fn score(r: Option<&EvalResult>, task: Task) -> Option<f64> {
    r.filter(|r| !r.failed()).and_then(|r| r.scores.get(&task).copied())
}

/// Builds the table. Every mode present needs a baseline row.
pub fn build_degradation_table(results: &[EvalResult]) -> Result<DegradationTable> {
    let mut cells: BTreeMap<(Method, &str, Mode), &EvalResult> = BTreeMap::new();
    let mut order: Vec<(Method, String)> = Vec::new();
    for r in results {
        if cells.insert((r.method, &r.bits_or_plan, r.mode), r).is_some() {
            return Err(Error::Contract(format!("two {} results for {}", r.mode, r.label())));
        }
        let key = (r.method, r.bits_or_plan.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let modes: Vec<Mode> = [Mode::Diffusion, Mode::Ar]
        .into_iter()
        .filter(|m| results.iter().any(|r| r.mode == *m))
        .collect();
    if modes.is_empty() {
        return Err(Error::Contract("no results to tabulate".into()));
    }
    let baseline = |mode: Mode| {
        results
            .iter()
            .find(|r| r.mode == mode && r.method == Method::Baseline && !r.failed())
    };
    for &m in &modes {
        if baseline(m).is_none() {
            return Err(Error::Contract(format!("no 16-bit baseline for the {m} model")));
        }
    }
    let tasks: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|t| results.iter().any(|r| r.scores.contains_key(t)))
        .collect();
    order.sort_by_key(|(m, _)| *m != Method::Baseline);

    let rows = order
        .into_iter()
        .map(|(method, bits)| {
            let get = |mode| cells.get(&(method, bits.as_str(), mode)).copied();
            let pair = |f: &dyn Fn(Mode) -> Option<f64>| Pair {
                diffusion: f(Mode::Diffusion),
                ar: f(Mode::Ar),
            };
            let scores = tasks.iter().map(|&t| pair(&|m| score(get(m), t))).collect();
            let deltas = tasks
                .iter()
                .map(|&t| pair(&|m| Some(score(get(m), t)? - score(baseline(m), t)?)))
                .collect();
            TableRow {
                method,
                bits_or_plan: bits,
                scores,
                deltas,
            }
        })
        .collect();
    Ok(DegradationTable { tasks, rows })
}

impl DegradationTable {
    pub fn to_markdown(&self) -> String {
        let mut head = vec!["method".to_string(), "bits".to_string()];
        head.extend(self.tasks.iter().map(|t| t.to_string()));
        head.extend(self.tasks.iter().map(|t| format!("delta {t}")));
        let mut out = String::new();
        out.push_str(&format!("| {} |\n", head.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(head.len())));
        for row in &self.rows {
            let mut cells = vec![row.method.to_string(), row.bits_or_plan.clone()];
            cells.extend(row.scores.iter().map(Pair::render));
            cells.extend(row.deltas.iter().map(Pair::render));
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }
}
