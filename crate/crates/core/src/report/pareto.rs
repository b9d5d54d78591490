//! Accuracy versus effective bits: fewer bits and higher score both win.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub effective_avg_bits: f64,
    pub score: f64,
    pub dominated: bool,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, effective_avg_bits: f64, score: f64) -> Self {
        Self {
            label: label.into(),
            effective_avg_bits,
            score,
            dominated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    /// Non-dominated points by ascending bits.
    pub frontier: Vec<ParetoPoint>,
    /// Everything else, in input order.
    pub dominated: Vec<ParetoPoint>,
}

/// Splits `points` into frontier and dominated sets.
///
/// A point is dominated when another has no more bits and no lower score,
/// with at least one strict. Of several identical points the one whose
/// label sorts first stays on the frontier.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Frontier {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        p.effective_avg_bits
            .total_cmp(&q.effective_avg_bits)
            .then(q.score.total_cmp(&p.score))
            .then(p.label.cmp(&q.label))
            .then(a.cmp(&b))
    });
    let mut on_frontier = vec![false; points.len()];
    let mut best = f64::NEG_INFINITY;
    for i in idx.iter().copied() {
        if points[i].score > best {
            best = points[i].score;
            on_frontier[i] = true;
        }
    }
    let tag = |i: usize| ParetoPoint {
        dominated: !on_frontier[i],
        ..points[i].clone()
    };
    Frontier {
        frontier: idx.iter().copied().filter(|&i| on_frontier[i]).map(tag).collect(),
        dominated: (0..points.len()).filter(|&i| !on_frontier[i]).map(tag).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point() {
        let f = pareto_frontier(&[ParetoPoint::new("a", 4.0, 0.5)]);
        assert_eq!(f.frontier.len(), 1);
        assert!(f.dominated.is_empty());
    }

    #[test]
    fn middle_point_dominated() {
        let pts = [
            ParetoPoint::new("a", 4.0, 0.5),
            ParetoPoint::new("b", 8.0, 0.6),
            ParetoPoint::new("c", 6.0, 0.7),
        ];
        let f = pareto_frontier(&pts);
        let labels: Vec<&str> = f.frontier.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["a", "c"]);
        assert_eq!(f.dominated.len(), 1);
        assert_eq!(f.dominated[0].label, "b");
        assert!(f.dominated[0].dominated);
    }

    #[test]
    fn duplicates_keep_first_label() {
        let pts = [ParetoPoint::new("z", 4.0, 0.5), ParetoPoint::new("y", 4.0, 0.5)];
        let f = pareto_frontier(&pts);
        assert_eq!(f.frontier.len(), 1);
        assert_eq!(f.frontier[0].label, "y");
        assert_eq!(f.dominated[0].label, "z");
    }
}
