//! Sensitivity-ranked bit allocation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Provenance, QuantPlan};

/// Fractions of modules sent to the high, middle and low tier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub p16: f64,
    pub p8: f64,
    pub p4: f64,
}

impl SplitRatios {
    pub fn new(p16: f64, p8: f64, p4: f64) -> Result<Self> {
        let r = Self { p16, p8, p4 };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.p16, self.p8, self.p4];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter(format!("split ratios must be non-negative: {self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split ratios must sum to 1: {self:?}")));
        }
        Ok(())
    }
}

/// Bit widths the three tiers map to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiers {
    pub high: u8,
    pub mid: u8,
    pub low: u8,
}

impl Tiers {
    pub const SIXTEEN_EIGHT_FOUR: Tiers = Tiers {
        high: 16,
        mid: 8,
        low: 4,
    };
    /// The same split shifted down one level: high → 8, middle → 4.
    pub const EIGHT_FOUR: Tiers = Tiers {
        high: 8,
        mid: 4,
        low: 4,
    };
}

impl Default for Tiers {
    fn default() -> Self {
        Self::SIXTEEN_EIGHT_FOUR
    }
}

/// Cutoffs `(k16, k8)` for `m` modules: `floor(p16·m)` and
/// `floor((p16 + p8)·m)`.
pub fn cutoffs(ratios: &SplitRatios, m: usize) -> (usize, usize) {
    let k16 = (ratios.p16 * m as f64).floor() as usize;
    let k8 = ((ratios.p16 + ratios.p8) * m as f64).floor() as usize;
    (k16.min(m), k8.min(m))
}

/// Bit widths in ranking order: positions `1..=k16` get the high tier,
/// `k16+1..=k8` the middle tier, the rest the low tier.
pub fn assign_bits(m: usize, ratios: &SplitRatios, tiers: Tiers) -> Result<Vec<u8>> {
    ratios.validate()?;
    let (k16, k8) = cutoffs(ratios, m);
    Ok((1..=m)
        .map(|pos| {
            if pos <= k16 {
                tiers.high
            } else if pos <= k8 {
                tiers.mid
            } else {
                tiers.low
            }
        })
        .collect())
}

/// Plan for modules ranked most- to least-sensitive.
pub fn assign_precision(
    ranked_modules: &[String],
    ratios: SplitRatios,
    tiers: Tiers,
    group_size: usize,
    include_embeddings: bool,
) -> Result<QuantPlan> {
    let bits = assign_bits(ranked_modules.len(), &ratios, tiers)?;
    let mut modules = BTreeMap::new();
    for (path, b) in ranked_modules.iter().zip(bits) {
        if modules.insert(path.clone(), b).is_some() {
            return Err(Error::Parameter(format!("{path} ranked twice")));
        }
    }
    Ok(QuantPlan {
        group_size,
        provenance: Provenance::HawqSplit,
        include_embeddings,
        modules,
        ratios: Some(ratios),
        config_hash: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetAllocation {
    pub ratios: SplitRatios,
    pub achieved_avg_bits: f64,
    /// Width per module, in ranking order.
    pub bits: Vec<u8>,
}

/// Fits a `{16, 8, 4}` assignment under a mean-bit budget.
///
/// Everything starts at 4 bits. A first pass walks the ranking and lifts
/// modules to 8 bits while the budget allows; if every module made it, a
/// second pass lifts modules to 16 bits the same way. Each pass stops at the
/// first module that does not fit, so more sensitive modules never end up
/// below less sensitive ones. At most two adjacent tiers are ever mixed.
pub fn ratios_for_budget(ranked_sizes: &[usize], target_avg_bits: f64) -> Result<BudgetAllocation> {
    if !(4.0..=16.0).contains(&target_avg_bits) {
        return Err(Error::Parameter(format!(
            "target average bits must lie in [4, 16], got {target_avg_bits}"
        )));
    }
    if ranked_sizes.is_empty() || ranked_sizes.contains(&0) {
        return Err(Error::Parameter("need at least one non-empty module".into()));
    }
    let total: f64 = ranked_sizes.iter().map(|&n| n as f64).sum();
    let budget = target_avg_bits * total;
    let mut bits = vec![4u8; ranked_sizes.len()];
    let mut used = 4.0 * total;

    for (from, to) in [(4u8, 8u8), (8, 16)] {
        let mut all_lifted = true;
        for (b, &n) in bits.iter_mut().zip(ranked_sizes) {
            let extra = (to - from) as f64 * n as f64;
            if used + extra <= budget + 1e-9 * total {
                used += extra;
                *b = to;
            } else {
                all_lifted = false;
                break;
            }
        }
        if !all_lifted {
            break;
        }
    }

    let m = bits.len() as f64;
    let count = |w: u8| bits.iter().filter(|&&b| b == w).count() as f64 / m;
    let (p16, p8) = (count(16), count(8));
    Ok(BudgetAllocation {
        ratios: SplitRatios {
            p16,
            p8,
            p4: 1.0 - p16 - p8,
        },
        achieved_avg_bits: used / total,
        bits,
    })
}

/// Plan from a budget allocation.
pub fn plan_for_budget(
    ranked_modules: &[String],
    sizes: &[usize],
    target_avg_bits: f64,
    group_size: usize,
    include_embeddings: bool,
) -> Result<(QuantPlan, BudgetAllocation)> {
    if ranked_modules.len() != sizes.len() {
        return Err(Error::Dimension("one size per ranked module".into()));
    }
    let alloc = ratios_for_budget(sizes, target_avg_bits)?;
    let plan = QuantPlan {
        group_size,
        provenance: Provenance::HawqSplit,
        include_embeddings,
        modules: ranked_modules.iter().cloned().zip(alloc.bits.iter().copied()).collect(),
        ratios: Some(alloc.ratios),
        config_hash: None,
    };
    Ok((plan, alloc))
}
