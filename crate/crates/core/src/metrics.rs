//! Effective-multiplication accounting and portion-value analytics.

use crate::architecture::StepTrace;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Multiplication count of one cell step.
///
/// An ungated cell performs the eight `D × D` products of its four gates.
/// A portion-gated cell only needs the active `k × k` block of each, with
/// `k = ⌈p·D⌉`, plus the two length-`D` dot products of the portion gate.
/// Elementwise work is not counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub hidden: usize,
    pub gated: bool,
}

impl CostModel {
    pub fn new(hidden: usize, gated: bool) -> Self {
        CostModel { hidden, gated }
    }

    /// Active dimension count `⌈p·D⌉`, clamped to `[0, D]`.
    pub fn active_dims(&self, p: f64) -> u64 {
        let d = self.hidden as f64;
        (p * d).ceil().clamp(0.0, d) as u64
    }

    /// Cost for portion value `p`; `p` is ignored for ungated cells.
    pub fn cell_cost(&self, p: f64) -> u64 {
        let d = self.hidden as u64;
        if self.gated {
            let k = self.active_dims(p);
            8 * k * k + 2 * d
        } else {
            8 * d * d
        }
    }

    pub fn full_cost(&self) -> u64 {
        self.cell_cost(1.0)
    }
}

/// Sum of per-cell costs over one step trace.
pub fn effective_mults<T: Scalar>(trace: &StepTrace<T>, hidden: usize) -> u64 {
    trace
        .portions
        .iter()
        .map(|p| match p {
            Some(p) => CostModel::new(hidden, true).cell_cost(p.as_f64()),
            None => CostModel::new(hidden, false).cell_cost(1.0),
        })
        .sum()
}

/// One row of a portion summary: the sweep value and the average converged `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortionRow {
    pub sweep: String,
    pub value: String,
    pub avg_p: Option<f64>,
    pub samples: usize,
}

/// Arithmetic mean of portion values, `None` for an empty slice.
pub fn mean_portion(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Average converged `p` per sweep point. Each entry carries the sweep value
/// and the flattened per-step, per-cell, per-sequence portion values of the
/// validation pass at the converged checkpoint.
pub fn portion_summary<'a>(
    sweep: &str,
    points: impl IntoIterator<Item = (String, &'a [f64])>,
) -> Vec<PortionRow> {
    points
        .into_iter()
        .map(|(value, ps)| PortionRow {
            sweep: sweep.to_string(),
            value,
            avg_p: mean_portion(ps),
            samples: ps.len(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_costs() {
        let gated = CostModel::new(40, true);
        assert_eq!(gated.cell_cost(1.0), 12880);
        assert_eq!(gated.cell_cost(0.5), 3280);
        assert_eq!(CostModel::new(40, false).cell_cost(0.3), 12800);
        // 3280 / 12880 is about a quarter of the full cost
        assert!((3280.0f64 / 12880.0 - 0.2547).abs() < 1e-3);
    }

    #[test]
    fn summary_of_constant_half() {
        let ps = vec![0.5; 12];
        let rows = portion_summary("r", [("0.5".to_string(), ps.as_slice())]);
        assert_eq!(rows[0].avg_p, Some(0.5));
        assert_eq!(rows[0].samples, 12);
        assert_eq!(mean_portion(&[]), None);
    }

    proptest! {
        #[test]
        fn cost_is_monotone_in_p(d in 1usize..128, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let m = CostModel::new(d, true);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(m.cell_cost(lo) <= m.cell_cost(hi));
            prop_assert!(m.cell_cost(lo) > 0);
            prop_assert_eq!(m.full_cost(), CostModel::new(d, false).full_cost() + 2 * d as u64);
        }
    }
}
