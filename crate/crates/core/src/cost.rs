//! Abstract cost accounting for executed forward passes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::ExecutionTrace;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("cost `{0}` must be positive and finite, got {1}")]
    NonPositive(&'static str, f64),
    #[error("cost model has {have} layer costs, trace has {want} modalities")]
    Modalities { have: usize, want: usize },
}

/// Per-unit costs. Modality 0 is the cheap ranging sensor, modality 1 the
/// camera at 2.4× its per-layer cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub layer_cost: Vec<f64>,
    /// Head cost per surviving token.
    pub token_cost: f64,
    pub controller_overhead: f64,
    /// Charged once per pass that consults SkipGates.
    pub skipgate_overhead: f64,
    pub pruner_overhead: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            layer_cost: vec![1.0, 2.4],
            token_cost: 0.01,
            controller_overhead: 0.1,
            skipgate_overhead: 0.05,
            pruner_overhead: 0.05,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        for &c in &self.layer_cost {
            check("layer_cost", c)?;
        }
        check("token_cost", self.token_cost)?;
        check("controller_overhead", self.controller_overhead)?;
        check("skipgate_overhead", self.skipgate_overhead)?;
        check("pruner_overhead", self.pruner_overhead)
    }

    fn overheads(&self, trace: &ExecutionTrace) -> f64 {
        let mut total = 0.0;
        if trace.controller {
            total += self.controller_overhead;
        }
        if trace.skipgate {
            total += self.skipgate_overhead;
        }
        if trace.pruner {
            total += self.pruner_overhead;
        }
        total
    }
}

fn check(name: &'static str, v: f64) -> Result<(), CostError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CostError::NonPositive(name, v))
    }
}

/// `Σ executed_m·c_m + kept tokens·c_tok + overheads of the modules used`.
pub fn cost_of_trace(trace: &ExecutionTrace, cm: &CostModel) -> Result<f64, CostError> {
    if trace.modalities.len() > cm.layer_cost.len() {
        return Err(CostError::Modalities {
            have: cm.layer_cost.len(),
            want: trace.modalities.len(),
        });
    }
    let layers: f64 = trace
        .modalities
        .iter()
        .zip(&cm.layer_cost)
        .map(|(m, c)| m.executed() as f64 * c)
        .sum();
    Ok(layers + trace.tokens_kept() as f64 * cm.token_cost + cm.overheads(trace))
}

/// Passes iff the controller selected at most `b` layers. Layers vetoed by
/// a SkipGate still count as selected, so skipping can never break the
/// budget.
pub fn assert_budget(trace: &ExecutionTrace, b: usize) -> bool {
    trace.selected() <= b
}

/// Greedy cost-budget selection for reporting: walks the layers in
/// decreasing logit order and takes each one that still fits under
/// `cost_budget`. `layer_costs` is indexed like `logits`.
pub fn greedy_cost_selection(logits: &[f64], layer_costs: &[f64], cost_budget: f64) -> Vec<bool> {
    let mut bits = vec![false; logits.len()];
    let mut spent = 0.0;
    for i in crate::relax::top_indices(logits, logits.len()) {
        if spent + layer_costs[i] <= cost_budget {
            spent += layer_costs[i];
            bits[i] = true;
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerRecord, ModalityTrace};

    fn trace(exec: [usize; 2], layers: [usize; 2], tokens: usize) -> ExecutionTrace {
        let modalities = (0..2)
            .map(|m| ModalityTrace {
                layers: (1..=layers[m]).map(|l| LayerRecord::new(l, true, l <= exec[m], None)).collect(),
                tokens_total: tokens,
                tokens_kept: tokens,
            })
            .collect();
        ExecutionTrace {
            modalities,
            ..ExecutionTrace::default()
        }
    }

    fn unit() -> CostModel {
        CostModel {
            layer_cost: vec![1.0, 1.0],
            ..CostModel::default()
        }
    }

    #[test]
    fn empty_trace_costs_only_overheads() {
        let mut t = ExecutionTrace::default();
        assert_eq!(cost_of_trace(&t, &unit()).unwrap(), 0.0);
        t.controller = true;
        t.skipgate = true;
        let cm = unit();
        assert!((cost_of_trace(&t, &cm).unwrap() - cm.controller_overhead - cm.skipgate_overhead).abs() < 1e-15);
    }

    #[test]
    fn full_trace_and_linearity() {
        let cm = unit();
        let full = trace([8, 12], [8, 12], 64);
        assert!((cost_of_trace(&full, &cm).unwrap() - (20.0 + 128.0 * cm.token_cost)).abs() < 1e-12);
        let cm = CostModel::default();
        let a = cost_of_trace(&trace([3, 5], [8, 12], 64), &cm).unwrap();
        let b = cost_of_trace(&trace([4, 5], [8, 12], 64), &cm).unwrap();
        assert!((b - a - cm.layer_cost[0]).abs() < 1e-12);
    }

    #[test]
    fn budget_assertion() {
        let t = trace([2, 2], [3, 3], 4);
        assert_eq!(t.selected(), 6);
        assert!(assert_budget(&t, 6));
        assert!(!assert_budget(&t, 5));
        let mut skipped = t.clone();
        skipped.modalities[0].layers[0].executed = false;
        assert!(assert_budget(&skipped, 6));
    }

    #[test]
    fn validation_and_greedy() {
        assert!(CostModel::default().validate().is_ok());
        let bad = CostModel {
            token_cost: 0.0,
            ..CostModel::default()
        };
        assert_eq!(bad.validate(), Err(CostError::NonPositive("token_cost", 0.0)));
        assert_eq!(greedy_cost_selection(&[3.0, 2.0, 1.0], &[2.4, 1.0, 1.0], 3.5), vec![true, true, false]);
    }
}
