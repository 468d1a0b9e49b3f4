//! Scene corruption invariants and cost accounting.

use budgetnet::autodiff::SeededRng;
use budgetnet::cost::{assert_budget, cost_of_trace, greedy_cost_selection, CostModel};
use budgetnet::data::{corrupt, gen_dataset, gen_scene, sparsified_rows, CorruptionKind, CorruptionPolicy, SceneParams};
use budgetnet::net::{ExecutionTrace, LayerRecord, ModalityTrace};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = CorruptionKind> {
    (0usize..6).prop_map(|i| CorruptionKind::from_index(i).unwrap())
}

proptest! {
    #[test]
    fn corruption_touches_exactly_one_modality(seed in 0u64..10_000, k in kind(), severity in 0.2f64..=1.0, n in 0usize..=5) {
        let mut rng = SeededRng::new(seed);
        let clean = gen_scene(&mut rng, &SceneParams::default(), n).unwrap();
        let out = corrupt(&clean, k, severity, &mut rng).unwrap();
        prop_assert_eq!(&out.occupancy, &clean.occupancy);
        prop_assert_eq!(&out.targets, &clean.targets);
        let changed: Vec<bool> = (0..2).map(|m| out.grids[m] != clean.grids[m]).collect();
        match k.target_modality() {
            None => prop_assert_eq!(changed, vec![false, false]),
            Some(m) => {
                prop_assert!(!changed[1 - m]);
                prop_assert!(changed[m]);
            }
        }
        prop_assert_eq!(out.label(), if k == CorruptionKind::Clean { 0 } else { k.index() });
    }

    #[test]
    fn occupancy_has_one_cell_per_target(seed in 0u64..10_000, n in 0usize..=5) {
        let scene = gen_scene(&mut SeededRng::new(seed), &SceneParams::default(), n).unwrap();
        prop_assert_eq!(scene.occupancy.iter().filter(|&&v| v == 1.0).count(), n);
        prop_assert!(scene.occupancy.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(scene.severity, 0.0);
    }
}

#[test]
fn sparsify_row_count() {
    for seed in 0..50u64 {
        let mut rng = SeededRng::new(seed);
        let clean = gen_scene(&mut rng, &SceneParams::default(), 3).unwrap();
        for severity in [0.25, 0.5, 0.75, 1.0] {
            let out = corrupt(&clean, CorruptionKind::ASparsify, severity, &mut rng).unwrap();
            let zero_rows = out.grids[0].chunks(8).filter(|r| r.iter().all(|&v| v == 0.0)).count();
            assert_eq!(zero_rows, (severity * 8.0) as usize);
            assert_eq!(zero_rows, sparsified_rows(8, severity));
        }
    }
}

#[test]
fn severity_out_of_range_is_rejected() {
    let mut rng = SeededRng::new(0);
    let clean = gen_scene(&mut rng, &SceneParams::default(), 1).unwrap();
    assert!(corrupt(&clean, CorruptionKind::BFog, 1.5, &mut rng).is_err());
    assert!(corrupt(&clean, CorruptionKind::BFog, -0.1, &mut rng).is_err());
}

#[test]
fn fixed_policy_is_deterministic_and_labelled() {
    let policy = CorruptionPolicy::Fixed {
        kind: CorruptionKind::BDark,
        min_severity: 0.5,
        max_severity: 1.0,
    };
    let a = gen_dataset(3, 20, &SceneParams::default(), policy).unwrap();
    assert_eq!(a, gen_dataset(3, 20, &SceneParams::default(), policy).unwrap());
    assert!(a.iter().all(|s| s.corruption == CorruptionKind::BDark && (0.5..=1.0).contains(&s.severity)));
    let prefix = gen_dataset(3, 5, &SceneParams::default(), policy).unwrap();
    assert_eq!(prefix[..], a[..5]);
}

fn trace(selected: [usize; 2], executed: [usize; 2], kept: [usize; 2]) -> ExecutionTrace {
    let layers = [8, 12];
    ExecutionTrace {
        modalities: (0..2)
            .map(|m| ModalityTrace {
                layers: (0..layers[m]).map(|i| LayerRecord::new(i + 1, i < selected[m], i < executed[m], None)).collect(),
                tokens_total: 64,
                tokens_kept: kept[m],
            })
            .collect(),
        ..ExecutionTrace::default()
    }
}

proptest! {
    #[test]
    fn cost_matches_hand_sum(sa in 0usize..=8, sb in 0usize..=12, ka in 0usize..=64, kb in 0usize..=64, flags in 0u8..8) {
        let (ea, eb) = (sa / 2, sb.saturating_sub(1));
        let mut t = trace([sa, sb], [ea, eb], [ka, kb]);
        t.controller = flags & 1 != 0;
        t.skipgate = flags & 2 != 0;
        t.pruner = flags & 4 != 0;
        let cm = CostModel::default();
        let mut want = ea as f64 * 1.0 + eb as f64 * 2.4 + (ka + kb) as f64 * 0.01;
        want += [(t.controller, 0.1), (t.skipgate, 0.05), (t.pruner, 0.05)].iter().filter(|f| f.0).map(|f| f.1).sum::<f64>();
        prop_assert!((cost_of_trace(&t, &cm).unwrap() - want).abs() < 1e-12);
        prop_assert!(t.skip_within_allocation());
        prop_assert_eq!(assert_budget(&t, sa + sb), true);
        if sa + sb > 0 {
            prop_assert_eq!(assert_budget(&t, sa + sb - 1), false);
        }
    }

    #[test]
    fn greedy_selection_fits_budget(logits in prop::collection::vec(-3.0f64..3.0, 1..20), budget in 0.0f64..30.0) {
        let costs: Vec<f64> = (0..logits.len()).map(|i| if i % 2 == 0 { 1.0 } else { 2.4 }).collect();
        let bits = greedy_cost_selection(&logits, &costs, budget);
        let spent: f64 = bits.iter().zip(&costs).filter(|p| *p.0).map(|p| p.1).sum();
        prop_assert!(spent <= budget + 1e-12);
        // nothing left out would still fit
        for (i, &on) in bits.iter().enumerate() {
            if !on {
                prop_assert!(spent + costs[i] > budget);
            }
        }
    }
}

#[test]
fn skip_outside_allocation_is_flagged() {
    let mut t = trace([2, 2], [2, 2], [64, 64]);
    t.modalities[0].layers[5].executed = true;
    assert!(!t.skip_within_allocation());
    let bad = CostModel {
        token_cost: 0.0,
        ..CostModel::default()
    };
    assert!(bad.validate().is_err());
    let one = CostModel {
        layer_cost: vec![1.0],
        ..CostModel::default()
    };
    assert!(cost_of_trace(&t, &one).is_err());
}
