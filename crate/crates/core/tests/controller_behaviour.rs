//! Controller allocation, env head and training-step behaviour.

use budgetnet::autodiff::{Adam, SeededRng, Tensor};
use budgetnet::controller::{
    allocate, env_logits, env_loss, extract_qoi, hard_allocation, infer_allocation, naive_allocation, train_gates, BudgetLibrary, Estimator,
};
use budgetnet::data::{gen_dataset, CorruptionKind, CorruptionPolicy, SceneParams};
use budgetnet::net::{prefix, BackboneSpec, Model, ModelSpec};
use budgetnet::pipeline::{controller_loss, ControllerStep};

fn small_spec() -> ModelSpec {
    let mut spec = ModelSpec {
        backbone: BackboneSpec {
            layers: vec![3, 4],
            width: 8,
            hidden: 8,
            grid_height: 8,
            grid_width: 8,
            layerdrop_rate: 0.2,
        },
        ..ModelSpec::default()
    };
    spec.controller.budgets = vec![2, 3, 5];
    spec
}

fn scenes(seed: u64, n: usize, policy: CorruptionPolicy) -> Vec<budgetnet::data::Scene> {
    gen_dataset(seed, n, &SceneParams::default(), policy).unwrap()
}

const MIXED: CorruptionPolicy = CorruptionPolicy::Mixed {
    min_severity: 0.5,
    max_severity: 1.0,
};

#[test]
fn hard_allocation_spends_exactly_the_budget() {
    let model = Model::new(ModelSpec::default(), 1).unwrap();
    let lib = BudgetLibrary::for_model(&model).unwrap();
    for scene in scenes(2, 12, MIXED) {
        for &b in lib.budgets() {
            for est in [Estimator::NeuralSort, Estimator::StraightThrough] {
                let (alloc, _) = infer_allocation(&model, &lib, &scene.grids, b, est).unwrap();
                assert_eq!(alloc.mask.popcount, b);
                assert_eq!(alloc.split().iter().sum::<usize>(), b);
                if est == Estimator::StraightThrough {
                    assert!(alloc.modality_mask(0).bits[0] && alloc.modality_mask(1).bits[0]);
                }
            }
        }
    }
    for b in 0..=20 {
        assert_eq!(naive_allocation(&[8, 12], b).unwrap().mask.popcount, b);
    }
}

#[test]
fn training_gates_sum_to_budget() {
    let model = Model::new(ModelSpec::default(), 3).unwrap();
    let lib = BudgetLibrary::for_model(&model).unwrap();
    let mut rng = SeededRng::new(4);
    for scene in scenes(5, 6, MIXED) {
        let z = extract_qoi(&model, &scene.grids).unwrap();
        for &b in lib.budgets() {
            let pi = allocate(&model, &lib, &z, b).unwrap();
            for est in [Estimator::NeuralSort, Estimator::StraightThrough] {
                let g = train_gates(&pi, b, 0.5, est, Some(&mut rng)).unwrap();
                assert!((g.soft.gates.data().iter().sum::<f64>() - b as f64).abs() < 1e-6);
                assert_eq!(g.hard.popcount, b);
            }
        }
    }
}

#[test]
fn env_loss_matches_scalar_cross_entropy() {
    let model = Model::new(ModelSpec::default(), 6).unwrap();
    for scene in scenes(7, 10, MIXED) {
        let z = extract_qoi(&model, &scene.grids).unwrap();
        let logits = env_logits(&model, &z).unwrap().to_vec();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let want = lse - logits[scene.label()];
        let got = env_loss(&model, &z, scene.label()).unwrap().item();
        assert!((got - want).abs() < 1e-9);
    }
    let z = Tensor::zeros(&[1, model.spec.z_dim()]);
    for name in ["ctrl.env.l2.w", "ctrl.env.l2.b"] {
        model.param(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!((env_loss(&model, &z, 3).unwrap().item() - 6f64.ln()).abs() < 1e-12);
    assert!(env_loss(&model, &z, 6).is_err());
}

#[test]
fn budgets_give_distinct_logits() {
    let model = Model::new(ModelSpec::default(), 8).unwrap();
    let lib = BudgetLibrary::for_model(&model).unwrap();
    let scene = &scenes(9, 1, CorruptionPolicy::Clean)[0];
    let z = extract_qoi(&model, &scene.grids).unwrap();
    let all: Vec<Vec<f64>> = lib.budgets().iter().map(|&b| allocate(&model, &lib, &z, b).unwrap().to_vec()).collect();
    for i in 0..all.len() {
        assert_eq!(all[i].len(), 20);
        for j in i + 1..all.len() {
            assert!(all[i].iter().zip(&all[j]).any(|(a, b)| (a - b).abs() > 1e-9));
        }
    }
    assert_eq!(allocate(&model, &lib, &z, 8).unwrap().to_vec(), all[2]);
    assert!(allocate(&model, &lib, &z, 5).is_err());
}

#[test]
fn zeroed_modality_gives_bias_response() {
    let model = Model::new(ModelSpec::default(), 10).unwrap();
    let mut scene = scenes(11, 1, CorruptionPolicy::Clean).remove(0);
    scene.grids[1].iter_mut().for_each(|v| *v = 0.0);
    let z = extract_qoi(&model, &scene.grids).unwrap().to_vec();
    let l1b = model.param("ctrl.qoi.b.l1.b").unwrap().to_vec();
    let l2w = model.param("ctrl.qoi.b.l2.w").unwrap().to_vec();
    let l2b = model.param("ctrl.qoi.b.l2.b").unwrap().to_vec();
    let (hid, out) = (l1b.len(), l2b.len());
    let want: Vec<f64> = (0..out)
        .map(|j| ((0..hid).map(|i| l1b[i].max(0.0) * l2w[i * out + j]).sum::<f64>() + l2b[j]).max(0.0))
        .collect();
    let slice = &z[z.len() - out..];
    assert!(slice.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
}

fn train_controller(model: &Model, data: &[budgetnet::data::Scene], steps: usize, alpha_env: f64) -> (f64, f64) {
    let lib = BudgetLibrary::for_model(model).unwrap();
    model.params.train_only(&[prefix::CONTROLLER]);
    let mut adam = Adam::with_lr(3e-3);
    let mut rng = SeededRng::new(12);
    let mut losses = Vec::new();
    for s in 0..steps {
        model.params.iter().for_each(|(_, p)| p.zero_grad());
        let scene = &data[s % data.len()];
        let step = ControllerStep {
            budget: lib.sample(&mut rng),
            tau: 0.5,
            estimator: Estimator::NeuralSort,
            alpha_env,
            detach_z: false,
            noise: true,
        };
        let l = controller_loss(model, &lib, scene, step, &mut rng).unwrap();
        l.total.backward().unwrap();
        assert_eq!(model.params.max_abs_grad(|n| !n.starts_with(prefix::CONTROLLER)), 0.0);
        adam.step(&model.params);
        losses.push(l.total.item());
    }
    let k = steps / 5;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&losses[..k]), mean(&losses[steps - k..]))
}

#[test]
fn controller_training_lowers_loss_and_leaves_backbone_alone() {
    let model = Model::new(small_spec(), 13).unwrap();
    let before: Vec<f64> = model.param("bb.a.layer1.mlp1.w").unwrap().to_vec();
    let data = scenes(14, 40, MIXED);
    let (first, last) = train_controller(&model, &data, 200, 1.0);
    assert!(last < first, "{first} -> {last}");
    assert_eq!(model.param("bb.a.layer1.mlp1.w").unwrap().to_vec(), before);
}

#[test]
fn zero_env_weight_removes_env_gradient() {
    let model = Model::new(small_spec(), 15).unwrap();
    let lib = BudgetLibrary::for_model(&model).unwrap();
    model.params.train_only(&[prefix::CONTROLLER]);
    let scene = &scenes(16, 1, MIXED)[0];
    for (alpha, nonzero) in [(0.0, false), (1.0, true)] {
        model.params.iter().for_each(|(_, p)| p.zero_grad());
        let step = ControllerStep {
            budget: 3,
            tau: 0.5,
            estimator: Estimator::NeuralSort,
            alpha_env: alpha,
            detach_z: false,
            noise: false,
        };
        controller_loss(&model, &lib, scene, step, &mut SeededRng::new(0)).unwrap().total.backward().unwrap();
        let g = model.params.max_abs_grad(|n| n.starts_with("ctrl.env."));
        assert_eq!(g > 0.0, nonzero, "alpha {alpha}: {g}");
        assert!(model.params.max_abs_grad(|n| n.starts_with("ctrl.alloc.")) > 0.0);
    }
}

#[test]
fn detached_qoi_only_learns_from_env() {
    let model = Model::new(small_spec(), 17).unwrap();
    let lib = BudgetLibrary::for_model(&model).unwrap();
    model.params.train_only(&[prefix::CONTROLLER]);
    let scene = &scenes(18, 1, MIXED)[0];
    let step = ControllerStep {
        budget: 3,
        tau: 0.5,
        estimator: Estimator::NeuralSort,
        alpha_env: 0.0,
        detach_z: true,
        noise: false,
    };
    controller_loss(&model, &lib, scene, step, &mut SeededRng::new(0)).unwrap().total.backward().unwrap();
    assert_eq!(model.params.max_abs_grad(|n| n.starts_with("ctrl.qoi.")), 0.0);
}

#[test]
fn straight_through_forward_is_the_hard_mask() {
    let model = Model::new(ModelSpec::default(), 19).unwrap();
    let lib = BudgetLibrary::for_model(&model).unwrap();
    let scene = &scenes(20, 1, MIXED)[0];
    let z = extract_qoi(&model, &scene.grids).unwrap();
    for &b in lib.budgets() {
        let pi = allocate(&model, &lib, &z, b).unwrap();
        let g = train_gates(&pi, b, 1.0, Estimator::StraightThrough, None).unwrap();
        let hard = hard_allocation(&pi, b, Estimator::StraightThrough).unwrap();
        assert_eq!(g.hard, hard.mask);
        let fwd: Vec<bool> = g.soft.gates.data().iter().map(|&v| (v - 1.0).abs() < 1e-12).collect();
        assert_eq!(fwd, hard.mask.bits);
    }
}

#[test]
fn env_head_learns_corruption_kinds() {
    // train-then-probe: only the QoI extractor and env head are trained
    let model = Model::new(ModelSpec::default(), 21).unwrap();
    model.params.train_only(&["ctrl.qoi.", "ctrl.env."]);
    let train = scenes(22, 600, MIXED);
    let test = scenes(23, 300, MIXED);
    let mut adam = Adam::with_lr(3e-3);
    for _epoch in 0..6 {
        for batch in train.chunks(8) {
            model.params.iter().for_each(|(_, p)| p.zero_grad());
            for s in batch {
                let z = extract_qoi(&model, &s.grids).unwrap();
                env_loss(&model, &z, s.label()).unwrap().scale(1.0 / batch.len() as f64).backward().unwrap();
            }
            adam.step(&model.params);
        }
    }
    let correct = test
        .iter()
        .filter(|s| {
            let z = extract_qoi(&model, &s.grids).unwrap();
            let l = env_logits(&model, &z).unwrap().to_vec();
            let arg = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
            arg == s.label()
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
    assert_eq!(CorruptionKind::COUNT, model.spec.controller.env_classes);
}
