//! Fixed-seed gradient and invariant checks behind the `gradcheck` command.

use serde::Serialize;

use crate::autodiff::{grad_check, Result as AdResult, SeededRng, Tensor};
use crate::controller::{BudgetLibrary, Estimator};
use crate::data::{gen_dataset, CorruptionPolicy, SceneParams};
use crate::net::{
    embed, encode_modality, fuse_and_head, detection_loss, prune_tokens, token_logits, BackboneSpec, ControllerSpec, Gates,
    Model, ModelSpec, PruneMode, SkipContext, SkipMode,
};
use crate::pipeline::{controller_loss, ControllerStep};
use crate::relax::{budget_gate, neuralsort, st_round, HardMask, LogitVector, RelaxedPermutation};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tiny_spec(layers: Vec<usize>) -> ModelSpec {
    ModelSpec {
        backbone: BackboneSpec {
            layers,
            width: 6,
            hidden: 6,
            grid_height: 4,
            grid_width: 4,
            layerdrop_rate: 0.2,
        },
        controller: ControllerSpec {
            qoi_width: 4,
            alloc_hidden: 8,
            env_hidden: 8,
            budget_embed_dim: 8,
            budgets: vec![2, 3],
            env_classes: 6,
        },
        ..ModelSpec::default()
    }
}

fn tiny_scene(seed: u64) -> crate::data::Scene {
    let params = SceneParams {
        height: 4,
        width: 4,
        max_targets: 2,
        ..SceneParams::default()
    };
    let policy = CorruptionPolicy::Mixed {
        min_severity: 0.5,
        max_severity: 1.0,
    };
    gen_dataset(seed, 1, &params, policy).expect("valid params").remove(0)
}

type SortFn = fn(&LogitVector, f64) -> crate::relax::Result<RelaxedPermutation>;

/// Direct scalar relaxed sort used as the forward oracle.
fn sort_oracle(pi: &[f64], tau: f64) -> Vec<f64> {
    let n = pi.len();
    let mut out = Vec::with_capacity(n * n);
    for i in 1..=n {
        let c = (n + 1) as f64 - 2.0 * i as f64;
        let s: Vec<f64> = pi.iter().map(|&p| (c * p - pi.iter().map(|q| (p - q).abs()).sum::<f64>()) / tau).collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
        out.extend(s.iter().map(|v| (v - mx).exp() / z));
    }
    out
}

/// Forward agreement with the scalar oracle, then the gated-loss gradient.
fn check_sort(sort: SortFn, tau: f64) -> (bool, String) {
    let mut worst_fwd = 0.0f64;
    let mut worst_grad = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = SeededRng::new(seed);
        let n = 3 + rng.below(5);
        let pi0: Vec<f64> = (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let b = 1 + rng.below(n - 1);
        let w = Tensor::vector((0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let pi = Tensor::param(&[n], pi0.clone()).expect("shape");
        let p = match sort(&LogitVector::flat(pi.clone()).expect("flat"), tau) {
            Ok(p) => p,
            Err(e) => return (false, e.to_string()),
        };
        let want = sort_oracle(&pi0, tau);
        for (a, b) in p.matrix.data().iter().zip(&want) {
            worst_fwd = worst_fwd.max((a - b).abs());
        }
        let report = grad_check(
            |x| {
                let g = budget_gate(&sort(&LogitVector::flat(x.clone()).unwrap(), tau).unwrap(), b, &[n]).unwrap();
                Ok(g.gates.mul(&w)?.tanh().sum())
            },
            &pi,
            STEP,
            TOL,
        )
        .expect("scalar loss");
        worst_grad = worst_grad.max(report.max_rel_error);
    }
    (worst_fwd < 1e-9 && worst_grad < TOL, format!("forward dev {worst_fwd:.2e}, grad rel err {worst_grad:.2e}"))
}

/// Relaxed sort with the sign of the rank coefficient flipped.
fn flipped_sort(logits: &LogitVector, tau: f64) -> crate::relax::Result<RelaxedPermutation> {
    let neg = LogitVector::flat(logits.values.neg())?;
    neuralsort(&neg, tau)
}

fn param_check<F>(model: &Model, names: &[String], mut f: F) -> (bool, String)
where
    F: FnMut() -> AdResult<Tensor>,
{
    let mut worst = 0.0f64;
    for name in names {
        let p = model.param(name).expect("registered parameter").clone();
        let r = grad_check(|_| f(), &p, STEP, TOL).expect("scalar loss");
        worst = worst.max(r.max_rel_error);
    }
    (worst < TOL, format!("max rel err {worst:.2e} over {} tensors", names.len()))
}

fn skipgate_check(tau: f64) -> (bool, String) {
    let model = Model::new(tiny_spec(vec![3, 2]), 11).expect("spec");
    let scene = tiny_scene(4);
    let z = Tensor::constant(&[1, model.spec.z_dim()], (0..model.spec.z_dim()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    // keep the logits near zero so the relaxed gate is not saturated
    for m in ["a", "b"] {
        model.param(&format!("skip.{m}.out.b")).unwrap().data_mut()[0] = 0.1;
    }
    let masks = [HardMask::from_bits(vec![true, false, true]), HardMask::ones(2)];
    let names: Vec<String> = ["a", "b"]
        .iter()
        .flat_map(|m| ["hidden.w", "hidden.b", "out.w", "out.b", "z.w"].map(|p| format!("skip.{m}.{p}")))
        .collect();
    param_check(&model, &names, || {
        let mut sets = Vec::new();
        for (m, mask) in masks.iter().enumerate() {
            let ctx = SkipContext {
                z: z.clone(),
                other_allocated: 4 - mask.popcount,
            };
            let h0 = embed(&model, m, &scene.grids[m]).unwrap();
            let mode = SkipMode::Train { tau, noise: None };
            let (h, _, _) = encode_modality(&model, m, &h0, &Gates::Hard(mask), Some(&ctx), mode).unwrap();
            sets.push(crate::net::TokenSet {
                modality: m,
                features: h,
                cells: (0..16).collect(),
            });
        }
        let logits = fuse_and_head(&model, &sets).unwrap();
        detection_loss(&logits, &scene.occupancy).map_err(|e| match e {
            crate::net::NetError::Autodiff(a) => a,
            other => panic!("{other}"),
        })
    })
}

fn scorer_check(tau: f64) -> (bool, String) {
    // rounding has a zero finite-difference derivative, so the check covers
    // the sigmoid keep weights σ(s/τ) that the rounding passes gradients to
    let model = Model::new(tiny_spec(vec![2, 2]), 12).expect("spec");
    for m in ["a", "b"] {
        model.param(&format!("prune.{m}.l2.b")).unwrap().data_mut()[0] = 0.0;
    }
    let scene = tiny_scene(5);
    let names: Vec<String> = ["a", "b"]
        .iter()
        .flat_map(|m| ["l1.w", "l1.b", "l2.w", "l2.b"].map(|p| format!("prune.{m}.{p}")))
        .collect();
    let hs: Vec<Tensor> = (0..2)
        .map(|m| {
            let h0 = embed(&model, m, &scene.grids[m]).unwrap();
            let ones = HardMask::ones(2);
            encode_modality(&model, m, &h0, &Gates::Hard(&ones), None, SkipMode::Off).unwrap().0.detach()
        })
        .collect();
    param_check(&model, &names, || {
        let mut sets = Vec::new();
        for (m, h) in hs.iter().enumerate() {
            let w = token_logits(&model, m, h).unwrap().scale(1.0 / tau).sigmoid();
            sets.push(prune_tokens(m, h, &w, &w.data(), PruneMode::Soft).unwrap());
        }
        let logits = fuse_and_head(&model, &sets).unwrap();
        Ok(detection_loss(&logits, &scene.occupancy).unwrap())
    })
}

fn controller_check() -> (bool, String) {
    let model = Model::new(tiny_spec(vec![3, 2]), 13).expect("spec");
    let library = BudgetLibrary::for_model(&model).unwrap();
    let scene = tiny_scene(6);
    let names: Vec<String> = ["l1", "l2", "l3"].iter().flat_map(|l| ["w", "b"].map(|p| format!("ctrl.alloc.{l}.{p}"))).collect();
    let mut rng = SeededRng::new(0);
    let step = ControllerStep {
        budget: 3,
        tau: 1.0,
        estimator: Estimator::NeuralSort,
        alpha_env: 1.0,
        detach_z: false,
        noise: false,
    };
    let mut worst = 0.0f64;
    for name in &names {
        let p = model.param(name).unwrap().clone();
        let r = grad_check(|_| Ok(controller_loss(&model, &library, &scene, step, &mut rng).unwrap().total), &p, STEP, 1e-3).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    (worst < 1e-3, format!("max rel err {worst:.2e}"))
}

fn st_round_control() -> (bool, String) {
    let x = Tensor::param(&[4], vec![0.2, 0.45, 0.7, 0.9]).unwrap();
    let r = grad_check(|x| Ok(st_round(x).unwrap().mul(x)?.sum()), &x, STEP, TOL).unwrap();
    (!r.passed, format!("straight-through gradient differs from finite differences by {:.2e}", r.max_rel_error))
}

/// Runs every registered check with fixed seeds. Negative controls pass
/// when the deliberately broken computation is caught.
pub fn gradcheck_suite() -> SuiteReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, (passed, detail): (bool, String)| {
        checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        })
    };
    for tau in [1.0, 0.1] {
        push(&format!("neuralsort-budget-gate tau={tau}"), check_sort(neuralsort, tau));
        push(&format!("skipgate-gumbel-sigmoid tau={tau}"), skipgate_check(tau));
        push(&format!("token-scorer tau={tau}"), scorer_check(tau));
    }
    push("controller-end-to-end tau=1", controller_check());
    let (caught, detail) = check_sort(flipped_sort, 1.0);
    push("negative-control flipped-sort", (!caught, format!("broken sort detected: {}", !caught) + "; " + &detail));
    push("negative-control straight-through-round", st_round_control());
    SuiteReport { checks }
}
