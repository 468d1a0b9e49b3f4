//! Finite-difference checks of every differentiable op, plus the backward
//! contract (sum rule, scalar loss, frozen leaves).

use budgetnet::autodiff::{grad_check, ParamStore, SeededRng, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.uniform_range(lo, hi)).collect()
}

/// Values bounded away from zero so relu/abs kinks are never straddled.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize]) -> Vec<f64> {
    random(rng, shape, 0.1, 1.0)
        .into_iter()
        .map(|v| if rng.bernoulli(0.5) { v } else { -v })
        .collect()
}

fn random_shape(rng: &mut SeededRng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(if rank == 3 { 6 } else { 16 })).collect()
}

/// Central differences computed independently of the library checker.
fn fd_oracle(f: &dyn Fn(&Tensor) -> Tensor, x0: &[f64], shape: &[usize]) -> Vec<f64> {
    (0..x0.len())
        .map(|k| {
            let mut plus = x0.to_vec();
            let mut minus = x0.to_vec();
            plus[k] += STEP;
            minus[k] -= STEP;
            let fp = f(&Tensor::constant(shape, plus).unwrap()).item();
            let fm = f(&Tensor::constant(shape, minus).unwrap()).item();
            (fp - fm) / (2.0 * STEP)
        })
        .collect()
}

fn check(name: &str, f: &dyn Fn(&Tensor) -> Tensor, x0: Vec<f64>, shape: &[usize]) {
    let x = Tensor::param(shape, x0.clone()).unwrap();
    let loss = f(&x);
    loss.backward().unwrap();
    let analytic = x.grad().clone();
    let numeric = fd_oracle(f, &x0, shape);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        assert!(rel < TOL, "{name}: entry {k} analytic {a} numeric {n} (shape {shape:?})");
    }
}

/// Projects an op output onto random weights so every entry's gradient is exercised.
fn project(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed ^ 0xABCD);
    let w = Tensor::constant(out.shape(), random(&mut rng, out.shape(), -1.0, 1.0)).unwrap();
    out.mul(&w).unwrap().sum()
}

#[test]
fn unary_ops_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(seed);
        let rank = 1 + rng.below(3);
        let shape = random_shape(&mut rng, rank);
        let x0 = away_from_zero(&mut rng, &shape);
        check("relu", &|x| project(&x.relu(), seed), x0.clone(), &shape);
        check("sigmoid", &|x| project(&x.sigmoid(), seed), x0.clone(), &shape);
        check("tanh", &|x| project(&x.tanh(), seed), x0.clone(), &shape);
        check("scale", &|x| project(&x.scale(-2.5), seed), x0.clone(), &shape);
        let axis = rng.below(rank);
        check("sum_axis", &|x| project(&x.sum_axis(axis).unwrap(), seed), x0.clone(), &shape);
        check("mean_axis", &|x| project(&x.mean_axis(axis).unwrap(), seed), x0.clone(), &shape);
    }
}

#[test]
fn binary_ops_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(100 + seed);
        let shape = random_shape(&mut rng, 2);
        let other_same = Tensor::constant(&shape, away_from_zero(&mut rng, &shape)).unwrap();
        let row = Tensor::constant(&[1, shape[1]], away_from_zero(&mut rng, &[1, shape[1]])).unwrap();
        let col = Tensor::constant(&[shape[0], 1], away_from_zero(&mut rng, &[shape[0], 1])).unwrap();
        let x0 = away_from_zero(&mut rng, &shape);
        for other in [&other_same, &row, &col] {
            check("add", &|x| project(&x.add(other).unwrap(), seed), x0.clone(), &shape);
            check("sub", &|x| project(&x.sub(other).unwrap(), seed), x0.clone(), &shape);
            check("mul", &|x| project(&x.mul(other).unwrap(), seed), x0.clone(), &shape);
        }
        // gradient into the broadcast operand itself
        let big = Tensor::constant(&shape, x0.clone()).unwrap();
        let r0 = row.to_vec();
        check("mul row operand", &|r| project(&big.mul(r).unwrap(), seed), r0.clone(), &[1, shape[1]]);
        check("sub row operand", &|r| project(&big.sub(r).unwrap(), seed), r0, &[1, shape[1]]);
        let c0 = col.to_vec();
        check("mul col operand", &|c| project(&big.mul(c).unwrap(), seed), c0, &[shape[0], 1]);
        check("mul scalar operand", &|s| project(&big.mul(s).unwrap(), seed), vec![0.7], &[1]);
    }
}

#[test]
fn matmul_matches_finite_differences() {
    // the 3×4 · 4×2 case at the required relative tolerance, plus random sizes
    let mut rng = SeededRng::new(3);
    let a0 = random(&mut rng, &[3, 4], -1.0, 1.0);
    let b = Tensor::constant(&[4, 2], random(&mut rng, &[4, 2], -1.0, 1.0)).unwrap();
    check("matmul lhs", &|a| project(&a.matmul(&b).unwrap(), 1), a0.clone(), &[3, 4]);
    let a = Tensor::constant(&[3, 4], a0).unwrap();
    let b0 = b.to_vec();
    check("matmul rhs", &|b| project(&a.matmul(b).unwrap(), 1), b0, &[4, 2]);
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(200 + seed);
        let (m, k, n) = (1 + rng.below(16), 1 + rng.below(16), 1 + rng.below(16));
        let rhs = Tensor::constant(&[k, n], random(&mut rng, &[k, n], -1.0, 1.0)).unwrap();
        check("matmul", &|a| project(&a.matmul(&rhs).unwrap(), seed), random(&mut rng, &[m, k], -1.0, 1.0), &[m, k]);
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(300 + seed);
        let rank = 1 + rng.below(3);
        let shape = random_shape(&mut rng, rank);
        let axis = rng.below(rank);
        let mut other_shape = shape.clone();
        other_shape[axis] = 1 + rng.below(4);
        let other = Tensor::constant(&other_shape, random(&mut rng, &other_shape, -1.0, 1.0)).unwrap();
        let x0 = random(&mut rng, &shape, -1.0, 1.0);
        check(
            "concat",
            &|x| project(&Tensor::concat(&[x.clone(), other.clone(), x.clone()], axis).unwrap(), seed),
            x0.clone(),
            &shape,
        );
        let n = x0.len();
        let index: Vec<usize> = (0..7).map(|_| rng.below(n)).collect();
        check("gather", &|x| project(&x.gather(&index, &[7]).unwrap(), seed), x0.clone(), &shape);
        let pairs: Vec<(usize, usize)> = (0..9).map(|_| (rng.below(n), rng.below(5))).collect();
        check("scatter_add", &|x| project(&x.scatter_add(&pairs, &[5]).unwrap(), seed), x0.clone(), &shape);
        check("reshape", &|x| project(&x.reshape(&[n]).unwrap(), seed), x0, &shape);
    }
}

#[test]
fn relaxation_primitives_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(400 + seed);
        let shape = random_shape(&mut rng, 2);
        check("softmax_rows", &|x| project(&x.softmax_rows().unwrap(), seed), random(&mut rng, &shape, -2.0, 2.0), &shape);
        // distinct entries so no |·| kink is straddled
        let n = 1 + rng.below(16);
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
        rng.shuffle(&mut v);
        check("abs_pairwise_diff", &|x| project(&x.abs_pairwise_diff(), seed), v, &[n]);
    }
}

#[test]
fn losses_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(500 + seed);
        let shape = random_shape(&mut rng, 2);
        let targets: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.uniform()).collect();
        check("bce_with_logits", &|x| x.bce_with_logits(&targets).unwrap(), random(&mut rng, &shape, -3.0, 3.0), &shape);
        let labels: Vec<usize> = (0..shape[0]).map(|_| rng.below(shape[1])).collect();
        check("ce_with_logits", &|x| x.ce_with_logits(&labels).unwrap(), random(&mut rng, &shape, -3.0, 3.0), &shape);
    }
}

#[test]
fn composite_softmax_matmul_loss() {
    let mut rng = SeededRng::new(42);
    let w = Tensor::constant(&[5, 3], random(&mut rng, &[5, 3], -1.0, 1.0)).unwrap();
    let f = |x: &Tensor| x.softmax_rows().unwrap().matmul(&w).unwrap().tanh().sum();
    let x0 = random(&mut rng, &[4, 5], -2.0, 2.0);
    let x = Tensor::param(&[4, 5], x0.clone()).unwrap();
    f(&x).backward().unwrap();
    let numeric = fd_oracle(&f, &x0, &[4, 5]);
    for (a, n) in x.grad().iter().zip(&numeric) {
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-3) < 1e-5, "{a} vs {n}");
    }
}

#[test]
fn backward_scalar_examples() {
    let x = Tensor::param(&[1], vec![3.0]).unwrap();
    x.mul(&x).unwrap().backward().unwrap();
    assert_eq!(x.grad()[0], 6.0);

    let y = Tensor::param(&[1], vec![0.0]).unwrap();
    y.sigmoid().backward().unwrap();
    assert_eq!(y.grad()[0], 0.25);
}

#[test]
fn sum_rule_accumulates_over_consumers() {
    let x = Tensor::param(&[2], vec![1.5, -2.0]).unwrap();
    let a = x.scale(3.0);
    let b = x.mul(&x).unwrap();
    a.add(&b).unwrap().sum().backward().unwrap();
    assert_eq!(*x.grad(), vec![3.0 + 3.0, 3.0 - 4.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(x.relu().backward().is_err());
}

#[test]
fn shape_errors_name_the_op() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    assert!(Tensor::zeros(&[3]).softmax_rows().is_err());
    assert!(Tensor::concat(&[Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 3])], 1).is_err());
}

#[test]
fn softmax_and_pairwise_examples() {
    let s = Tensor::constant(&[1, 3], vec![0.0; 3]).unwrap().softmax_rows().unwrap();
    for v in s.data().iter() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let d = Tensor::vector(vec![2.0, 1.0, 0.0]).abs_pairwise_diff();
    assert_eq!(*d.data(), vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut ps = ParamStore::new();
    let w = ps.insert("w", &[2], vec![1.0, 2.0]).unwrap();
    let v = ps.insert("v", &[2], vec![3.0, 4.0]).unwrap();
    ps.set_trainable("w", false).unwrap();
    w.mul(&v).unwrap().sum().backward().unwrap();
    assert_eq!(*w.grad(), vec![0.0, 0.0]);
    assert_eq!(*v.grad(), vec![1.0, 2.0]);
}

#[test]
fn grad_check_linear_is_exact_and_negative_control_fails() {
    let x = Tensor::param(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
    let r = grad_check(|x| Ok(x.sum()), &x, STEP, 1e-9).unwrap();
    assert!(r.passed);
    assert!(r.max_rel_error < 1e-9);

    // forward x², backward identity: analytic 1 vs true 2x
    let bad = grad_check(
        |x| {
            let sq: Vec<f64> = x.data().iter().map(|v| v * v).collect();
            Ok(x.straight_through(sq)?.sum())
        },
        &x,
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(!bad.passed);

    assert!(grad_check(|x| Ok(x.relu()), &x, STEP, 1e-4).is_err());
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let run = || {
        let mut rng = SeededRng::new(11);
        let mut ps = ParamStore::new();
        let w = ps.insert("w", &[3, 2], random(&mut rng, &[3, 2], -1.0, 1.0)).unwrap();
        let mut opt = budgetnet::autodiff::Adam::with_lr(0.05);
        for _ in 0..50 {
            budgetnet::autodiff::zero_grad(&ps);
            let x = Tensor::constant(&[4, 3], random(&mut rng, &[4, 3], -1.0, 1.0)).unwrap();
            x.matmul(&w).unwrap().tanh().sum().backward().unwrap();
            opt.step(&ps);
        }
        w.to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
