//! Finite-difference gradient checking over randomly composed graphs.
//!
//! A `Plan` is a replayable recipe of node constructions. The analytic path
//! records the plan on a tape and runs backward; the numeric path re-executes
//! the same plan with one leaf entry nudged by ±h and takes a central
//! difference. The two must agree to a relative error below 1e-5.

use minimt_core::tensor::{Tape, Tensor, Var};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

/// One graph node, indices refer to earlier nodes in the plan.
#[derive(Debug, Clone)]
enum PlanNode {
    Leaf { shape: Vec<usize> },
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    SoftmaxRows(usize),
    MaskedSoftmax(usize, Vec<bool>),
    LayerNorm(usize, usize, usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy(usize, Vec<i64>),
}

/// Replay a plan against explicit leaf buffers (one per Leaf node, in order).
/// Returns the loss value and, when `want_grads`, each leaf's analytic grad.
fn execute(plan: &[PlanNode], leaf_data: &[Vec<f64>], want_grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let mut vars: Vec<Var> = Vec::new();
    let mut leaf_vars: Vec<Var> = Vec::new();
    let mut next_leaf = 0usize;
    for node in plan {
        let v = match node {
            PlanNode::Leaf { shape } => {
                let t = Tensor::new(shape.clone(), leaf_data[next_leaf].clone())
                    .unwrap()
                    .with_grad();
                next_leaf += 1;
                let v = tape.leaf(&t);
                leaf_vars.push(v);
                v
            }
            PlanNode::MatMul(a, b) => tape.matmul(vars[*a], vars[*b]).unwrap(),
            PlanNode::MatMulNT(a, b) => tape.matmul_nt(vars[*a], vars[*b]).unwrap(),
            PlanNode::Add(a, b) => tape.add(vars[*a], vars[*b]).unwrap(),
            PlanNode::AddBias(x, b) => tape.add_bias(vars[*x], vars[*b]).unwrap(),
            PlanNode::Mul(a, b) => tape.mul(vars[*a], vars[*b]).unwrap(),
            PlanNode::Scale(x, c) => tape.scale(vars[*x], *c),
            PlanNode::Gelu(x) => tape.gelu(vars[*x]),
            PlanNode::SoftmaxRows(x) => {
                let axis = tape.shape(vars[*x]).len() - 1;
                tape.softmax(vars[*x], axis).unwrap()
            }
            PlanNode::MaskedSoftmax(x, mask) => tape.masked_softmax(vars[*x], mask).unwrap(),
            PlanNode::LayerNorm(x, g, b) => {
                tape.layer_norm(vars[*x], vars[*g], vars[*b], 1e-5).unwrap()
            }
            PlanNode::Sum(x) => tape.sum(vars[*x]),
            PlanNode::Mean(x) => tape.mean(vars[*x]),
            PlanNode::CrossEntropy(x, targets) => {
                tape.cross_entropy(vars[*x], targets, -1).unwrap()
            }
        };
        vars.push(v);
    }
    let loss = *vars.last().unwrap();
    assert!(tape.is_all_finite(), "non-finite forward value");
    let loss_val = tape.value(loss)[0];
    if !want_grads {
        return (loss_val, Vec::new());
    }
    tape.backward(loss).unwrap();
    let grads = leaf_vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    (loss_val, grads)
}

/// Build a random plan: a root leaf, 3–7 chained ops with fresh partner
/// leaves where needed, then a scalar head.
fn random_plan(rng: &mut ChaCha8Rng) -> (Vec<PlanNode>, Vec<Vec<f64>>) {
    let mut plan: Vec<PlanNode> = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    let mut leaf_data: Vec<Vec<f64>> = Vec::new();

    fn add_leaf(
        shape: Vec<usize>,
        plan: &mut Vec<PlanNode>,
        shapes: &mut Vec<Vec<usize>>,
        leaf_data: &mut Vec<Vec<f64>>,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let n: usize = shape.iter().product();
        leaf_data.push((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect());
        plan.push(PlanNode::Leaf { shape: shape.clone() });
        shapes.push(shape);
        plan.len() - 1
    }

    let m = rng.gen_range(2..=6);
    let k = rng.gen_range(2..=8);
    let mut cur = add_leaf(vec![m, k], &mut plan, &mut shapes, &mut leaf_data, rng);

    let n_ops = rng.gen_range(3..=7);
    for _ in 0..n_ops {
        let cs = shapes[cur].clone();
        let (rows, cols) = (cs[0], cs[1]);
        match rng.gen_range(0..10) {
            0 => {
                let n = rng.gen_range(2..=8);
                let b = add_leaf(vec![cols, n], &mut plan, &mut shapes, &mut leaf_data, rng);
                plan.push(PlanNode::MatMul(cur, b));
                shapes.push(vec![rows, n]);
            }
            1 => {
                let n = rng.gen_range(2..=8);
                let b = add_leaf(vec![n, cols], &mut plan, &mut shapes, &mut leaf_data, rng);
                plan.push(PlanNode::MatMulNT(cur, b));
                shapes.push(vec![rows, n]);
            }
            2 => {
                let b = add_leaf(cs.clone(), &mut plan, &mut shapes, &mut leaf_data, rng);
                plan.push(PlanNode::Add(cur, b));
                shapes.push(cs);
            }
            3 => {
                let b = add_leaf(vec![cols], &mut plan, &mut shapes, &mut leaf_data, rng);
                plan.push(PlanNode::AddBias(cur, b));
                shapes.push(cs);
            }
            4 => {
                let b = add_leaf(cs.clone(), &mut plan, &mut shapes, &mut leaf_data, rng);
                plan.push(PlanNode::Mul(cur, b));
                shapes.push(cs);
            }
            5 => {
                plan.push(PlanNode::Scale(cur, rng.gen_range(0.25..2.0)));
                shapes.push(cs);
            }
            6 => {
                plan.push(PlanNode::Gelu(cur));
                shapes.push(cs);
            }
            7 => {
                plan.push(PlanNode::SoftmaxRows(cur));
                shapes.push(cs);
            }
            8 => {
                let mut mask = vec![false; rows * cols];
                for i in 0..rows {
                    let forced = rng.gen_range(0..cols);
                    for j in 0..cols {
                        mask[i * cols + j] = j == forced || rng.gen_bool(0.7);
                    }
                }
                plan.push(PlanNode::MaskedSoftmax(cur, mask));
                shapes.push(cs);
            }
            _ => {
                let g = add_leaf(vec![cols], &mut plan, &mut shapes, &mut leaf_data, rng);
                let b = add_leaf(vec![cols], &mut plan, &mut shapes, &mut leaf_data, rng);
                plan.push(PlanNode::LayerNorm(cur, g, b));
                shapes.push(cs);
            }
        }
        cur = plan.len() - 1;
    }

    let cs = shapes[cur].clone();
    match rng.gen_range(0..4) {
        0 => plan.push(PlanNode::Sum(cur)),
        1 => plan.push(PlanNode::Mean(cur)),
        _ => {
            let (rows, cols) = (cs[0], cs[1]);
            let targets: Vec<i64> = (0..rows)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        -1
                    } else {
                        rng.gen_range(0..cols as i64)
                    }
                })
                .collect();
            if targets.iter().all(|&t| t == -1) {
                plan.push(PlanNode::Sum(cur));
            } else {
                plan.push(PlanNode::CrossEntropy(cur, targets));
            }
        }
    }
    (plan, leaf_data)
}

fn check_plan(plan: &[PlanNode], leaf_data: &[Vec<f64>]) -> f64 {
    let (_, analytic) = execute(plan, leaf_data, true);
    let mut worst = 0.0f64;
    for (li, data) in leaf_data.iter().enumerate() {
        for j in 0..data.len() {
            let mut plus = leaf_data.to_vec();
            plus[li][j] += H;
            let (fp, _) = execute(plan, &plus, false);
            let mut minus = leaf_data.to_vec();
            minus[li][j] -= H;
            let (fm, _) = execute(plan, &minus, false);
            let numeric = (fp - fm) / (2.0 * H);
            let a = analytic[li][j];
            let rel = (a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs()));
            worst = worst.max(rel);
        }
    }
    worst
}

/// 100 seeded random composite graphs, dims ≤ 8: analytic vs central
/// difference must agree with relative error < 1e-5.
#[test]
fn gradients_match_central_differences_on_100_random_graphs() {
    let mut worst_overall = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF_0000 + seed);
        let (plan, leaf_data) = random_plan(&mut rng);
        let worst = check_plan(&plan, &leaf_data);
        assert!(
            worst < REL_TOL,
            "seed {seed}: worst relative error {worst:.3e} in plan {plan:?}"
        );
        worst_overall = worst_overall.max(worst);
    }
    println!("worst relative error over 100 graphs: {worst_overall:.3e}");
}

/// Composite of every op the transformer uses, checked end to end.
#[test]
fn gradients_match_on_attention_like_composite() {
    let plan = vec![
        PlanNode::Leaf { shape: vec![4, 6] },  // 0: x
        PlanNode::Leaf { shape: vec![6, 6] },  // 1: wq
        PlanNode::Leaf { shape: vec![6, 6] },  // 2: wk
        PlanNode::Leaf { shape: vec![6, 6] },  // 3: wv
        PlanNode::Leaf { shape: vec![6] },     // 4: gain
        PlanNode::Leaf { shape: vec![6] },     // 5: bias
        PlanNode::LayerNorm(0, 4, 5),          // 6
        PlanNode::MatMul(6, 1),                // 7: q
        PlanNode::MatMul(6, 2),                // 8: k
        PlanNode::MatMul(6, 3),                // 9: v
        PlanNode::MatMulNT(7, 8),              // 10: scores
        PlanNode::Scale(10, 1.0 / 6.0_f64.sqrt()), // 11
        PlanNode::MaskedSoftmax(
            11,
            (0..16).map(|i| (i % 4) <= (i / 4)).collect(),
        ),                                     // 12: causal probs
        PlanNode::MatMul(12, 9),               // 13: ctx
        PlanNode::Gelu(13),                    // 14
        PlanNode::CrossEntropy(14, vec![0, 5, -1, 2]), // 15
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let leaf_data: Vec<Vec<f64>> = plan
        .iter()
        .filter_map(|n| match n {
            PlanNode::Leaf { shape } => {
                let n: usize = shape.iter().product();
                Some((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            }
            _ => None,
        })
        .collect();
    let worst = check_plan(&plan, &leaf_data);
    assert!(worst < REL_TOL, "worst relative error {worst:.3e}");
}

/// (AB)C ≈ A(BC) on small random matrices, 1e-9.
#[test]
fn matmul_is_associative_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let m = rng.gen_range(2..=6);
        let k = rng.gen_range(2..=6);
        let n = rng.gen_range(2..=6);
        let p = rng.gen_range(2..=6);
        let a = Tensor::randn(vec![m, k], 0.0, 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 0.0, 1.0, &mut rng);
        let c = Tensor::randn(vec![n, p], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (va, vb, vc) = (tape.leaf(&a), tape.leaf(&b), tape.leaf(&c));
        let ab = tape.matmul(va, vb).unwrap();
        let ab_c = tape.matmul(ab, vc).unwrap();
        let bc = tape.matmul(vb, vc).unwrap();
        let a_bc = tape.matmul(va, bc).unwrap();
        for (x, y) in tape.value(ab_c).iter().zip(tape.value(a_bc)) {
            assert!((x - y).abs() < 1e-9, "associativity violated: {x} vs {y}");
        }
    }
}

/// Random graphs keep every forward value finite.
#[test]
fn random_graphs_stay_finite() {
    for seed in 100..140u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (plan, leaf_data) = random_plan(&mut rng);
        let (loss, _) = execute(&plan, &leaf_data, false);
        assert!(loss.is_finite());
    }
}
