#![allow(dead_code)]

use std::collections::BTreeSet;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crocodile::data::{generate_synthetic, SyntheticSpec};
use crocodile::diagnostics::{auc, gauc, information_abundance};
use crocodile::losses::{covloss, covloss_tensors, total_loss, LossReport, PairSet};
use crocodile::model::{gate_peg, gate_vector_softmax, mix_scalar};
use crocodile::params::uniform;
use crocodile::{Batch, Dataset, LossConfig, Model, ModelConfig, Result, Tape, Tensor, Var, Variant};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 1.0, seed)
}

/// Uniform values with `0.1 ≤ |x| ≤ 1`, away from kinks at zero.
pub fn random_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Scalar `Σ y ⊙ W` for a fixed random `W`, so every output element matters.
fn scalarize(tape: &mut Tape, y: Var) -> Var {
    let shape = tape.value(y).shape().to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return y;
    }
    let w = tape.constant(random(&shape, 977));
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod).unwrap()
}

fn eval(inputs: &[Tensor], f: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, y);
    tape.value(s).item()
}

/// Largest relative error between backward-pass and central-difference
/// gradients over every input element.
pub fn check_op(inputs: Vec<Tensor>, f: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&mut tape, &vars).unwrap();
    let s = scalarize(&mut tape, y);
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).unwrap().clone();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, f) - eval(&minus, f)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}

/// Every differentiable operation, as `(name, max relative error)`.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let r = random;
    let z = random_away_from_zero;
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut add = |name, inputs, f: &Build<'_>| out.push((name, check_op(inputs, f)));

    add("matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], &|t, v| t.matmul(v[0], v[1]));
    add("relu", vec![z(&[3, 4], 3)], &|t, v| t.relu(v[0]));
    add("sigmoid", vec![r(&[3, 4], 4)], &|t, v| t.sigmoid(v[0]));
    add("abs", vec![z(&[3, 4], 5)], &|t, v| t.abs(v[0]));
    add("add", vec![r(&[3, 4], 6), r(&[3, 4], 7)], &|t, v| t.add(v[0], v[1]));
    add("add_row_broadcast", vec![r(&[3, 4], 8), r(&[1, 4], 9)], &|t, v| t.add(v[0], v[1]));
    add("sub", vec![r(&[3, 4], 10), r(&[4], 11)], &|t, v| t.sub(v[0], v[1]));
    add("mul", vec![r(&[2, 3, 2], 12), r(&[2, 3, 2], 13)], &|t, v| t.mul(v[0], v[1]));
    add("mul_row_broadcast", vec![r(&[3, 4], 14), r(&[1, 4], 15)], &|t, v| t.mul(v[0], v[1]));
    add("div", vec![r(&[3, 4], 16), z(&[3, 4], 17)], &|t, v| t.div(v[0], v[1]));
    add("scale", vec![r(&[3, 4], 18)], &|t, v| t.scale(v[0], -2.5));
    add("softmax_axis1", vec![r(&[3, 5], 19)], &|t, v| t.softmax(v[0], 1));
    add("softmax_axis0", vec![r(&[3, 5], 20)], &|t, v| t.softmax(v[0], 0));
    add("softmax_3d_middle", vec![r(&[2, 3, 4], 21)], &|t, v| t.softmax(v[0], 1));
    add("gather_rows_repeated", vec![r(&[4, 3], 22)], &|t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2]));
    add("reshape", vec![r(&[3, 4], 23)], &|t, v| t.reshape(v[0], &[2, 6]));
    add("transpose", vec![r(&[3, 4], 24)], &|t, v| t.transpose(v[0]));
    add("stack", vec![r(&[3, 2], 25), r(&[3, 2], 26), r(&[3, 2], 27)], &|t, v| t.stack(v));
    add("expand_last", vec![r(&[3, 2], 28)], &|t, v| t.expand_last(v[0], 4));
    add("sum_axis", vec![r(&[2, 3, 4], 29)], &|t, v| t.sum_axis(v[0], 1));
    add("mean_rows", vec![r(&[5, 3], 30)], &|t, v| t.mean_rows(v[0]));
    add("abs_sum", vec![z(&[3, 4], 31)], &|t, v| t.abs_sum(v[0]));
    add("sum", vec![r(&[3, 4], 32)], &|t, v| t.sum(v[0]));
    add("mean", vec![r(&[3, 4], 33)], &|t, v| t.mean(v[0]));
    let probs = {
        let u = random(&[6], 34);
        Tensor::new(vec![6], u.data().iter().map(|x| 0.5 + 0.4 * x).collect()).unwrap()
    };
    add("bce", vec![probs], &|t, v| t.bce(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
    add("row_norm", vec![z(&[4, 3], 35)], &|t, v| t.row_norm(v[0], 1e-12));
    add("gate_vector_softmax", vec![r(&[4, 3], 36), r(&[3, 5], 37)], &|t, v| gate_vector_softmax(t, v[0], v[1]));
    add("mix_scalar", vec![r(&[4, 3], 38), r(&[4, 3, 2], 39)], &|t, v| mix_scalar(t, v[0], v[1]));
    add("gate_peg", vec![r(&[4, 3], 40), r(&[3, 6], 41), r(&[4, 3, 2], 42)], &|t, v| {
        gate_peg(t, v[0], v[1], v[2]).map(|(_, mixed)| mixed)
    });
    add("covloss_strict", vec![r(&[6, 3], 43), r(&[6, 3], 44), r(&[6, 3], 45)], &|t, v| covloss(t, v, PairSet::StrictCross));
    add("covloss_literal", vec![r(&[5, 4], 46), r(&[5, 4], 47)], &|t, v| covloss(t, v, PairSet::Literal));
    out
}

pub fn tiny_dataset() -> Dataset {
    let spec = SyntheticSpec {
        domain_sizes: vec![40, 30, 20],
        num_users: 12,
        num_items: 20,
        num_categories: 4,
        num_contexts: 3,
        seed: 11,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec).unwrap()
}

pub fn tiny_model(variant: Variant, schema: &crocodile::Schema, seed: u64) -> Model {
    let cfg = ModelConfig {
        variant,
        num_tables: 2,
        num_experts: 3,
        embed_dim: 4,
        expert_dim: 4,
        expert_hidden: vec![6],
        tower_hidden: vec![4],
        seed,
        ..ModelConfig::default()
    };
    Model::new(cfg, schema).unwrap()
}

fn loss_report(model: &Model, batch: &Batch, cfg: &LossConfig, s: usize) -> LossReport {
    let mut pass = model.forward(batch, true).unwrap();
    total_loss(&mut pass, batch, cfg, s, 7).unwrap().1
}

/// Domain whose loss alone reaches parameter `name` through the tape, when
/// the other domains only see it through detached gate inputs.
fn detached_owner(model: &Model, name: &str) -> Option<usize> {
    if !model.variant().is_domain_bound() || model.gates.iter().flatten().all(|g| g.detached.iter().all(|&d| !d)) {
        return None;
    }
    let mut parts = name.split('.');
    let (kind, idx) = (parts.next()?, parts.next()?.parse::<usize>().ok()?);
    match kind {
        "emb" => model.bank.table_domain(idx),
        "expert" => model.experts[idx].domain,
        _ => None,
    }
}

/// Total-loss gradient check of one variant, over the three largest-gradient
/// entries and two random entries of every parameter.
///
/// With stop-gradient gate inputs the tape differentiates the loss with those
/// inputs frozen, so owned parameters are compared against the owning
/// domain's BCE plus the weighted CovLoss.
pub fn variant_gradient_error(variant: Variant, alpha: f64) -> f64 {
    let ds = tiny_dataset();
    let rows: Vec<usize> = (0..ds.len()).step_by(3).collect();
    let batch = Batch::from_rows(&ds, &rows);
    let s = ds.num_domains();
    let mut model = tiny_model(variant, &ds.schema, 21);
    // Non-zero final layers so every path carries gradient.
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = uniform(p.value.shape(), 0.3, p.name.len() as u64);
        }
    }
    let cfg = LossConfig { alpha, ..LossConfig::default() };

    let mut pass = model.forward(&batch, true).unwrap();
    let (loss, _) = total_loss(&mut pass, &batch, &cfg, s, 7).unwrap();
    let mut grads = pass.tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = pass.vars.iter().map(|&v| grads.take(v).unwrap()).collect();

    let mut r = rng(variant as u64);
    let mut worst: f64 = 0.0;
    for (pi, g) in analytic.iter().enumerate() {
        let name = model.params.iter().nth(pi).unwrap().name.clone();
        let owner = detached_owner(&model, &name);
        let objective = |rep: LossReport| match owner {
            Some(d) => rep.bce[d].unwrap_or(0.0) + rep.alpha * rep.disentangle,
            None => rep.total,
        };
        let mut order: Vec<usize> = (0..g.numel()).collect();
        order.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
        let mut picks: BTreeSet<usize> = order.iter().take(3).copied().collect();
        for _ in 0..2 {
            picks.insert(r.random_range(0..g.numel()));
        }
        for j in picks {
            let orig = model.params.iter().nth(pi).unwrap().value.data()[j];
            model.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = orig + FD_STEP;
            let up = objective(loss_report(&model, &batch, &cfg, s));
            model.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = orig - FD_STEP;
            let down = objective(loss_report(&model, &batch, &cfg, s));
            model.params.iter_mut().nth(pi).unwrap().value.data_mut()[j] = orig;
            worst = worst.max(rel_err(g.data()[j], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// `(1/d²) Σ_{p>q} Σ |M|` over the `(p,q)` blocks of `M = C_allᵀ C_all`,
/// `C_all` the column-centered concatenation of all experts.
pub fn covloss_dense(experts: &[Tensor], include_self: bool) -> f64 {
    let k = experts.len();
    let n = experts[0].rows();
    let d = experts[0].row_len();
    let w = k * d;
    let mut c = vec![0.0; n * w];
    for (e, t) in experts.iter().enumerate() {
        for col in 0..d {
            let mean = (0..n).map(|i| t.at2(i, col)).sum::<f64>() / n as f64;
            for i in 0..n {
                c[i * w + e * d + col] = t.at2(i, col) - mean;
            }
        }
    }
    let mut m = vec![0.0; w * w];
    for a in 0..w {
        for b in 0..w {
            m[a * w + b] = (0..n).map(|i| c[i * w + a] * c[i * w + b]).sum();
        }
    }
    let mut total = 0.0;
    for p in 0..k {
        for q in 0..k {
            if p > q || (include_self && p == q) {
                for a in 0..d {
                    for b in 0..d {
                        total += m[(p * d + a) * w + q * d + b].abs();
                    }
                }
            }
        }
    }
    total / (d * d) as f64
}

/// Pairwise-comparison AUC: twice the win count over `2·P·N`.
pub fn auc_brute(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y > 0.5).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y <= 0.5).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins2: u64 = 0;
    for &p in &pos {
        for &n in &neg {
            wins2 += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    Some(wins2 as f64 / 2.0 / (pos.len() as f64 * neg.len() as f64))
}

/// Per-user brute-force AUCs in ascending user order, impression weighted.
pub fn gauc_brute(scores: &[f64], labels: &[f64], users: &[u32]) -> Option<f64> {
    let ids: BTreeSet<u32> = users.iter().copied().collect();
    let (mut num, mut den) = (0.0, 0.0);
    for u in ids {
        let idx: Vec<usize> = (0..users.len()).filter(|&i| users[i] == u).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        if let Some(a) = auc_brute(&s, &y) {
            num += idx.len() as f64 * a;
            den += idx.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Random scoring instance with ties (scores on a coarse grid) and users
/// that may see a single class.
pub fn scoring_instance(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let mut r = rng(seed);
    let n = r.random_range(1..=1000);
    let grid = r.random_range(2..50);
    let users = r.random_range(1..40);
    let p = r.random_range(0.05..0.95);
    let scores = (0..n).map(|_| r.random_range(0..grid) as f64 / grid as f64).collect();
    let labels = (0..n).map(|_| if r.random_bool(p) { 1.0 } else { 0.0 }).collect();
    let users = (0..n).map(|_| r.random_range(0..users)).collect();
    (scores, labels, users)
}

pub fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

pub const PROPERTY_CASES: u32 = 200;

fn experts_strategy() -> impl Strategy<Value = Vec<Tensor>> {
    (2usize..=4, 2usize..=12, 1usize..=6).prop_flat_map(|(k, n, d)| {
        proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, n * d), k)
            .prop_map(move |vs| vs.into_iter().map(|v| Tensor::new(vec![n, d], v).unwrap()).collect())
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

pub fn covloss_permutation() -> std::result::Result<(), String> {
    let strat = (experts_strategy(), any::<u64>());
    runner(PROPERTY_CASES)
        .run(&strat, |(experts, seed)| {
            let base = covloss_tensors(&experts, PairSet::StrictCross).unwrap();
            let mut r = rng(seed);
            let mut ex = experts.clone();
            for i in (1..ex.len()).rev() {
                ex.swap(i, r.random_range(0..=i));
            }
            let n = ex[0].rows();
            let mut rows: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                rows.swap(i, r.random_range(0..=i));
            }
            let permuted: Vec<Tensor> = ex.iter().map(|t| t.select_rows(&rows)).collect();
            let other = covloss_tensors(&permuted, PairSet::StrictCross).unwrap();
            prop_assert!(close(base, other), "{base} vs {other}");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn covloss_shift() -> std::result::Result<(), String> {
    let strat = (experts_strategy(), -5.0f64..5.0);
    runner(PROPERTY_CASES)
        .run(&strat, |(experts, c)| {
            let base = covloss_tensors(&experts, PairSet::StrictCross).unwrap();
            let shifted: Vec<Tensor> = experts
                .iter()
                .enumerate()
                .map(|(e, t)| {
                    let d = t.row_len();
                    let data = t.data().iter().enumerate().map(|(i, v)| v + c * (1 + e + i % d) as f64).collect();
                    Tensor::new(t.shape().to_vec(), data).unwrap()
                })
                .collect();
            let other = covloss_tensors(&shifted, PairSet::StrictCross).unwrap();
            prop_assert!((base - other).abs() <= 1e-8 * base.max(1.0), "{base} vs {other}");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn covloss_quadratic_scaling() -> std::result::Result<(), String> {
    let strat = (experts_strategy(), 0.1f64..4.0);
    runner(PROPERTY_CASES)
        .run(&strat, |(experts, c)| {
            let base = covloss_tensors(&experts, PairSet::StrictCross).unwrap();
            let scaled: Vec<Tensor> = experts
                .iter()
                .map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap())
                .collect();
            let other = covloss_tensors(&scaled, PairSet::StrictCross).unwrap();
            prop_assert!(close(other, c * c * base), "{other} vs {}", c * c * base);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn softmax_normalization() -> std::result::Result<(), String> {
    let strat = (1usize..=5, 1usize..=6, 1usize..=4).prop_flat_map(|(a, b, c)| {
        (proptest::collection::vec(-30.0f64..30.0, a * b * c), Just(vec![a, b, c]), 0usize..3)
    });
    runner(PROPERTY_CASES)
        .run(&strat, |(data, shape, axis)| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(shape.clone(), data).unwrap());
            let y = tape.softmax(x, axis).unwrap();
            let sums = tape.sum_axis(y, axis).unwrap();
            prop_assert!(tape.value(y).data().iter().all(|&v| v > 0.0 && v <= 1.0));
            prop_assert!(tape.value(sums).data().iter().all(|&s| (s - 1.0).abs() < 1e-12));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn ia_invariances() -> std::result::Result<(), String> {
    let strat = (1usize..=8, 1usize..=8)
        .prop_flat_map(|(r, c)| (proptest::collection::vec(-2.0f64..2.0, r * c), Just((r, c)), 0.01f64..100.0, any::<u64>()));
    runner(PROPERTY_CASES)
        .run(&strat, |(data, (r, c), scale, seed)| {
            let m = Tensor::new(vec![r, c], data).unwrap();
            prop_assume!(m.norm() > 1e-3);
            let base = information_abundance(&m).unwrap();
            let scaled = Tensor::new(vec![r, c], m.data().iter().map(|v| v * scale).collect()).unwrap();
            let ia_scaled = information_abundance(&scaled).unwrap();
            let mut g = rng(seed);
            let mut rows: Vec<usize> = (0..r).collect();
            let mut cols: Vec<usize> = (0..c).collect();
            for i in (1..r).rev() {
                rows.swap(i, g.random_range(0..=i));
            }
            for i in (1..c).rev() {
                cols.swap(i, g.random_range(0..=i));
            }
            let permuted: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| m.at2(i, j)).collect();
            let ia_perm = information_abundance(&Tensor::new(vec![r, c], permuted).unwrap()).unwrap();
            prop_assert!((base - ia_scaled).abs() < 1e-7 * base, "{base} vs {ia_scaled}");
            prop_assert!((base - ia_perm).abs() < 1e-7 * base, "{base} vs {ia_perm}");
            prop_assert!(base >= 1.0 - 1e-9 && base <= r.min(c) as f64 + 1e-9);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn auc_monotone_invariance() -> std::result::Result<(), String> {
    let strat = (1usize..=300)
        .prop_flat_map(|n| (proptest::collection::vec((0u32..40, any::<bool>(), 0u32..8), n), -3.0f64..3.0, 0.1f64..5.0));
    runner(PROPERTY_CASES)
        .run(&strat, |(rows, shift, a)| {
            let scores: Vec<f64> = rows.iter().map(|r| r.0 as f64 / 10.0).collect();
            let labels: Vec<f64> = rows.iter().map(|r| r.1 as u8 as f64).collect();
            let users: Vec<u32> = rows.iter().map(|r| r.2).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s).exp() + shift).collect();
            prop_assert_eq!(auc(&scores, &labels), auc(&mapped, &labels));
            prop_assert_eq!(gauc(&scores, &labels, &users), gauc(&mapped, &labels, &users));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every invariance property with its outcome.
pub fn invariance_properties() -> Vec<(&'static str, std::result::Result<(), String>)> {
    vec![
        ("covloss_permutation", covloss_permutation()),
        ("covloss_shift", covloss_shift()),
        ("covloss_quadratic_scaling", covloss_quadratic_scaling()),
        ("softmax_normalization", softmax_normalization()),
        ("ia_scaling_and_permutation", ia_invariances()),
        ("auc_monotone_transform", auc_monotone_invariance()),
    ]
}
