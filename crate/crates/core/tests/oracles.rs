mod common;

use common::*;
use mlot_core::oracle::assignment;
use mlot_core::{
    exact_ot, had_loss, sd_loss, seq_cost_matrix, sinkhorn_plan, uld_loss, AlignedPair, CostMatrix,
    ExactMethod, Matrix, ProbMatrix, SinkhornConfig,
};
use rand::Rng;

fn padded_abs_cost(t: &[f64], s: &[f64]) -> Matrix {
    let w = t.len().max(s.len());
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    Matrix::from_fn(w, w, |i, j| (at(t, i) - at(s, j)).abs())
}

#[test]
fn uld_matches_exact_transport_on_padded_cost() {
    let mut rng = rng(11);
    for _ in 0..200 {
        let a = rng.random_range(2..=6);
        let b = rng.random_range(2..=6);
        let t = prob_rows(&mut rng, 1, a);
        let s = prob_rows(&mut rng, 1, b);
        let cost = padded_abs_cost(t.row(0), s.row(0));
        let exact = exact_ot(&cost, ExactMethod::BruteForce).unwrap().value;
        assert!((uld_loss(&t, &s).unwrap() - exact).abs() < 1e-12);
        assert!((min_over_permutations(&cost) - exact).abs() < 1e-12);
    }
}

#[test]
fn uld_sums_over_tokens() {
    let mut rng = rng(12);
    let t = prob_rows(&mut rng, 4, 5);
    let s = prob_rows(&mut rng, 4, 3);
    let per_token: f64 = (0..4)
        .map(|r| {
            let tr = ProbMatrix::new(t.head_rows(r + 1).select_columns(&[0, 1, 2, 3, 4])).unwrap();
            let sr = ProbMatrix::new(s.head_rows(r + 1).select_columns(&[0, 1, 2])).unwrap();
            let last = |m: &ProbMatrix| ProbMatrix::from_rows(&[m.row(m.rows() - 1)]).unwrap();
            uld_loss(&last(&tr), &last(&sr)).unwrap()
        })
        .sum();
    assert!((uld_loss(&t, &s).unwrap() - per_token).abs() < 1e-12);
}

#[test]
fn had_identity_plan_is_optimal_for_sorted_vectors() {
    let mut rng = rng(13);
    for _ in 0..200 {
        let k = rng.random_range(1..=6);
        let t = descending((0..k).map(|_| rng.random::<f64>()).collect());
        let s = descending((0..k).map(|_| rng.random::<f64>()).collect());
        let pair = AlignedPair::new(
            Matrix::from_rows(&[t.as_slice()]).unwrap(),
            Matrix::from_rows(&[s.as_slice()]).unwrap(),
        )
        .unwrap();
        let cost = padded_abs_cost(&t, &s);
        let exact = exact_ot(&cost, ExactMethod::BruteForce).unwrap();
        assert!((had_loss(&pair).value - exact.value).abs() < 1e-12);
    }
}

#[test]
fn exact_methods_agree_with_enumeration() {
    let mut rng = rng(14);
    for n in 1..=7 {
        for _ in 0..10 {
            let c = uniform(&mut rng, n, n);
            let brute = exact_ot(&c, ExactMethod::BruteForce).unwrap();
            let assign = exact_ot(&c, ExactMethod::Assignment).unwrap();
            let reference = min_over_permutations(&c);
            assert!((brute.value - reference).abs() < 1e-12);
            assert!((assign.value - reference).abs() < 1e-12);
        }
    }
}

#[test]
fn rectangular_assignment_picks_distinct_columns() {
    let mut rng = rng(15);
    for _ in 0..50 {
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(rows..=6);
        let c = uniform(&mut rng, rows, cols);
        let plan = assignment(&c);
        let mut seen = plan.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), rows);
        // pad with zero-cost dummy rows to reuse the square oracle
        let square = Matrix::from_fn(cols, cols, |i, j| if i < rows { c[(i, j)] } else { 0.0 });
        let got: f64 = plan.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        assert!((got - min_over_permutations(&square)).abs() < 1e-12);
    }
}

#[test]
fn sinkhorn_matches_reference_scaling() {
    let mut rng = rng(16);
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let lambda = [0.05, 0.1, 0.5, 2.0][rng.random_range(0..4)];
        let iters = rng.random_range(1..=40);
        let c = uniform(&mut rng, n, n);
        let plan = sinkhorn_plan(
            &CostMatrix::new(c.clone()).unwrap(),
            &SinkhornConfig::new(lambda, iters).unwrap(),
        )
        .unwrap();
        let reference = reference_sinkhorn(&c, lambda, iters);
        assert!(plan.matrix().max_abs_diff(&reference) < 1e-12);
    }
}

#[test]
fn exact_transport_bounds_sinkhorn_distance() {
    let mut rng = rng(17);
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let t = uniform(&mut rng, n, 4);
        let s = uniform(&mut rng, n, 4);
        let cost = seq_cost_matrix(&AlignedPair::new(t, s).unwrap());
        let exact = exact_ot(cost.matrix(), ExactMethod::BruteForce)
            .unwrap()
            .value;
        let plan = sinkhorn_plan(&cost, &SinkhornConfig::new(0.1, 5000).unwrap()).unwrap();
        // a doubly stochastic plan can only do worse than the best permutation;
        // leftover row error is charged at the largest cost
        let err = plan.marginal_error();
        let max = cost.matrix().as_slice().iter().copied().fold(0.0, f64::max);
        assert!(exact <= sd_loss(&cost, &plan).unwrap() + n as f64 * err * max + 1e-12);
    }
}

#[test]
fn columns_are_exact_and_rows_converge() {
    let mut rng = rng(18);
    for _ in 0..30 {
        let n = rng.random_range(2..=16);
        let cost = CostMatrix::new(uniform(&mut rng, n, n)).unwrap();
        let plan = sinkhorn_plan(&cost, &SinkhornConfig::default()).unwrap();
        assert!(plan
            .matrix()
            .col_sums()
            .iter()
            .all(|s| (s - 1.0).abs() < 1e-12));
        let long = sinkhorn_plan(&cost, &SinkhornConfig::new(0.1, 20_000).unwrap()).unwrap();
        assert!(long.marginal_error() < 1e-6);
    }
}
