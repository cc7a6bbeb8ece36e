#![allow(dead_code)]

use mlot_core::{Matrix, ProbMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

pub fn gaussian_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let normal = rand_distr::StandardNormal;
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(normal))
}

/// Rows drawn uniformly and normalized; every entry is strictly positive.
pub fn prob_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ProbMatrix {
    let mut m = Matrix::from_fn(rows, cols, |_, _| 0.05 + rng.random::<f64>());
    for r in 0..rows {
        let row = m.row_mut(r);
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    ProbMatrix::new(m).unwrap()
}

/// Minimum of `sum_i c[i][p(i)]` over all permutations, by Heap's algorithm.
pub fn min_over_permutations(c: &Matrix) -> f64 {
    let n = c.rows();
    let mut p: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum::<f64>();
    let mut best = cost(&p);
    let mut stack = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(stack[i], i);
            }
            best = best.min(cost(&p));
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    best
}

/// Plain Sinkhorn written from the definition with explicit scaling vectors.
pub fn reference_sinkhorn(c: &Matrix, lambda: f64, iters: usize) -> Matrix {
    let n = c.rows();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (-c[(i, j)] / lambda).exp()).collect())
        .collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; n];
    for _ in 0..iters {
        for i in 0..n {
            u[i] = 1.0 / (0..n).map(|j| k[i][j] * v[j]).sum::<f64>();
        }
        for j in 0..n {
            v[j] = 1.0 / (0..n).map(|i| k[i][j] * u[i]).sum::<f64>();
        }
    }
    Matrix::from_fn(n, n, |i, j| u[i] * k[i][j] * v[j])
}

pub fn descending(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}
