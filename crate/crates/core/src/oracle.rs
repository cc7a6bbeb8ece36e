//! Ground-truth solvers used to check the fast paths.
//!
//! A linear objective over doubly-stochastic plans attains its minimum at a
//! permutation matrix, so exact OT with unit marginals is a search over
//! permutations: exhaustive for tiny problems, Hungarian otherwise.

use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const BRUTE_FORCE_LIMIT: usize = 7;
pub const ASSIGNMENT_LIMIT: usize = 64;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExactMethod {
    BruteForce,
    Assignment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactOtResult {
    pub value: f64,
    /// `plan[i]` is the column receiving row `i`'s unit mass.
    pub plan: Vec<usize>,
    pub method: ExactMethod,
}

impl ExactOtResult {
    pub fn plan_matrix(&self) -> Matrix {
        let n = self.plan.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &j) in self.plan.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }
}

/// Cost of a permutation plan, summed in row order.
pub fn permutation_cost(cost: &Matrix, plan: &[usize]) -> f64 {
    plan.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}

/// Minimum of `sum_ij P_ij C_ij` over doubly-stochastic `P`.
pub fn exact_ot(cost: &Matrix, method: ExactMethod) -> Result<ExactOtResult> {
    let n = cost.rows();
    if n == 0 || cost.cols() != n {
        return Err(Error::input(format!(
            "exact OT needs a non-empty square cost, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::input("cost matrix has non-finite entries"));
    }
    let plan = match method {
        ExactMethod::BruteForce => {
            if n > BRUTE_FORCE_LIMIT {
                return Err(Error::TooLargeForExact {
                    size: n,
                    limit: BRUTE_FORCE_LIMIT,
                });
            }
            brute_force(cost)
        }
        ExactMethod::Assignment => {
            if n > ASSIGNMENT_LIMIT {
                return Err(Error::TooLargeForExact {
                    size: n,
                    limit: ASSIGNMENT_LIMIT,
                });
            }
            assignment(cost)
        }
    };
    Ok(ExactOtResult {
        value: permutation_cost(cost, &plan),
        plan,
        method,
    })
}

/// Lexicographic enumeration; the first minimal permutation wins.
fn brute_force(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_value = permutation_cost(cost, &perm);
    while next_permutation(&mut perm) {
        let v = permutation_cost(cost, &perm);
        if v < best_value {
            best_value = v;
            best.copy_from_slice(&perm);
        }
    }
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Rectangular linear assignment (rows <= cols) by shortest augmenting
/// paths with potentials, O(rows^2 * cols). Returns the column assigned to
/// each row.
///
/// Panics if `cost` has more rows than columns.
pub fn assignment(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "assignment needs rows <= cols, got {n}x{m}");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut plan = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            plan[owner[j] - 1] = j - 1;
        }
    }
    plan
}

/// Central differences `(f(x + h e) - f(x - h e)) / 2h`, one entry at a time.
pub fn finite_diff_grad<F>(mut loss: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for idx in 0..x.as_slice().len() {
        let x0 = x.as_slice()[idx];
        probe.as_mut_slice()[idx] = x0 + h;
        let up = loss(&probe);
        probe.as_mut_slice()[idx] = x0 - h;
        let down = loss(&probe);
        probe.as_mut_slice()[idx] = x0;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "loss not finite around entry ({}, {})",
                idx / x.cols(),
                idx % x.cols()
            )));
        }
        grad.as_mut_slice()[idx] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|)` over entries where either is nonzero.
    pub max_rel_error: f64,
    /// Entry with the largest tolerance violation ratio.
    pub worst: Option<(usize, usize)>,
    pub passed: bool,
}

/// Entry `(a, n)` passes iff `|a - n| <= abs_tol + rel_tol * max(|a|, |n|)`.
pub fn check_gradient(
    analytic: &Matrix,
    numeric: &Matrix,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradientReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::input(format!(
            "gradient shapes differ: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let cols = analytic.cols();
    let mut report = GradientReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let mut worst_ratio = 0.0;
    for (idx, (&a, &n)) in analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .enumerate()
    {
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        report.max_abs_error = report.max_abs_error.max(diff);
        if scale > 0.0 {
            report.max_rel_error = report.max_rel_error.max(diff / scale);
        }
        let allowed = abs_tol + rel_tol * scale;
        // written so that a NaN difference fails
        let within = diff <= allowed;
        if !within {
            report.passed = false;
        }
        let ratio = if allowed > 0.0 { diff / allowed } else { diff };
        if ratio > worst_ratio || (report.worst.is_none() && !within) {
            worst_ratio = ratio;
            report.worst = Some((idx / cols, idx % cols));
        }
    }
    Ok(report)
}
