//! Sequence-level transport between token positions.
//!
//! The cost between teacher token `i` and student token `j` is the L1
//! distance of their aligned truncated rows. A fixed number of Sinkhorn
//! sweeps on `exp(-C / lambda)` gives the plan; the loss is `<P, C>`.

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::preprocess::AlignedPair;
use crate::token_ot::sign;

/// Square, nonnegative, finite token-to-token cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 || m.rows() != m.cols() {
            return Err(Error::input(format!(
                "cost matrix must be square and non-empty, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if let Some(v) = m.as_slice().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::input(format!(
                "cost entry {v} is not a finite nonnegative number"
            )));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    /// Divides by the largest entry; returns the scaled cost and the divisor.
    /// An all-zero cost is returned unchanged with divisor 1.
    pub fn rescaled(&self) -> (CostMatrix, f64) {
        let max = self.0.as_slice().iter().copied().fold(0.0, f64::max);
        if max == 0.0 {
            return (self.clone(), 1.0);
        }
        let mut m = self.0.clone();
        m.as_mut_slice().iter_mut().for_each(|v| *v /= max);
        (CostMatrix(m), max)
    }
}

/// Nonnegative plan with (approximately) unit row and column sums.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan(Matrix);

impl TransportPlan {
    /// Wraps an arbitrary nonnegative matrix, e.g. a plan computed elsewhere.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::input("transport plan must be square"));
        }
        if m.as_slice().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::input(
                "transport plan entries must be finite and nonnegative",
            ));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// Largest deviation of any row or column sum from 1.
    pub fn marginal_error(&self) -> f64 {
        self.0
            .row_sums()
            .into_iter()
            .chain(self.0.col_sums())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            iterations: 20,
        }
    }
}

impl SinkhornConfig {
    pub fn new(lambda: f64, iterations: usize) -> Result<Self> {
        let cfg = Self { lambda, iterations };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::config("sinkhorn needs at least one iteration"));
        }
        Ok(())
    }
}

/// `C_ij = sum_l |t_l(i) - s_l(j)|`.
pub fn seq_cost_matrix(pair: &AlignedPair) -> CostMatrix {
    let (t, s) = (pair.teacher(), pair.student());
    let n = pair.tokens();
    CostMatrix(Matrix::from_fn(n, n, |i, j| {
        t.row(i)
            .iter()
            .zip(s.row(j))
            .map(|(a, b)| (a - b).abs())
            .sum()
    }))
}

/// Runs `cfg.iterations` sweeps of row normalization followed by column
/// normalization on `K = exp(-C / lambda)`. Columns of the result sum to one
/// exactly (up to rounding); rows only as far as the sweeps have converged.
pub fn sinkhorn_plan(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let n = cost.size();
    let mut k = cost.0.clone();
    for v in k.as_mut_slice() {
        *v = (-*v / cfg.lambda).exp();
    }
    if let Some(r) = k.row_sums().iter().position(|s| *s == 0.0) {
        return Err(Error::NumericalUnderflow(format!(
            "kernel row {r} is all zeros at lambda {}",
            cfg.lambda
        )));
    }
    if let Some(c) = k.col_sums().iter().position(|s| *s == 0.0) {
        return Err(Error::NumericalUnderflow(format!(
            "kernel column {c} is all zeros at lambda {}",
            cfg.lambda
        )));
    }

    for _ in 0..cfg.iterations {
        for r in 0..n {
            let row = k.row_mut(r);
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let sums = k.col_sums();
        for r in 0..n {
            for (v, s) in k.row_mut(r).iter_mut().zip(&sums) {
                *v /= s;
            }
        }
    }
    if !k.is_finite() {
        return Err(Error::NumericalFailure(
            "sinkhorn produced non-finite entries".into(),
        ));
    }
    Ok(TransportPlan(k))
}

/// `<P, C>`.
pub fn sd_loss(cost: &CostMatrix, plan: &TransportPlan) -> Result<f64> {
    plan.0.dot(&cost.0)
}

/// Gradient of `<P, C(s)>` w.r.t. the aligned student probabilities with the
/// plan held fixed: `sum_i P_ij sign(s_l(j) - t_l(i))`.
pub fn sd_grad(pair: &AlignedPair, plan: &TransportPlan) -> Result<Matrix> {
    let n = pair.tokens();
    if plan.0.shape() != (n, n) {
        return Err(Error::input(format!(
            "plan is {:?}, expected {n}x{n}",
            plan.0.shape()
        )));
    }
    let (t, s) = (pair.teacher(), pair.student());
    let mut grad = Matrix::zeros(n, pair.width());
    for j in 0..n {
        let sj = s.row(j);
        let gj = grad.row_mut(j);
        for i in 0..n {
            let p = plan.0[(i, j)];
            if p == 0.0 {
                continue;
            }
            for ((g, &sv), &tv) in gj.iter_mut().zip(sj).zip(t.row(i)) {
                *g += p * sign(sv - tv);
            }
        }
    }
    Ok(grad)
}
