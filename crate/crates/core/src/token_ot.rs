//! Token-level transport losses on rank-aligned probabilities.
//!
//! With both sides ordered consistently the identity plan is optimal for the
//! absolute-difference cost, so each loss collapses to an elementwise sum.
//! Gradients are w.r.t. the aligned student probabilities; the ranking and
//! truncation are constants.

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ProbMatrix, DEFAULT_LOG_FLOOR};
use crate::preprocess::AlignedPair;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLossGrad {
    pub value: f64,
    /// Same shape as the student input.
    pub grad: Matrix,
}

/// `sign` with `sign(0) = 0`.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Holistic absolute difference: `sum_t sum_i |t_i(t) - s_i(t)|`.
pub fn had_loss(pair: &AlignedPair) -> TokenLossGrad {
    let (t, s) = (pair.teacher(), pair.student());
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    let mut value = 0.0;
    for ((g, &tv), &sv) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(t.as_slice())
        .zip(s.as_slice())
    {
        value += (tv - sv).abs();
        *g = sign(sv - tv);
    }
    TokenLossGrad { value, grad }
}

/// Sequential logarithmic loss: `-sum_t sum_i t_i(t) ln s_i(t)`, with the
/// student floored at [`DEFAULT_LOG_FLOOR`].
pub fn sl_loss(pair: &AlignedPair) -> TokenLossGrad {
    sl_loss_with_floor(pair, DEFAULT_LOG_FLOOR)
}

pub fn sl_loss_with_floor(pair: &AlignedPair, floor: f64) -> TokenLossGrad {
    let (t, s) = (pair.teacher(), pair.student());
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    let mut value = 0.0;
    for ((g, &tv), &sv) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(t.as_slice())
        .zip(s.as_slice())
    {
        let clamped = sv.max(floor);
        value -= tv * clamped.ln();
        *g = -tv / clamped;
    }
    TokenLossGrad { value, grad }
}

fn descending_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

/// Zero-padded, per-token sorted L1 distance, as used by ULD.
pub fn uld_loss(t: &ProbMatrix, s: &ProbMatrix) -> Result<f64> {
    uld_loss_grad(t, s).map(|r| r.value)
}

/// [`uld_loss`] with its gradient w.r.t. the (unpadded) student
/// probabilities; per-token sort orders are held fixed.
pub fn uld_loss_grad(t: &ProbMatrix, s: &ProbMatrix) -> Result<TokenLossGrad> {
    if t.rows() != s.rows() {
        return Err(Error::input(format!(
            "teacher has {} tokens, student has {}",
            t.rows(),
            s.rows()
        )));
    }
    let width = t.cols().max(s.cols());
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    let mut value = 0.0;
    for r in 0..t.rows() {
        let (tr, sr) = (t.row(r), s.row(r));
        let t_order = descending_order(tr);
        let s_order = descending_order(sr);
        for i in 0..width {
            // padding zeros sort last since probabilities are nonnegative
            let tv = t_order.get(i).map_or(0.0, |&j| tr[j]);
            let sv = s_order.get(i).map_or(0.0, |&j| sr[j]);
            value += (tv - sv).abs();
            if let Some(&j) = s_order.get(i) {
                grad[(r, j)] = sign(sv - tv);
            }
        }
    }
    Ok(TokenLossGrad { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(t: &[&[f64]], s: &[&[f64]]) -> AlignedPair {
        AlignedPair::new(Matrix::from_rows(t).unwrap(), Matrix::from_rows(s).unwrap()).unwrap()
    }

    #[test]
    fn had_identity_is_zero() {
        let p = pair(&[&[0.5, 0.2], &[0.3, 0.3]], &[&[0.5, 0.2], &[0.3, 0.3]]);
        let r = had_loss(&p);
        assert_eq!(r.value, 0.0);
        assert!(r.grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn had_forced_arithmetic() {
        let r = had_loss(&pair(&[&[0.5, 0.3]], &[&[0.4, 0.4]]));
        assert!((r.value - 0.2).abs() < 1e-15);
        assert_eq!(r.grad.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn sl_examples() {
        let r = sl_loss(&pair(&[&[1.0]], &[&[0.5]]));
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.grad.as_slice(), &[-2.0]);

        let r = sl_loss(&pair(&[&[0.7, 0.3]], &[&[0.7, 0.3]]));
        let entropy = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        assert!((r.value - entropy).abs() < 1e-15);
        assert!((r.value - 0.610864).abs() < 1e-6);
    }

    #[test]
    fn sl_floors_zero_student() {
        let r = sl_loss(&pair(&[&[0.4]], &[&[0.0]]));
        assert!((r.value - 0.4 * 27.631021).abs() < 1e-5);
        assert!(r.value.is_finite() && r.grad[(0, 0)].is_finite());
    }

    #[test]
    fn uld_pads_and_sorts() {
        let t = ProbMatrix::from_rows(&[[0.7, 0.3]]).unwrap();
        let s = ProbMatrix::from_rows(&[[0.6, 0.3, 0.1]]).unwrap();
        assert!((uld_loss(&t, &s).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(uld_loss(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn uld_rejects_token_mismatch() {
        let t = ProbMatrix::from_rows(&[[0.7, 0.3]]).unwrap();
        let s = ProbMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert!(matches!(uld_loss(&t, &s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn uld_grad_follows_sorted_positions() {
        let t = ProbMatrix::from_rows(&[[0.7, 0.3]]).unwrap();
        let s = ProbMatrix::from_rows(&[[0.1, 0.6, 0.3]]).unwrap();
        let r = uld_loss_grad(&t, &s).unwrap();
        // sorted student [0.6, 0.3, 0.1] vs padded teacher [0.7, 0.3, 0]
        assert_eq!(r.grad.row(0), &[1.0, -1.0, 0.0]);
    }
}
