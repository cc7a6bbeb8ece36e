//! Cross-entropy plus the weighted multi-level distillation objective
//!
//! ```text
//! total = ce + alpha * (had + beta * sl + gamma * sd)
//! ```
//!
//! CE, HAD and SL read the student softmax at `tau_sl`; SD reads both
//! softmaxes at `tau_sd`. Each temperature gets its own ranking. Teacher and
//! student are aligned to their first `min(T_teacher, T_student)` tokens.
//!
//! Gradients treat the rank selections and the Sinkhorn plan as constants.
//! [`prepare`] computes those once and [`evaluate`] / [`gradient`] reuse them,
//! which is also what finite-difference checks need.

use crate::error::{Error, Result};
use crate::numeric::{
    argmax, softmax_backward, softmax_rows, LogitMatrix, Matrix, ProbMatrix, Temperature,
    DEFAULT_LOG_FLOOR,
};
use crate::preprocess::{rank_and_truncate, AlignedPair, MatchMode, RankSelection};
use crate::seq_ot::{
    sd_grad, sd_loss, seq_cost_matrix, sinkhorn_plan, SinkhornConfig, TransportPlan,
};
use crate::token_ot::{had_loss, sl_loss};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_sl: f64,
    pub tau_sd: f64,
    pub k: usize,
    pub sinkhorn: SinkhornConfig,
    pub match_mode: MatchMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            beta: 0.1,
            gamma: 0.1,
            tau_sl: 1.0,
            tau_sd: 2.0,
            k: 50,
            sinkhorn: SinkhornConfig::default(),
            match_mode: MatchMode::SumSort,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Temperature::new(self.tau_sl)?;
        Temperature::new(self.tau_sd)?;
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        self.sinkhorn.validate()
    }

    /// Applies one `key=value` override. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "tau_sl" => self.tau_sl = num(key, value)?,
            "tau_sd" => self.tau_sd = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "lambda" => self.sinkhorn.lambda = num(key, value)?,
            "n_iters" => self.sinkhorn.iterations = num(key, value)?,
            "match" => {
                self.match_mode = match value {
                    "sum_sort" => MatchMode::SumSort,
                    "exact" => MatchMode::ExactAssignment,
                    other => return Err(Error::config(format!("match: unknown mode {other:?}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn temps(&self) -> Result<(Temperature, Temperature)> {
        Ok((
            Temperature::new(self.tau_sl)?,
            Temperature::new(self.tau_sd)?,
        ))
    }
}

/// `ce + alpha * (had + beta * sl + gamma * sd)`, always evaluated in this order.
pub fn combine(ce: f64, had: f64, sl: f64, sd: f64, w: &LossWeights) -> f64 {
    ce + w.alpha * (had + w.beta * sl + w.gamma * sd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    /// `s - onehot(y)` per token: the gradient w.r.t. the softmax input
    /// (logits divided by the temperature).
    pub grad: Matrix,
}

/// `-sum_t ln s_{y(t)}(t)`.
pub fn ce_loss(student_probs: &ProbMatrix, labels: &[usize]) -> Result<CeLoss> {
    if labels.len() != student_probs.rows() {
        return Err(Error::input(format!(
            "{} labels for {} tokens",
            labels.len(),
            student_probs.rows()
        )));
    }
    let n = student_probs.cols();
    if let Some((t, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n) {
        return Err(Error::input(format!(
            "label {y} at token {t} is outside the student vocabulary of {n}"
        )));
    }
    let mut grad = (**student_probs).clone();
    let mut value = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        value -= student_probs[(t, y)].max(DEFAULT_LOG_FLOOR).ln();
        grad[(t, y)] -= 1.0;
    }
    Ok(CeLoss { value, grad })
}

/// Everything held constant under differentiation.
#[derive(Clone, Debug, PartialEq)]
pub struct Selections {
    /// Aligned token count `min(T_teacher, T_student)`.
    pub tokens: usize,
    /// CE targets; length `T_student` when labeled, `tokens` when pseudo.
    pub labels: Vec<usize>,
    pub pseudo_labels: bool,
    pub rank_sl: RankSelection,
    pub rank_sd: RankSelection,
    pub plan: TransportPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub had: f64,
    pub sl: f64,
    pub sd: f64,
    pub total: f64,
    pub tokens: usize,
    pub rank_sl: RankSelection,
    pub rank_sd: RankSelection,
}

impl LossBreakdown {
    pub fn k_eff(&self) -> usize {
        self.rank_sl.k
    }

    pub fn recombine(&self, w: &LossWeights) -> f64 {
        combine(self.ce, self.had, self.sl, self.sd, w)
    }
}

struct Probs {
    teacher_sl: ProbMatrix,
    teacher_sd: ProbMatrix,
    /// Full student, all `T_student` rows.
    student_sl: ProbMatrix,
    student_sd: ProbMatrix,
    tokens: usize,
}

fn probabilities(teacher: &LogitMatrix, student: &LogitMatrix, w: &LossWeights) -> Result<Probs> {
    w.validate()?;
    let (tau_sl, tau_sd) = w.temps()?;
    let tokens = teacher.rows().min(student.rows());
    if tokens == 0 {
        return Err(Error::input("teacher and student share no tokens"));
    }
    let t = teacher.head_rows(tokens);
    Ok(Probs {
        teacher_sl: softmax_rows(&t, tau_sl),
        teacher_sd: softmax_rows(&t, tau_sd),
        student_sl: softmax_rows(student, tau_sl),
        student_sd: softmax_rows(student, tau_sd),
        tokens,
    })
}

/// Teacher argmax per aligned token, carried to the student vocabulary
/// through the rank alignment: the teacher dimension at rank `r` maps to
/// `student_perm[min(r, n - 1)]`.
fn pseudo_labels(teacher: &LogitMatrix, tokens: usize, rank: &RankSelection) -> Vec<usize> {
    let mut rank_of = vec![0usize; rank.teacher_perm.len()];
    for (r, &d) in rank.teacher_perm.iter().enumerate() {
        rank_of[d] = r;
    }
    let last = rank.student_perm.len() - 1;
    (0..tokens)
        .map(|t| rank.student_perm[rank_of[argmax(teacher.row(t))].min(last)])
        .collect()
}

/// Computes rank selections, CE targets and the Sinkhorn plan for the
/// current logits.
pub fn prepare(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    labels: Option<&[usize]>,
    w: &LossWeights,
) -> Result<Selections> {
    let p = probabilities(teacher, student, w)?;
    let l = p.tokens;
    let (rank_sl, _) =
        rank_and_truncate(&p.teacher_sl, &p.student_sl.head_rows(l), w.k, w.match_mode)?;
    let (rank_sd, pair_sd) =
        rank_and_truncate(&p.teacher_sd, &p.student_sd.head_rows(l), w.k, w.match_mode)?;
    let plan = sinkhorn_plan(&seq_cost_matrix(&pair_sd), &w.sinkhorn)?;

    let (labels, pseudo) = match labels {
        Some(y) => {
            if y.len() != student.rows() {
                return Err(Error::input(format!(
                    "{} labels for {} student tokens",
                    y.len(),
                    student.rows()
                )));
            }
            if let Some(&bad) = y.iter().find(|&&v| v >= student.cols()) {
                return Err(Error::input(format!(
                    "label {bad} is outside the student vocabulary of {}",
                    student.cols()
                )));
            }
            (y.to_vec(), false)
        }
        None => (pseudo_labels(teacher, l, &rank_sl), true),
    };

    Ok(Selections {
        tokens: l,
        labels,
        pseudo_labels: pseudo,
        rank_sl,
        rank_sd,
        plan,
    })
}

struct Pairs {
    sl: AlignedPair,
    sd: AlignedPair,
}

fn pairs(p: &Probs, sel: &Selections) -> Result<Pairs> {
    if sel.tokens != p.tokens {
        return Err(Error::input(format!(
            "selections cover {} tokens, inputs align {}",
            sel.tokens, p.tokens
        )));
    }
    let l = p.tokens;
    Ok(Pairs {
        sl: sel
            .rank_sl
            .apply(&p.teacher_sl, &p.student_sl.head_rows(l))?,
        sd: sel
            .rank_sd
            .apply(&p.teacher_sd, &p.student_sd.head_rows(l))?,
    })
}

fn ce_rows(p: &Probs, sel: &Selections) -> ProbMatrix {
    if sel.pseudo_labels {
        p.student_sl.head_rows(sel.tokens)
    } else {
        p.student_sl.clone()
    }
}

/// Loss at the given logits with selections and plan frozen.
pub fn evaluate(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    sel: &Selections,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let p = probabilities(teacher, student, w)?;
    let pairs = pairs(&p, sel)?;
    let ce = ce_loss(&ce_rows(&p, sel), &sel.labels)?.value;
    let had = had_loss(&pairs.sl).value;
    let sl = sl_loss(&pairs.sl).value;
    let sd = sd_loss(&seq_cost_matrix(&pairs.sd), &sel.plan)?;
    Ok(LossBreakdown {
        ce,
        had,
        sl,
        sd,
        total: combine(ce, had, sl, sd, w),
        tokens: sel.tokens,
        rank_sl: sel.rank_sl.clone(),
        rank_sd: sel.rank_sd.clone(),
    })
}

/// Writes `grad` (w.r.t. the aligned `T x k` student) into the columns of a
/// full-width matrix given by `perm`.
fn scatter(grad: &Matrix, perm: &[usize], rows: usize, cols: usize, scale: f64, out: &mut Matrix) {
    debug_assert!(out.rows() >= rows && out.cols() == cols);
    for r in 0..grad.rows() {
        for (i, &g) in grad.row(r).iter().enumerate() {
            out[(r, perm[i])] += scale * g;
        }
    }
}

/// Gradient of the total loss w.r.t. the student logits (`T_student x n`),
/// with selections and plan frozen.
pub fn gradient(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    sel: &Selections,
    w: &LossWeights,
) -> Result<Matrix> {
    let (tau_sl, tau_sd) = w.temps()?;
    let p = probabilities(teacher, student, w)?;
    let pairs = pairs(&p, sel)?;
    let (rows, cols) = student.shape();

    // CE: d/dz = (s - onehot) / tau on the rows it covers
    let ce = ce_loss(&ce_rows(&p, sel), &sel.labels)?;
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..ce.grad.rows() {
        for (o, g) in out.row_mut(r).iter_mut().zip(ce.grad.row(r)) {
            *o = g / tau_sl.value();
        }
    }

    if w.alpha != 0.0 {
        let mut d_sl = Matrix::zeros(rows, cols);
        let perm = &sel.rank_sl.student_perm;
        scatter(
            &had_loss(&pairs.sl).grad,
            perm,
            sel.tokens,
            cols,
            w.alpha,
            &mut d_sl,
        );
        scatter(
            &sl_loss(&pairs.sl).grad,
            perm,
            sel.tokens,
            cols,
            w.alpha * w.beta,
            &mut d_sl,
        );
        let back = softmax_backward(&p.student_sl, &d_sl, tau_sl);

        let mut d_sd = Matrix::zeros(rows, cols);
        let sd = sd_grad(&pairs.sd, &sel.plan)?;
        scatter(
            &sd,
            &sel.rank_sd.student_perm,
            sel.tokens,
            cols,
            w.alpha * w.gamma,
            &mut d_sd,
        );
        let back_sd = softmax_backward(&p.student_sd, &d_sd, tau_sd);

        for ((o, a), b) in out
            .as_mut_slice()
            .iter_mut()
            .zip(back.as_slice())
            .zip(back_sd.as_slice())
        {
            *o += a + b;
        }
    }
    Ok(out)
}

pub fn total_loss(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    labels: Option<&[usize]>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let sel = prepare(teacher, student, labels, w)?;
    evaluate(teacher, student, &sel, w)
}

pub fn total_grad(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    labels: Option<&[usize]>,
    w: &LossWeights,
) -> Result<Matrix> {
    let sel = prepare(teacher, student, labels, w)?;
    gradient(teacher, student, &sel, w)
}

pub fn loss_and_grad(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    labels: Option<&[usize]>,
    w: &LossWeights,
) -> Result<(LossBreakdown, Matrix)> {
    let sel = prepare(teacher, student, labels, w)?;
    Ok((
        evaluate(teacher, student, &sel, w)?,
        gradient(teacher, student, &sel, w)?,
    ))
}
