//! Sequence-level ranking, student matching and top-k truncation.
//!
//! Teacher dimensions are ordered once per sequence by their probability
//! mass summed over all tokens, so every token shares one dimension order.
//! The student is permuted to match that order and both sides are cut to a
//! common width `k`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{Matrix, ProbMatrix};
use crate::oracle::{assignment, ASSIGNMENT_LIMIT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Order student dimensions by descending sequence-summed probability.
    #[default]
    SumSort,
    /// Solve the matching exactly as a linear assignment.
    ExactAssignment,
}

/// How a teacher/student pair was aligned.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankSelection {
    pub teacher_perm: Vec<usize>,
    /// `student_perm[i]` is the student dimension placed at rank `i`.
    pub student_perm: Vec<usize>,
    /// Effective truncation width.
    pub k: usize,
    pub requested_k: usize,
    pub match_mode: MatchMode,
}

impl RankSelection {
    pub fn clamped(&self) -> bool {
        self.k < self.requested_k
    }

    /// Re-applies this selection to new probability matrices of the same
    /// widths, treating the permutations as constants.
    pub fn apply(&self, teacher: &Matrix, student: &Matrix) -> Result<AlignedPair> {
        if teacher.cols() != self.teacher_perm.len() || student.cols() != self.student_perm.len() {
            return Err(Error::input(format!(
                "selection built for widths ({}, {}), got ({}, {})",
                self.teacher_perm.len(),
                self.student_perm.len(),
                teacher.cols(),
                student.cols()
            )));
        }
        AlignedPair::new(
            teacher.select_columns(&self.teacher_perm[..self.k]),
            student.select_columns(&self.student_perm[..self.k]),
        )
    }
}

/// Truncated, rank-aligned teacher and student probabilities, both `T x k`.
/// Student rows need not sum to one after truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    teacher: Matrix,
    student: Matrix,
}

impl AlignedPair {
    pub fn new(teacher: Matrix, student: Matrix) -> Result<Self> {
        if teacher.shape() != student.shape() {
            return Err(Error::input(format!(
                "aligned shapes differ: teacher {:?}, student {:?}",
                teacher.shape(),
                student.shape()
            )));
        }
        for (name, m) in [("teacher", &teacher), ("student", &student)] {
            if let Some(v) = m.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::input(format!("{name} entry {v} outside [0, 1]")));
            }
        }
        Ok(Self { teacher, student })
    }

    pub fn teacher(&self) -> &Matrix {
        &self.teacher
    }

    pub fn student(&self) -> &Matrix {
        &self.student
    }

    pub fn tokens(&self) -> usize {
        self.teacher.rows()
    }

    pub fn width(&self) -> usize {
        self.teacher.cols()
    }
}

/// Column order by descending column sum; ties keep ascending index.
pub fn sum_sort_permutation(m: &Matrix) -> Vec<usize> {
    let sums = m.col_sums();
    let mut perm: Vec<usize> = (0..m.cols()).collect();
    // stable sort keeps the ascending-index tie-break
    perm.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]));
    perm
}

/// Ranks teacher dimensions by sequence-summed probability and returns the
/// permutation together with the column-permuted matrix.
pub fn sequence_rank_teacher(t: &ProbMatrix) -> (Vec<usize>, ProbMatrix) {
    let perm = sum_sort_permutation(t);
    let ranked = t.permute_columns(&perm);
    (perm, ranked)
}

/// `sum_t sum_i |t_sr[t][i] - s[t][perm[i]]|` over the first `min(m, n)`
/// ranks.
pub fn matching_cost(t_sr: &Matrix, s: &Matrix, perm: &[usize]) -> f64 {
    let width = t_sr.cols().min(s.cols()).min(perm.len());
    let mut total = 0.0;
    for t in 0..t_sr.rows() {
        let (tr, sr) = (t_sr.row(t), s.row(t));
        for i in 0..width {
            total += (tr[i] - sr[perm[i]]).abs();
        }
    }
    total
}

/// Student permutation matching the ranked teacher columns.
///
/// `ExactAssignment` assigns each of the first `min(m, n)` teacher ranks a
/// distinct student column at minimal L1 matching cost; leftover student
/// columns follow in sum-sorted order.
pub fn match_student(t_sr: &Matrix, s: &Matrix, mode: MatchMode) -> Result<Vec<usize>> {
    if t_sr.rows() != s.rows() {
        return Err(Error::input(format!(
            "teacher has {} tokens, student has {}",
            t_sr.rows(),
            s.rows()
        )));
    }
    let by_sum = sum_sort_permutation(s);
    match mode {
        MatchMode::SumSort => Ok(by_sum),
        MatchMode::ExactAssignment => {
            let width = t_sr.cols().min(s.cols());
            if width > ASSIGNMENT_LIMIT {
                return Err(Error::TooLargeForExact {
                    size: width,
                    limit: ASSIGNMENT_LIMIT,
                });
            }
            let cost = Matrix::from_fn(width, s.cols(), |i, j| {
                (0..s.rows())
                    .map(|t| (t_sr[(t, i)] - s[(t, j)]).abs())
                    .sum()
            });
            let mut perm = assignment(&cost);
            let mut taken = vec![false; s.cols()];
            for &j in &perm {
                taken[j] = true;
            }
            perm.extend(by_sum.into_iter().filter(|&j| !taken[j]));
            Ok(perm)
        }
    }
}

/// Keeps the first `min(k, m, n)` columns of each already-permuted matrix.
pub fn truncate_topk(t_sr: &Matrix, s_sr: &Matrix, k: usize) -> Result<AlignedPair> {
    if k == 0 {
        return Err(Error::config("truncation width k must be at least 1"));
    }
    if t_sr.rows() != s_sr.rows() {
        return Err(Error::input(format!(
            "teacher has {} tokens, student has {}",
            t_sr.rows(),
            s_sr.rows()
        )));
    }
    let k = k.min(t_sr.cols()).min(s_sr.cols());
    let keep: Vec<usize> = (0..k).collect();
    AlignedPair::new(t_sr.select_columns(&keep), s_sr.select_columns(&keep))
}

/// Rank, match and truncate in one pass. Both inputs must share a token count.
pub fn rank_and_truncate(
    t: &ProbMatrix,
    s: &ProbMatrix,
    k: usize,
    mode: MatchMode,
) -> Result<(RankSelection, AlignedPair)> {
    let (teacher_perm, t_sr) = sequence_rank_teacher(t);
    let student_perm = match_student(&t_sr, s, mode)?;
    let s_sr = s.select_columns(&student_perm);
    let pair = truncate_topk(&t_sr, &s_sr, k)?;
    let selection = RankSelection {
        teacher_perm,
        student_perm,
        k: pair.width(),
        requested_k: k,
        match_mode: mode,
    };
    Ok((selection, pair))
}
