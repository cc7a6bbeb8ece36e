//! Multi-level optimal transport losses for distilling between models whose
//! vocabularies differ.
//!
//! - [`numeric`]: matrices, temperature softmax, guarded logs
//! - [`preprocess`]: sequence-level ranking, student matching, top-k truncation
//! - [`token_ot`]: absolute-difference, logarithmic and ULD token losses
//! - [`seq_ot`]: token-to-token cost, Sinkhorn plan, Sinkhorn distance
//! - [`oracle`]: exact OT, assignment, finite-difference gradient checks
//! - [`composite`]: cross-entropy and the weighted total with its gradient
//! - [`harness`]: a toy teacher/student run exercising the whole stack
//! - [`io`]: logit files, CSV matrices, labels and configs

pub mod composite;
pub mod error;
pub mod harness;
pub mod io;
pub mod numeric;
pub mod oracle;
pub mod preprocess;
pub mod seq_ot;
pub mod token_ot;

pub use composite::{
    ce_loss, evaluate, gradient, loss_and_grad, prepare, total_grad, total_loss, LossBreakdown,
    LossWeights, Selections,
};
pub use error::{Error, Result};
pub use harness::{compare_modes, run_distillation, DistillConfig, DistillMode, RunMetrics};
pub use numeric::{safe_log, softmax_rows, LogitMatrix, Matrix, ProbMatrix, Temperature};
pub use oracle::{check_gradient, exact_ot, finite_diff_grad, ExactMethod, ExactOtResult};
pub use preprocess::{
    match_student, rank_and_truncate, sequence_rank_teacher, truncate_topk, AlignedPair, MatchMode,
    RankSelection,
};
pub use seq_ot::{
    sd_grad, sd_loss, seq_cost_matrix, sinkhorn_plan, CostMatrix, SinkhornConfig, TransportPlan,
};
pub use token_ot::{had_loss, sl_loss, uld_loss, TokenLossGrad};
