//! Toy cross-vocabulary distillation.
//!
//! A frozen teacher maps each of `contexts` inputs to a fixed row of `m`
//! logits; the student is a trainable `contexts x n` logit table with
//! `n != m` in general. A sequence is `T` context ids. Training sequences
//! come from shuffling the contexts and chunking them; evaluation uses a
//! separate shuffle, so held-out sequences group and order the contexts
//! differently from anything seen in training.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::composite::{evaluate, gradient, prepare, LossWeights};
use crate::error::{Error, Result};
use crate::numeric::{argmax, softmax_backward, softmax_rows, LogitMatrix, Matrix, Temperature};
use crate::token_ot::uld_loss_grad;

const STREAM_TEACHER: u64 = 0;
const STREAM_STUDENT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_VOCAB: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    MultilevelOt,
    CeOnly,
    Uld,
}

impl DistillMode {
    pub const ALL: [DistillMode; 3] = [
        DistillMode::MultilevelOt,
        DistillMode::CeOnly,
        DistillMode::Uld,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillMode::MultilevelOt => "multilevel_ot",
            DistillMode::CeOnly => "ce_only",
            DistillMode::Uld => "uld",
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DistillMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub seed: u64,
    /// Teacher vocabulary.
    pub m: usize,
    /// Student vocabulary.
    pub n: usize,
    /// Tokens per sequence.
    pub tokens: usize,
    pub contexts: usize,
    pub steps: usize,
    pub lr: f64,
    /// Scale applied to the teacher's standard-normal logits.
    pub sharpness: f64,
    /// Standard deviation of the student's initial logits.
    pub init_scale: f64,
    /// Number of context shuffles making up the training set.
    pub train_passes: usize,
    /// Use teacher argmax tokens passed through a random vocabulary map as
    /// ground truth. Off by default: CE then uses pseudo-labels.
    pub labeled: bool,
    pub weights: LossWeights,
    pub mode: DistillMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            m: 20,
            n: 15,
            tokens: 8,
            contexts: 32,
            steps: 500,
            lr: 0.5,
            sharpness: 2.0,
            init_scale: 0.1,
            train_passes: 2,
            labeled: false,
            weights: LossWeights::default(),
            mode: DistillMode::MultilevelOt,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.m < 2 || self.n < 2 {
            return Err(Error::config("vocabularies need at least 2 entries"));
        }
        if self.tokens == 0 || self.contexts < self.tokens {
            return Err(Error::config(format!(
                "need 1 <= T <= contexts, got T={} contexts={}",
                self.tokens, self.contexts
            )));
        }
        if self.steps == 0 || self.train_passes == 0 {
            return Err(Error::config("steps and train_passes must be at least 1"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("sharpness", self.sharpness),
            ("init_scale", self.init_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting, including every [`LossWeights`] key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "T" | "tokens" => self.tokens = num(key, value)?,
            "contexts" => self.contexts = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "sharpness" => self.sharpness = num(key, value)?,
            "init_scale" => self.init_scale = num(key, value)?,
            "train_passes" => self.train_passes = num(key, value)?,
            "labeled" => self.labeled = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            _ => {
                if !self.weights.set(key, value)? {
                    return Err(Error::config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Frozen teacher: a seeded `contexts x m` logit table.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTeacher {
    pub seed: u64,
    pub sharpness: f64,
    table: Matrix,
}

impl SyntheticTeacher {
    pub fn new(seed: u64, m: usize, contexts: usize, sharpness: f64) -> Self {
        let mut rng = stream(seed, STREAM_TEACHER);
        let table = Matrix::from_fn(contexts, m, |_, _| {
            sharpness * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            seed,
            sharpness,
            table,
        }
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn vocab(&self) -> usize {
        self.table.cols()
    }

    pub fn logits(&self, sequence: &[usize]) -> Result<LogitMatrix> {
        gather(&self.table, sequence)
    }

    /// Stable digest of the logit table.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits
        self.table
            .as_slice()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
                (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
            })
    }
}

/// Trainable per-context logit table.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearStudent {
    weights: Matrix,
    pub learning_rate: f64,
}

impl LinearStudent {
    pub fn new(seed: u64, n: usize, contexts: usize, init_scale: f64, learning_rate: f64) -> Self {
        let mut rng = stream(seed, STREAM_STUDENT);
        let weights = Matrix::from_fn(contexts, n, |_, _| {
            init_scale * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            weights,
            learning_rate,
        }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn vocab(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, sequence: &[usize]) -> Result<LogitMatrix> {
        gather(&self.weights, sequence)
    }

    /// `W[ctx] -= lr * grad` for every accumulated context row.
    pub fn step(&mut self, grad: &Matrix) {
        for (w, g) in self.weights.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *w -= self.learning_rate * g;
        }
    }
}

fn gather(table: &Matrix, sequence: &[usize]) -> Result<LogitMatrix> {
    let rows: Vec<&[f64]> = sequence.iter().map(|&c| table.row(c)).collect();
    LogitMatrix::from_rows(&rows)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn shuffled_sequences(
    rng: &mut ChaCha8Rng,
    contexts: usize,
    tokens: usize,
    passes: usize,
) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for _ in 0..passes {
        let mut ids: Vec<usize> = (0..contexts).collect();
        ids.shuffle(rng);
        out.extend(ids.chunks_exact(tokens).map(<[usize]>::to_vec));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub ce: f64,
    pub had: f64,
    pub sl: f64,
    pub sd: f64,
    pub total: f64,
    pub eval_sd: f64,
}

impl StepRecord {
    fn is_finite(&self) -> bool {
        [
            self.ce,
            self.had,
            self.sl,
            self.sd,
            self.total,
            self.eval_sd,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub mode: DistillMode,
    pub teacher_fingerprint: u64,
    pub records: Vec<StepRecord>,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "step,ce,had,sl,sd,total,eval_sd";

    /// Header plus one row per step; floats use the shortest representation
    /// that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.ce, r.had, r.sl, r.sd, r.total, r.eval_sd
            ));
        }
        out
    }
}

/// Everything a run needs besides the student: teacher, sequences, labels.
struct Setup {
    teacher: SyntheticTeacher,
    train: Vec<Vec<usize>>,
    eval: Vec<Vec<usize>>,
    /// Per-context student-vocabulary target, when labeled.
    context_labels: Option<Vec<usize>>,
}

impl Setup {
    fn new(cfg: &DistillConfig) -> Self {
        let teacher = SyntheticTeacher::new(cfg.seed, cfg.m, cfg.contexts, cfg.sharpness);
        let train = shuffled_sequences(
            &mut stream(cfg.seed, STREAM_TRAIN),
            cfg.contexts,
            cfg.tokens,
            cfg.train_passes,
        );
        let eval = shuffled_sequences(
            &mut stream(cfg.seed, STREAM_EVAL),
            cfg.contexts,
            cfg.tokens,
            1,
        );
        let context_labels = cfg.labeled.then(|| {
            // each teacher token lands on some student token, as when two
            // tokenizers split the same text differently
            let mut rng = stream(cfg.seed, STREAM_VOCAB);
            let vocab_map: Vec<usize> = (0..cfg.m).map(|_| rng.random_range(0..cfg.n)).collect();
            (0..cfg.contexts)
                .map(|c| vocab_map[argmax(teacher.table().row(c))])
                .collect()
        });
        Self {
            teacher,
            train,
            eval,
            context_labels,
        }
    }

    fn labels(&self, sequence: &[usize]) -> Option<Vec<usize>> {
        self.context_labels
            .as_ref()
            .map(|l| sequence.iter().map(|&c| l[c]).collect())
    }
}

/// Losses and logit gradient for one sequence under `mode`. The breakdown
/// always reports the multi-level components.
fn sequence_step(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    labels: Option<&[usize]>,
    w: &LossWeights,
    mode: DistillMode,
) -> Result<(StepRecord, Matrix)> {
    let sel = prepare(teacher, student, labels, w)?;
    let b = evaluate(teacher, student, &sel, w)?;
    let ce_only = LossWeights { alpha: 0.0, ..*w };
    let (total, grad) = match mode {
        DistillMode::MultilevelOt => (b.total, gradient(teacher, student, &sel, w)?),
        DistillMode::CeOnly => (b.ce, gradient(teacher, student, &sel, &ce_only)?),
        DistillMode::Uld => {
            let tau = Temperature::new(w.tau_sl)?;
            let l = sel.tokens;
            let t = softmax_rows(&teacher.head_rows(l), tau);
            let s_full = softmax_rows(student, tau);
            let uld = uld_loss_grad(&t, &s_full.head_rows(l))?;
            let mut d = Matrix::zeros(student.rows(), student.cols());
            for r in 0..l {
                d.row_mut(r).copy_from_slice(uld.grad.row(r));
            }
            let back = softmax_backward(&s_full, &d, tau);
            let mut g = gradient(teacher, student, &sel, &ce_only)?;
            for (gv, bv) in g.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *gv += w.alpha * bv;
            }
            (b.ce + w.alpha * uld.value, g)
        }
    };
    let record = StepRecord {
        step: 0,
        ce: b.ce,
        had: b.had,
        sl: b.sl,
        sd: b.sd,
        total,
        eval_sd: 0.0,
    };
    Ok((record, grad))
}

fn eval_sd(setup: &Setup, student: &LinearStudent, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for seq in &setup.eval {
        let t = setup.teacher.logits(seq)?;
        let s = student.logits(seq)?;
        let sel = prepare(&t, &s, None, w)?;
        total += evaluate(&t, &s, &sel, w)?.sd;
    }
    Ok(total / setup.eval.len() as f64)
}

/// Full-batch gradient descent on the student table. Record `i` holds the
/// losses at the weights before update `i`.
pub fn run_distillation(cfg: &DistillConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let setup = Setup::new(cfg);
    let student = LinearStudent::new(cfg.seed, cfg.n, cfg.contexts, cfg.init_scale, cfg.lr);
    train(cfg, &setup, student)
}

fn train(cfg: &DistillConfig, setup: &Setup, mut student: LinearStudent) -> Result<RunMetrics> {
    let mut metrics = RunMetrics {
        mode: cfg.mode,
        teacher_fingerprint: setup.teacher.fingerprint(),
        records: Vec::with_capacity(cfg.steps),
    };
    let batch = setup.train.len() as f64;

    for step in 0..cfg.steps {
        match train_step(cfg, setup, &student, step, batch) {
            Ok((rec, grad)) => {
                metrics.records.push(rec);
                student.step(&grad);
            }
            Err(Error::NumericalFailure(_) | Error::NumericalUnderflow(_)) => {
                return Err(Error::Diverged {
                    step,
                    completed: Box::new(metrics),
                })
            }
            // non-finite weights surface as invalid logits
            Err(Error::InvalidInput(_)) if !student.weights().is_finite() => {
                return Err(Error::Diverged {
                    step,
                    completed: Box::new(metrics),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(metrics)
}

fn train_step(
    cfg: &DistillConfig,
    setup: &Setup,
    student: &LinearStudent,
    step: usize,
    batch: f64,
) -> Result<(StepRecord, Matrix)> {
    let mut grad = Matrix::zeros(cfg.contexts, cfg.n);
    let mut rec = StepRecord {
        step,
        ce: 0.0,
        had: 0.0,
        sl: 0.0,
        sd: 0.0,
        total: 0.0,
        eval_sd: 0.0,
    };
    for seq in &setup.train {
        let labels = setup.labels(seq);
        let (r, g) = sequence_step(
            &setup.teacher.logits(seq)?,
            &student.logits(seq)?,
            labels.as_deref(),
            &cfg.weights,
            cfg.mode,
        )?;
        rec.ce += r.ce / batch;
        rec.had += r.had / batch;
        rec.sl += r.sl / batch;
        rec.sd += r.sd / batch;
        rec.total += r.total / batch;
        for (t, &ctx) in seq.iter().enumerate() {
            for (acc, v) in grad.row_mut(ctx).iter_mut().zip(g.row(t)) {
                *acc += v / batch;
            }
        }
    }
    rec.eval_sd = eval_sd(setup, student, &cfg.weights)?;
    if !rec.is_finite() || !grad.is_finite() {
        return Err(Error::NumericalFailure(format!(
            "non-finite loss or gradient at step {step}"
        )));
    }
    Ok((rec, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: DistillMode,
    pub teacher_fingerprint: u64,
    pub initial_eval_sd: f64,
    pub final_eval_sd: f64,
    pub final_had: f64,
}

impl ModeSummary {
    fn from_metrics(m: &RunMetrics) -> Self {
        let first = m.records.first().expect("at least one step");
        let last = m.records.last().expect("at least one step");
        Self {
            mode: m.mode,
            teacher_fingerprint: m.teacher_fingerprint,
            initial_eval_sd: first.eval_sd,
            final_eval_sd: last.eval_sd,
            final_had: last.had,
        }
    }
}

/// Runs every [`DistillMode`] from the same seed, one thread per mode.
/// Rows come back in [`DistillMode::ALL`] order.
pub fn compare_modes(cfg: &DistillConfig) -> Result<Vec<ModeSummary>> {
    cfg.validate()?;
    let runs: Vec<Result<RunMetrics>> = std::thread::scope(|scope| {
        let handles: Vec<_> = DistillMode::ALL
            .into_iter()
            .map(|mode| {
                let cfg = DistillConfig {
                    mode,
                    ..cfg.clone()
                };
                scope.spawn(move || run_distillation(&cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("distillation thread panicked"))
            .collect()
    });
    runs.into_iter()
        .map(|r| r.map(|m| ModeSummary::from_metrics(&m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DistillConfig {
        DistillConfig {
            m: 6,
            n: 5,
            tokens: 3,
            contexts: 6,
            steps: 4,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small();
        assert_eq!(
            run_distillation(&cfg).unwrap(),
            run_distillation(&cfg).unwrap()
        );
    }

    #[test]
    fn zero_learning_rate_freezes_metrics() {
        let cfg = DistillConfig { lr: 0.0, ..small() };
        let m = run_distillation(&cfg).unwrap();
        assert_eq!(m.records.len(), 4);
        for r in &m.records[1..] {
            let first = StepRecord {
                step: r.step,
                ..m.records[0].clone()
            };
            assert_eq!(*r, first);
        }
    }

    #[test]
    fn sequences_cover_every_context() {
        let cfg = small();
        let setup = Setup::new(&cfg);
        assert_eq!(setup.train.len(), 4);
        assert_eq!(setup.eval.len(), 2);
        let mut seen: Vec<usize> = setup.eval.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn ce_only_matches_alpha_zero() {
        let base = small();
        let ce = run_distillation(&DistillConfig {
            mode: DistillMode::CeOnly,
            ..base.clone()
        })
        .unwrap();
        let mut w = base.weights;
        w.alpha = 0.0;
        let zero = run_distillation(&DistillConfig { weights: w, ..base }).unwrap();
        for (a, b) in ce.records.iter().zip(&zero.records) {
            assert_eq!(a.ce, b.ce);
            assert_eq!(a.total, b.total);
            assert_eq!(a.eval_sd, b.eval_sd);
        }
    }

    #[test]
    fn compare_modes_shares_teacher() {
        let rows = compare_modes(&small()).unwrap();
        assert_eq!(rows.len(), 3);
        let modes: Vec<_> = rows.iter().map(|r| r.mode).collect();
        assert_eq!(modes, DistillMode::ALL.to_vec());
        assert!(rows
            .iter()
            .all(|r| r.teacher_fingerprint == rows[0].teacher_fingerprint));
    }

    #[test]
    fn divergence_is_reported_with_partial_metrics() {
        let cfg = small();
        let setup = Setup::new(&cfg);
        let mut student = LinearStudent::new(cfg.seed, cfg.n, cfg.contexts, cfg.init_scale, cfg.lr);
        student.weights[(0, 0)] = f64::NAN;
        match train(&cfg, &setup, student) {
            Err(Error::Diverged { step: 0, completed }) => assert!(completed.records.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn saturating_learning_rate_stays_finite() {
        let cfg = DistillConfig {
            lr: 1e300,
            steps: 5,
            ..small()
        };
        let m = run_distillation(&cfg).unwrap();
        assert!(m.records.iter().all(StepRecord::is_finite));
    }

    #[test]
    fn small_learning_rate_descends() {
        let cfg = DistillConfig {
            steps: 11,
            lr: 0.05,
            ..DistillConfig::default()
        };
        let m = run_distillation(&cfg).unwrap();
        assert!(m.records[10].total <= m.records[0].total);
    }

    #[test]
    fn labeled_mode_runs() {
        let cfg = DistillConfig {
            labeled: true,
            ..small()
        };
        let m = run_distillation(&cfg).unwrap();
        assert_eq!(m.records.len(), 4);
        assert!(m.records.iter().all(StepRecord::is_finite));
    }

    #[test]
    fn config_keys() {
        let mut cfg = DistillConfig::default();
        cfg.set("T", "4").unwrap();
        cfg.set("mode", "uld").unwrap();
        cfg.set("alpha", "0.3").unwrap();
        assert_eq!(
            (cfg.tokens, cfg.mode, cfg.weights.alpha),
            (4, DistillMode::Uld, 0.3)
        );
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("steps", "-1").is_err());
        cfg.contexts = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let m = run_distillation(&DistillConfig {
            steps: 3,
            ..small()
        })
        .unwrap();
        let csv = m.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], RunMetrics::CSV_HEADER);
        assert!(lines[3].starts_with("2,"));
    }
}
