use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mlot_core::io::{
    load_distill_config, load_loss_weights, read_labels, read_logit_file, read_matrix_csv,
    write_atomic, write_matrix_csv,
};
use mlot_core::{
    exact_ot, run_distillation, sd_loss, sinkhorn_plan, total_loss, CostMatrix, DistillMode, Error,
    ExactMethod, LossWeights, RunMetrics, SinkhornConfig,
};

#[derive(Parser)]
#[command(
    name = "mlot",
    version,
    about = "Multi-level OT distillation losses on dumped logits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Loss breakdown for a teacher/student logit pair
    Loss {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// One student token id per line; pseudo-labels are used without it
        #[arg(long)]
        labels: Option<PathBuf>,
        /// key=value overrides of the loss weights
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Sinkhorn plan for a square cost matrix
    Sinkhorn {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact transport value and optimal permutation
    Oracle {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Assign)]
        method: Method,
    },
    /// Toy teacher/student run, metrics written as CSV
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<DistillMode>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Brute,
    Assign,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::InvalidConfig(_) => 2,
        Error::InvalidInput(_) | Error::TooLargeForExact { .. } => 3,
        Error::NumericalUnderflow(_) | Error::NumericalFailure(_) | Error::Diverged { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Loss {
            teacher,
            student,
            labels,
            config,
            json,
        } => loss(
            &teacher,
            &student,
            labels.as_deref(),
            config.as_deref(),
            json,
        ),
        Command::Sinkhorn {
            cost,
            lambda,
            iters,
            out,
        } => sinkhorn(&cost, lambda, iters, &out),
        Command::Oracle { cost, method } => oracle(&cost, method),
        Command::Distill { config, out, mode } => distill(&config, &out, mode),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn loss(
    teacher: &Path,
    student: &Path,
    labels: Option<&Path>,
    config: Option<&Path>,
    json: bool,
) -> Result<(), Error> {
    let weights = match config {
        Some(p) => load_loss_weights(p)?,
        None => LossWeights::default(),
    };
    let t = read_logit_file(teacher)?;
    let s = read_logit_file(student)?;
    let labels = labels.map(read_labels).transpose()?;
    let b = total_loss(&t, &s, labels.as_deref(), &weights)?;

    if json {
        let report = serde_json::json!({
            "ce": b.ce,
            "had": b.had,
            "sl": b.sl,
            "sd": b.sd,
            "total": b.total,
            "k_eff": b.k_eff(),
        });
        println!("{report}");
    } else {
        for (name, v) in [
            ("ce", b.ce),
            ("had", b.had),
            ("sl", b.sl),
            ("sd", b.sd),
            ("total", b.total),
        ] {
            println!("{name:<6} {v:.6}");
        }
        println!("{:<6} {}", "k_eff", b.k_eff());
        println!("{:<6} {}", "tokens", b.tokens);
    }
    Ok(())
}

fn sinkhorn(cost: &Path, lambda: f64, iters: usize, out: &Path) -> Result<(), Error> {
    let cfg = SinkhornConfig::new(lambda, iters)?;
    let c = CostMatrix::new(read_matrix_csv(cost)?)?;
    let plan = sinkhorn_plan(&c, &cfg)?;
    let value = sd_loss(&c, &plan)?;
    write_matrix_csv(out, plan.matrix())?;
    println!("{value}");
    Ok(())
}

fn oracle(cost: &Path, method: Method) -> Result<(), Error> {
    let method = match method {
        Method::Brute => ExactMethod::BruteForce,
        Method::Assign => ExactMethod::Assignment,
    };
    let r = exact_ot(&read_matrix_csv(cost)?, method)?;
    let perm: Vec<String> = r.plan.iter().map(usize::to_string).collect();
    println!("value {}", r.value);
    println!("permutation [{}]", perm.join(","));
    Ok(())
}

fn distill(config: &Path, out: &Path, mode: Option<DistillMode>) -> Result<(), Error> {
    let mut cfg = load_distill_config(config)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let write = |m: &RunMetrics| write_atomic(out, m.to_csv().as_bytes());
    match run_distillation(&cfg) {
        Ok(metrics) => {
            write(&metrics)?;
            if let (Some(first), Some(last)) = (metrics.records.first(), metrics.records.last()) {
                println!(
                    "{}: {} steps, eval_sd {} -> {}",
                    cfg.mode,
                    metrics.records.len(),
                    first.eval_sd,
                    last.eval_sd
                );
            }
            Ok(())
        }
        Err(Error::Diverged { step, completed }) => {
            write(&completed)?;
            Err(Error::Diverged { step, completed })
        }
        Err(e) => Err(e),
    }
}
