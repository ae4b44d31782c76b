//! Command-line front end.
//!
//! Exit codes: 0 success, 1 a verified property failed, 2 usage or I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gca::error::{GcaError, Result};
use gca::kernel::{gibbs_kernel, normalize_rows, CostMatrix, EmbeddingBatch, DEFAULT_EPSILON};
use gca::losses::{evaluate_loss, LossConfig, LossKind, RinceParams, DEFAULT_ITERATIONS, DEFAULT_UOT_WEIGHT};
use gca::matio::{append_metrics_jsonl, read_matrix, write_matrix_csv, Metric, MetricsRecord};
use gca::plans::{block_domain_plan, identity_plan, raw_domain_plan, TargetPlan};
use gca::solver::{dual_objective, sinkhorn, HalfStepKind, Marginals, SolverOptions};
use gca::train::{
    domain_alignment_experiment, gen_blobs, probe_encoder, train_encoder, AugmentConfig, BlobConfig, DomainWeights,
    TrainConfig,
};
use gca::uot::{unbalanced_sinkhorn, uot_objective_terms, UotOptions};
use gca::verify::{verify_suite, Property, VerifyConfig};

#[derive(Parser)]
#[command(name = "gca", version, about = "Contrastive alignment via entropic and unbalanced optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Balanced scaling iterations on a cost matrix.
    Solve(SolveArgs),
    /// Unbalanced scaling iterations with KL-relaxed marginals.
    Uot(UotArgs),
    /// Evaluates a contrastive loss on two embedding files.
    Loss(LossArgs),
    /// Trains an encoder on synthetic blobs.
    Train(TrainArgs),
    /// Runs the property suite over random instances.
    Verify(VerifyArgs),
    /// Builds a target plan.
    Plan(PlanArgs),
}

#[derive(Args)]
struct MarginalArgs {
    /// Row marginal file (one row or one column); defaults to ones.
    #[arg(long)]
    mu: Option<PathBuf>,
    /// Column marginal file; defaults to ones.
    #[arg(long)]
    nu: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Cost matrix (CSV or GCAM).
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Run exactly this many iterations.
    #[arg(long, conflicts_with = "tol")]
    iters: Option<usize>,
    /// Stop once both marginal residuals fall below this.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap when stopping on tolerance.
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    #[command(flatten)]
    marginals: MarginalArgs,
    /// Plan output (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Diagnostics output (JSON).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct UotArgs {
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda2: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    /// Absorb scalings into the potentials once they exceed this magnitude.
    #[arg(long, default_value_t = 1e3)]
    tau: f64,
    /// Keep the raw unbalanced plan instead of normalizing its columns.
    #[arg(long, alias = "no-colnorm")]
    no_column_normalize: bool,
    #[command(flatten)]
    marginals: MarginalArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    /// One of ince, gca-ince, rince, gca-rince, gca-uot, byol.
    #[arg(long)]
    loss: String,
    /// First view embeddings, one row per sample.
    #[arg(long)]
    z1: PathBuf,
    /// Second view embeddings (the target view for byol).
    #[arg(long)]
    z2: PathBuf,
    /// Normalize rows instead of requiring unit-norm input.
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value_t = RinceParams::default().q)]
    q: f64,
    #[arg(long, default_value_t = RinceParams::default().lambda, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda1: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda2: f64,
    /// Weight of the robust term in gca-uot.
    #[arg(long, default_value_t = DEFAULT_UOT_WEIGHT)]
    w: f64,
    /// Target plan file; identity by default.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Writes the loss's plan to this CSV.
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "gca-ince")]
    loss: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    domains: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    per_cell: usize,
    /// Same-domain weight of the target plan; enables the domain target.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Cross-domain weight of the target plan.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    beta: f64,
    /// Comma-separated alpha values; runs the domain experiment instead.
    #[arg(long, value_delimiter = ',', conflicts_with = "alpha")]
    sweep: Option<Vec<f64>>,
    /// Metrics output (JSON lines), one record per epoch from 0.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Final embeddings of the clean dataset (CSV).
    #[arg(long)]
    embeddings_out: Option<PathBuf>,
    /// Generated dataset points (CSV).
    #[arg(long)]
    dataset_out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker cap; also read from GCA_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Multiplies every tolerance.
    #[arg(long, default_value_t = 1.0)]
    tolerance_scale: f64,
    /// Comma-separated subset of properties; all by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_property)]
    properties: Option<Vec<Property>>,
    /// Per-property JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn parse_property(name: &str) -> std::result::Result<Property, String> {
    Property::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| {
            let known: Vec<&str> = Property::ALL.iter().map(|p| p.name()).collect();
            format!("unknown property {name}; expected one of {}", known.join(", "))
        })
}

#[derive(Args)]
struct PlanArgs {
    /// Identity target of this size.
    #[arg(long, conflicts_with = "domains")]
    identity: Option<usize>,
    /// Comma-separated integer domain label per sample.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    domains: Option<Vec<i64>>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    beta: f64,
    /// Emit the domain plan without rescaling it to mass B.
    #[arg(long)]
    raw: bool,
    /// Output CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Success,
    PropertyFailure,
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let m = read_matrix(path)?;
    if m.rows() != 1 && m.cols() != 1 {
        return Err(GcaError::DimensionMismatch(format!(
            "{} holds a {}x{} matrix, expected a single row or column",
            path.display(),
            m.rows(),
            m.cols()
        )));
    }
    Ok(m.into_vec())
}

fn load_marginals(args: &MarginalArgs, rows: usize, cols: usize) -> Result<Marginals> {
    let mu = match &args.mu {
        Some(p) => read_vector(p)?,
        None => vec![1.0; rows],
    };
    let nu = match &args.nu {
        Some(p) => read_vector(p)?,
        None => vec![1.0; cols],
    };
    let m = Marginals::new(mu, nu)?;
    m.check_shape(rows, cols)?;
    Ok(m)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| GcaError::io(path, e))
}

#[derive(Serialize)]
struct SolveDiagnostics {
    iterations: usize,
    converged: bool,
    row_residual: f64,
    col_residual: f64,
    /// Dual objective after each full iteration.
    dual_objective: Vec<f64>,
}

fn cmd_solve(args: SolveArgs) -> Result<Outcome> {
    let cost = CostMatrix::new(read_matrix(&args.cost)?)?;
    let kernel = gibbs_kernel(&cost, args.epsilon)?;
    let (r, c) = kernel.shape();
    let marginals = load_marginals(&args.marginals, r, c)?;
    let opts = match (args.iters, args.tol) {
        (_, Some(tol)) => SolverOptions::to_tolerance(tol, args.max_iters),
        (Some(n), None) => SolverOptions::fixed(n),
        (None, None) => SolverOptions::to_tolerance(1e-9, args.max_iters),
    };
    let out = sinkhorn(&kernel, &marginals, &opts)?;
    write_matrix_csv(&out.plan.plan, &args.out)?;
    let dual = out
        .trajectory
        .iter()
        .filter(|s| s.kind == HalfStepKind::Col)
        .map(|s| dual_objective(&s.f, &s.g, cost.matrix(), args.epsilon, &marginals))
        .collect::<Result<Vec<f64>>>()?;
    println!(
        "iterations {} converged {} residuals {:e} {:e}",
        out.state.iterations, out.plan.converged, out.plan.row_residual, out.plan.col_residual
    );
    if let Some(path) = &args.diagnostics {
        write_json(
            path,
            &SolveDiagnostics {
                iterations: out.state.iterations,
                converged: out.plan.converged,
                row_residual: out.plan.row_residual,
                col_residual: out.plan.col_residual,
                dual_objective: dual,
            },
        )?;
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct UotDiagnostics {
    iterations: usize,
    mass: f64,
    row_residual: f64,
    col_residual: f64,
    transport: f64,
    row_penalty: f64,
    col_penalty: f64,
    entropy: f64,
}

fn cmd_uot(args: UotArgs) -> Result<Outcome> {
    let cost = CostMatrix::new(read_matrix(&args.cost)?)?;
    let kernel = gibbs_kernel(&cost, args.epsilon)?;
    let (r, c) = kernel.shape();
    let marginals = load_marginals(&args.marginals, r, c)?;
    let opts = UotOptions {
        column_normalize: !args.no_column_normalize,
        absorption_threshold: args.tau,
        ..UotOptions::new(args.lambda1, args.lambda2, args.iters)
    };
    let (plan, state) = unbalanced_sinkhorn(&kernel, &marginals, &opts)?;
    write_matrix_csv(&plan.plan, &args.out)?;
    println!(
        "iterations {} mass {} residuals {:e} {:e}",
        state.iterations,
        plan.mass(),
        plan.row_residual,
        plan.col_residual
    );
    if let Some(path) = &args.diagnostics {
        let terms = uot_objective_terms(
            &plan.plan,
            cost.matrix(),
            args.epsilon,
            &marginals,
            args.lambda1,
            args.lambda2,
        )?;
        write_json(
            path,
            &UotDiagnostics {
                iterations: state.iterations,
                mass: plan.mass(),
                row_residual: plan.row_residual,
                col_residual: plan.col_residual,
                transport: terms.transport,
                row_penalty: terms.row_penalty,
                col_penalty: terms.col_penalty,
                entropy: terms.entropy,
            },
        )?;
    }
    Ok(Outcome::Success)
}

fn load_embeddings(path: &Path, normalize: bool) -> Result<EmbeddingBatch> {
    let m = read_matrix(path)?;
    if normalize {
        normalize_rows(&m)
    } else {
        EmbeddingBatch::new(m)
    }
}

fn cmd_loss(args: LossArgs) -> Result<Outcome> {
    let kind: LossKind = args.loss.parse()?;
    let z1 = load_embeddings(&args.z1, args.normalize)?;
    let z2 = load_embeddings(&args.z2, args.normalize)?;
    let target = args
        .target
        .as_ref()
        .map(|p| read_matrix(p).and_then(TargetPlan::new))
        .transpose()?;
    let config = LossConfig {
        epsilon: args.epsilon,
        iterations: args.iters,
        rince: RinceParams::new(args.q, args.lambda)?,
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        weight: args.w,
        target,
    };
    let result = evaluate_loss(kind, &z1, &z2, &config)?;
    println!("{}", result.value);
    if let Some(path) = &args.plan_out {
        write_matrix_csv(&result.plan, path)?;
    }
    Ok(Outcome::Success)
}

fn cmd_train(args: TrainArgs) -> Result<Outcome> {
    let kind: LossKind = args.loss.parse()?;
    let dataset = gen_blobs(&BlobConfig {
        classes: args.classes,
        domains: args.domains,
        dim: args.dim,
        per_cell: args.per_cell,
        seed: args.seed,
        ..BlobConfig::default()
    })?;
    if let Some(path) = &args.dataset_out {
        write_matrix_csv(&dataset.points, path)?;
    }
    let config = TrainConfig {
        loss: kind,
        loss_config: LossConfig {
            epsilon: args.epsilon,
            ..LossConfig::default()
        },
        domain_weights: args.alpha.map(|alpha| DomainWeights { alpha, beta: args.beta }),
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let augmentation = AugmentConfig::default();

    if let Some(alphas) = &args.sweep {
        let rows = domain_alignment_experiment(alphas, args.beta, &dataset, &config, &augmentation)?;
        println!("alpha,class_accuracy,domain_accuracy");
        for row in rows {
            println!("{},{},{}", row.alpha, row.class_accuracy, row.domain_accuracy);
        }
        return Ok(Outcome::Success);
    }

    let (encoder, history) = train_encoder(&dataset, &config, &augmentation)?;
    if let Some(path) = &args.metrics {
        if path.exists() {
            std::fs::remove_file(path).map_err(|e| GcaError::io(path, e))?;
        }
        for epoch in &history {
            append_metrics_jsonl(&epoch.to_record(), path)?;
        }
    }
    if let Some(path) = &args.embeddings_out {
        let (z, _) = gca::train::encoder_forward(&encoder, &dataset.points)?;
        write_matrix_csv(z.matrix(), path)?;
    }
    let last = history.last().expect("history starts with the initialization");
    let (class_accuracy, domain_accuracy) = probe_encoder(&encoder, &dataset, args.seed)?;
    let summary = MetricsRecord::new(last.epoch)
        .with(Metric::Loss, last.loss)
        .with(Metric::Alignment, last.alignment)
        .with(Metric::Uniformity, last.uniformity)
        .with(Metric::ProbeAccuracy, class_accuracy);
    println!("{}", summary.to_json_line()?);
    if args.domains >= 2 {
        println!("domain probe accuracy {domain_accuracy}");
    }
    Ok(Outcome::Success)
}

fn cmd_verify(args: VerifyArgs) -> Result<Outcome> {
    let report = verify_suite(&VerifyConfig {
        instances: args.instances,
        seed: args.seed,
        tolerance_scale: args.tolerance_scale,
        threads: args.threads,
        properties: args.properties.unwrap_or_else(|| Property::ALL.to_vec()),
    })?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    Ok(if report.all_passed {
        Outcome::Success
    } else {
        Outcome::PropertyFailure
    })
}

fn cmd_plan(args: PlanArgs) -> Result<Outcome> {
    let plan = match (args.identity, &args.domains) {
        (Some(_), None) if args.raw => {
            return Err(GcaError::InvalidParameter("--raw applies only to --domains".into()))
        }
        (Some(b), None) => identity_plan(b)?,
        (None, Some(domains)) if args.raw => {
            TargetPlan::new(raw_domain_plan(domains, args.alpha, args.beta)?)?
        }
        (None, Some(domains)) => block_domain_plan(domains, args.alpha, args.beta)?,
        _ => {
            return Err(GcaError::InvalidParameter(
                "pass exactly one of --identity or --domains".into(),
            ))
        }
    };
    match &args.out {
        Some(path) => write_matrix_csv(plan.matrix(), path)?,
        None => print!("{}", gca::matio::format_matrix_csv(plan.matrix())),
    }
    Ok(Outcome::Success)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Uot(a) => cmd_uot(a),
        Command::Loss(a) => cmd_loss(a),
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Plan(a) => cmd_plan(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 0 for --help/--version and 2 for usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailure) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
