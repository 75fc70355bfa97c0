//! Command-line driver: runs config-described experiment matrices, validates
//! configs, rebuilds comparison tables from stored summaries, and audits the
//! hand-written gradients against central differences.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aanets::experiment::{self, outputs, ExperimentConfig, Overrides, Plan};
use aanets::trainer::gradcheck::{audit_fixture, grad_check, ParamGroup};
use aanets::Error;

/// Gradient audits fail above this maximum relative error.
const GRAD_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "aanets",
    version,
    about = "Dual-branch incremental-learning experiment driver"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (layout, phase count, seed) job described by a config file.
    Run(RunArgs),
    /// Check a config and print the planned job matrix without training.
    Validate(ConfigArgs),
    /// Rebuild the comparison table from summaries stored in an output dir.
    Report(ReportArgs),
    /// Compare analytic gradients against central differences on a tiny
    /// built-in model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override how many seeds run per configuration.
    #[arg(long)]
    seeds: Option<usize>,
    /// Charge extra parameters against the exemplar quota.
    #[arg(long)]
    strict_memory: bool,
    /// Redirect outputs away from the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Worker threads for independent jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Plan and validate only; print the matrix and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment output directory holding summaries.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Parameter family to audit.
    #[arg(long, value_enum, default_value = "all")]
    group: Group,
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Group {
    Alpha,
    Phi,
    Eta,
    All,
}

impl Group {
    fn expand(self) -> Vec<ParamGroup> {
        match self {
            Group::Alpha => vec![ParamGroup::Alpha],
            Group::Phi => vec![ParamGroup::Phi],
            Group::Eta => vec![ParamGroup::Eta],
            Group::All => vec![ParamGroup::Alpha, ParamGroup::Phi, ParamGroup::Eta],
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(err) => fail(&err),
    }
}

fn dispatch(cli: Cli) -> aanets::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Validate(args) => validate(args),
        Command::Report(args) => report(args),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

/// Writes to stdout; exits quietly when the reader has gone away (for
/// example `aanets validate | head`). A closed pipe is not a failure.
fn say(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).and_then(|()| out.flush()).is_err() {
        std::process::exit(0);
    }
}

fn sayln(line: &str) {
    say(&format!("{line}\n"));
}

/// Best-effort stderr record; the exit code carries the failure either way.
fn complain(record: &serde_json::Value) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{record}");
}

/// One machine-readable record on stderr, then a failing exit code.
fn fail(err: &Error) -> ExitCode {
    complain(&serde_json::json!({ "kind": kind_of(err), "error": err.to_string() }));
    ExitCode::FAILURE
}

fn kind_of(err: &Error) -> &'static str {
    match err {
        Error::Dimension(_) => "dimension",
        Error::Config(_) => "config",
        Error::Argument(_) => "argument",
        Error::Data(_) => "data",
        Error::State(_) => "state",
        Error::Numeric(_) => "numeric",
        Error::Protocol(_) => "protocol",
        Error::Format { .. } => "format",
        Error::Training(_) => "training",
        Error::Io(_) => "io",
    }
}

/// AANETS_SEED replaces the base seed that job seeds count up from.
fn seed_from_env() -> aanets::Result<Option<u64>> {
    match std::env::var("AANETS_SEED") {
        Ok(text) => text.parse::<u64>().map(Some).map_err(|_| {
            Error::Argument(format!(
                "AANETS_SEED must be an unsigned integer, got '{text}'"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Argument(format!("AANETS_SEED: {e}"))),
    }
}

fn resolve(args: &ConfigArgs) -> aanets::Result<ExperimentConfig> {
    let cfg = experiment::load_config(&args.config)?;
    let overrides = Overrides {
        seeds: args.seeds,
        strict_memory: args.strict_memory,
        output_dir: args.out.clone(),
        base_seed: seed_from_env()?,
    };
    Ok(experiment::apply_overrides(&cfg, &overrides))
}

fn print_plan(cfg: &ExperimentConfig, plan: &Plan) {
    sayln(&format!(
        "planned jobs: {} (layouts {}, phase counts {}, seeds {})",
        plan.jobs.len(),
        cfg.branch_matrix.len(),
        plan.phase_counts.len(),
        plan.seeds.len()
    ));
    for job in &plan.jobs {
        sayln(&format!(
            "  {} n={} seed={}",
            job.layout, job.n_phases, job.seed
        ));
    }
    sayln(&format!("output dir: {}", cfg.output_dir.display()));
}

fn validate(args: ConfigArgs) -> aanets::Result<ExitCode> {
    let cfg = resolve(&args)?;
    let plan = experiment::plan_jobs(&cfg)?;
    sayln(&format!("config ok: {}", args.config.display()));
    print_plan(&cfg, &plan);
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs) -> aanets::Result<ExitCode> {
    let cfg = resolve(&args.config)?;
    let plan = experiment::plan_jobs(&cfg)?;
    print_plan(&cfg, &plan);
    if args.dry_run {
        sayln("dry run: nothing trained");
        return Ok(ExitCode::SUCCESS);
    }
    let outcome = experiment::run_experiment(&cfg, args.jobs)?;
    let total = outcome.results.len();
    if outcome.failed > 0 {
        complain(&serde_json::json!({
            "kind": "training",
            "error": format!("{} of {total} jobs failed", outcome.failed),
            "failed": outcome.failed,
            "total": total,
            "errors_file": outcome.output_dir.join("errors.jsonl"),
        }));
        return Ok(ExitCode::FAILURE);
    }
    sayln(&format!("completed {total} jobs"));
    let table = std::fs::read_to_string(outcome.output_dir.join("comparison.csv"))?;
    say(&table);
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> aanets::Result<ExitCode> {
    say(&outputs::report(&args.out)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> aanets::Result<ExitCode> {
    let (model, alphas, images, targets) = audit_fixture(12)?;
    let refs: Vec<_> = images.iter().collect();
    sayln(&format!(
        "toy model: {} levels, {} stored scalars, eps {:e}",
        alphas.per_level.len(),
        model.stored_params(),
        args.eps
    ));
    let mut worst: Option<(ParamGroup, f64)> = None;
    for group in args.group.expand() {
        let err = grad_check(&model, &alphas, &refs, &targets, group, args.eps)?;
        let verdict = if err <= GRAD_TOL { "PASS" } else { "FAIL" };
        sayln(&format!(
            "{group}: max relative error {err:e} (tolerance {GRAD_TOL:e}) {verdict}"
        ));
        if err > GRAD_TOL && worst.is_none_or(|(_, w)| err > w) {
            worst = Some((group, err));
        }
    }
    match worst {
        None => Ok(ExitCode::SUCCESS),
        Some((group, err)) => Err(Error::Numeric(format!(
            "gradient check failed: {group} max relative error {err:e} exceeds {GRAD_TOL:e}"
        ))),
    }
}
