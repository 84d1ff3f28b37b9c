//! Command-line driver: simulate trajectories, fit the drift parameter, run
//! either goodness-of-fit test, build quantile tables, and drive Monte Carlo
//! experiments.
//!
//! Exit codes: 0 on success (including help/version), 1 on usage or runtime
//! errors, 2 when an experiment aborts on its failure budget.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use smallnoise_gof::gof_first::{first_test, first_test_with_table, FirstTestOptions};
use smallnoise_gof::gof_second::{second_test, second_test_with_table, TruncationPolicy};
use smallnoise_gof::harness::{
    run_distribution_check, run_power_experiment, run_size_experiment, ExperimentConfig,
};
use smallnoise_gof::limits::{
    default_table, path_sample_limit, sample_limit, LimitFamily, QuantileTable,
};
use smallnoise_gof::model::{resolve_model_choice, AlternativeDrift};
use smallnoise_gof::sde::{
    read_trajectory_csv, simulate, simulate_alternative, write_trajectory_csv, NoiseStream,
};
use smallnoise_gof::{mle, Error, Grid, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "smallnoise-gof",
    version,
    about = "Goodness-of-fit tests for small-noise diffusions with parametric drift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory and write it as CSV plus a JSON sidecar.
    Simulate(SimulateArgs),
    /// Maximum-likelihood drift estimate on a recorded trajectory.
    Estimate(EstimateArgs),
    /// First test (scalar parameter, Brownian-bridge limit law).
    Test1(Test1Args),
    /// Second test (any parameter dimension, Wiener limit law).
    Test2(Test2Args),
    /// Sample a limit law and print or write its quantile table.
    Quantiles(QuantilesArgs),
    /// Run a Monte Carlo experiment described by a TOML config.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct ModelArg {
    /// Drift family: `example1`, `ou`, or `linear:<config.toml>`.
    #[arg(long)]
    model: String,
}

impl ModelArg {
    fn resolve(&self) -> Result<(smallnoise_gof::ModelSpec, smallnoise_gof::ParameterSpace)> {
        resolve_model_choice(&self.model)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Drift parameter, one value per family component.
    #[arg(long, value_delimiter = ',', required = true)]
    theta: Vec<f64>,
    /// Noise level in (0, 1).
    #[arg(long)]
    epsilon: f64,
    /// Number of grid intervals.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replication stream within the seed.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// Simulate under this drift expression over `{t, x}` instead of the
    /// family drift (the family's diffusion coefficient is kept).
    #[arg(long)]
    alternative: Option<String>,
    /// Output CSV path; the sidecar lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Trajectory CSV produced by `simulate` (sidecar required).
    #[arg(long)]
    traj: PathBuf,
}

#[derive(Args)]
struct Test1Args {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Add the second-order expansion term to the residual process.
    #[arg(long)]
    ito: bool,
    /// Override the shipped bridge quantile table with this CSV.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write the diagnostic curves (`t,r,q,k,h`) to this CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct Test2Args {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Tail cutoff width (absolute time); default 5 percent of the horizon.
    #[arg(long)]
    nu: Option<f64>,
    /// Eigenvalue floor below which the tail matrix counts as singular.
    #[arg(long)]
    min_eig: Option<f64>,
    /// Override the shipped Wiener quantile table with this CSV.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write the diagnostic curves (`t,u,w,transform`) to this CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum FamilyArg {
    Bridge,
    Wiener,
}

impl From<FamilyArg> for LimitFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Bridge => LimitFamily::BridgeSq,
            FamilyArg::Wiener => LimitFamily::WienerSq,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum SampleMethod {
    /// Karhunen-Loeve series of the limit law.
    Kl,
    /// Discretized path functional (independent route, for cross-checks).
    Path,
}

#[derive(Args)]
struct QuantilesArgs {
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Upper-tail levels for the table rows.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.025,0.05,0.1")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    /// KL series truncation (`kl`) or path grid steps (`path`).
    #[arg(long, default_value_t = 1_000)]
    truncation: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SampleMethod::Kl)]
    method: SampleMethod,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, ValueEnum)]
enum ExperimentKind {
    /// Rejection rate under the null at `theta0`.
    Size,
    /// Rejection rate under the configured alternative drift.
    Power,
    /// Kolmogorov-Smirnov distance of the statistics to their limit law.
    Check,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML (see the `harness` module docs for the schema).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    kind: ExperimentKind,
    /// Directory for `result.json` and `stats.csv` (or `check.json`).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_aborted_run() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Test1(a) => cmd_test1(a),
        Command::Test2(a) => cmd_test2(a),
        Command::Quantiles(a) => cmd_quantiles(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Writes to stdout, treating a closed pipe as a normal early exit rather
/// than a panic (`smallnoise-gof estimate ... | head` is legitimate usage).
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).and_then(|()| out.flush()).is_err() {
        std::process::exit(0);
    }
}

fn emit_line(text: &str) {
    emit(&format!("{text}\n"));
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serializing output: {e}")))?;
    emit_line(&text);
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let (model, _space) = a.model.resolve()?;
    let grid = Grid::new(a.n, model.horizon())?;
    let noise = NoiseStream::new(a.seed, a.stream);
    let traj = match &a.alternative {
        None => simulate(&model, &a.theta, a.epsilon, grid, &noise)?,
        Some(expr) => {
            let alt = AlternativeDrift::from_expr(expr, model.x0(), expr)?;
            simulate_alternative(&model, &alt, a.epsilon, grid, &noise)?
        }
    };
    write_trajectory_csv(&traj, &a.out)?;
    emit_line(&format!(
        "wrote {} (model={}, n={}, epsilon={}, seed={}, stream={})",
        a.out.display(),
        model.tag(),
        a.n,
        a.epsilon,
        a.seed,
        a.stream
    ));
    Ok(())
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let (model, space) = a.model.resolve()?;
    let traj = read_trajectory_csv(&a.traj)?;
    let est = mle::estimate(&model, &space, &traj)?;
    print_json(&est)
}

fn cmd_test1(a: Test1Args) -> Result<()> {
    let (model, space) = a.model.resolve()?;
    let traj = read_trajectory_csv(&a.traj)?;
    let options = FirstTestOptions { include_ito_correction: a.ito };
    let (report, curves) = match &a.table {
        Some(path) => {
            let table = QuantileTable::read_csv(path)?;
            first_test_with_table(&model, &space, &traj, a.alpha, &table, options)?
        }
        None if !a.ito => first_test(&model, &space, &traj, a.alpha)?,
        None => first_test_with_table(
            &model,
            &space,
            &traj,
            a.alpha,
            default_table(LimitFamily::BridgeSq),
            options,
        )?,
    };
    if let Some(path) = &a.curves {
        curves.write_csv(path)?;
    }
    print_json(&report)
}

fn cmd_test2(a: Test2Args) -> Result<()> {
    let (model, space) = a.model.resolve()?;
    let traj = read_trajectory_csv(&a.traj)?;
    let mut policy = TruncationPolicy::default_for(model.horizon());
    if let Some(nu) = a.nu {
        policy.nu = nu;
    }
    if let Some(me) = a.min_eig {
        policy.min_eig = me;
    }
    let (report, curves) = match &a.table {
        Some(path) => {
            let table = QuantileTable::read_csv(path)?;
            second_test_with_table(&model, &space, &traj, a.alpha, &table, policy)?
        }
        None if policy == TruncationPolicy::default_for(model.horizon()) => {
            second_test(&model, &space, &traj, a.alpha)?
        }
        None => second_test_with_table(
            &model,
            &space,
            &traj,
            a.alpha,
            default_table(LimitFamily::WienerSq),
            policy,
        )?,
    };
    if let Some(path) = &a.curves {
        curves.write_csv(path)?;
    }
    print_json(&report)
}

fn cmd_quantiles(a: QuantilesArgs) -> Result<()> {
    let family: LimitFamily = a.family.into();
    let sample = match a.method {
        SampleMethod::Kl => sample_limit(family, a.draws, a.truncation, a.seed)?,
        SampleMethod::Path => path_sample_limit(family, a.truncation, a.draws, a.seed)?,
    };
    let table = QuantileTable::from_sample(family, &sample, &a.alphas, a.truncation)?;
    let method = match a.method {
        SampleMethod::Kl => "kl",
        SampleMethod::Path => "path",
    };
    let comment = format!(
        "generated by: smallnoise-gof quantiles --family {} --draws {} --truncation {} --seed {} --method {}",
        family, a.draws, a.truncation, a.seed, method
    );
    match &a.out {
        Some(path) => {
            table.write_csv(path, &[&comment])?;
            emit_line(&format!("wrote {}", path.display()));
        }
        None => emit(&table.to_csv_string(&[&comment])),
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_path(&a.config)?;
    std::fs::create_dir_all(&a.out_dir)?;
    match a.kind {
        ExperimentKind::Size | ExperimentKind::Power => {
            let result = match a.kind {
                ExperimentKind::Size => run_size_experiment(&cfg)?,
                _ => run_power_experiment(&cfg)?,
            };
            let json_path = a.out_dir.join("result.json");
            let csv_path = a.out_dir.join("stats.csv");
            result.write_json(&json_path)?;
            result.write_stats_csv(&csv_path)?;
            for cell in &result.cells {
                emit_line(&format!(
                    "{} test, epsilon={}: rejection rate {:.4} (se {:.4}, {} failures / {} reps)",
                    cell.test.label(),
                    cell.epsilon,
                    cell.rejection_rate,
                    cell.se,
                    cell.failures,
                    cell.replications
                ));
            }
            if let Some(diag) = &result.power_diagnostics {
                emit_line(&format!(
                    "closest family member theta*={:?}, separation={:.6e}, shift norm^2={:.6e}",
                    diag.theta_star, diag.separation, diag.shift_norm_sq
                ));
            }
            emit_line(&format!("wrote {} and {}", json_path.display(), csv_path.display()));
        }
        ExperimentKind::Check => {
            let cells = run_distribution_check(&cfg)?;
            let path = a.out_dir.join("check.json");
            let text = serde_json::to_string_pretty(&cells)
                .map_err(|e| Error::Config(format!("serializing output: {e}")))?;
            std::fs::write(&path, text)?;
            for cell in &cells {
                emit_line(&format!(
                    "{} test, epsilon={}: KS distance {:.4} ({} stats vs {} reference draws)",
                    cell.test.label(),
                    cell.epsilon,
                    cell.ks_distance,
                    cell.n_stats,
                    cell.n_reference
                ));
            }
            emit_line(&format!("wrote {}", path.display()));
        }
    }
    Ok(())
}
