//! The `mfe` command-line tool.
//!
//! `solve` writes an equilibrium directory, `verify` runs the spike suite on
//! one, and `simulate` compares it with an N-player simulation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::chain::{FlowCurve, ProbabilityVector, StrategyTable, TimeGrid};
use crate::error::MfeError;
use crate::hj::policy_values;
use crate::mfe::{estimate_constants, picard_solve, ContractionReport, Diagnostics, Equilibrium, SolverOptions};
use crate::scenario::{ModelFile, Scenario};
use crate::sim::{deviation_test, replicated_errors, simulate, SimConfig, Spike};
use crate::verify::{verify_local_optimality, SpikeEntry};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_VIOLATIONS: i32 = 3;
/// `simulate` exit code when the error bound is missed.
pub const EXIT_SIM_BOUND: i32 = 4;

const CONTRACTION_STEPS: usize = 100;
const CONTRACTION_SAMPLES: usize = 16;
const CONTRACTION_SEED: u64 = 0x6d66_6531;
const WORST_SPIKE_SEPARATION: f64 = 0.25;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] MfeError),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mfe", version, about = "Time-inconsistent mean-field equilibria of finite-state chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an equilibrium and write it to a directory.
    Solve(SolveArgs),
    /// Run the spike test on a solved equilibrium.
    Verify(VerifyArgs),
    /// Simulate N players following the equilibrium policy.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Number of grid cells.
    #[arg(long)]
    pub grid: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub relax: f64,
    /// Comma-separated initial law; defaults to the model's `initial` or uniform.
    #[arg(long)]
    pub init_rho: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub eq: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub action_samples: usize,
    /// A number, or `auto` for five grid steps.
    #[arg(long, default_value = "auto")]
    pub tol_spike: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub eq: PathBuf,
    #[arg(long)]
    pub players: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub err_bound: f64,
    /// Coupled sample paths per replication for the deviation test.
    #[arg(long, default_value_t = 200)]
    pub paths: usize,
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRecord {
    horizon: f64,
    steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptionsRecord {
    tolerance: f64,
    max_iterations: usize,
    relaxation: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EquilibriumRecord {
    format: String,
    model_hash: String,
    model: ModelFile,
    grid: GridRecord,
    initial: Vec<f64>,
    options: OptionsRecord,
    converged: bool,
    policy: Vec<Vec<f64>>,
    diagnostics: Diagnostics,
    contraction: ContractionReport,
}

const EQ_FORMAT: &str = "mfe-equilibrium/1";

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_table(header: &str, m: usize, rows: impl Iterator<Item = (f64, Vec<f64>)>) -> String {
    let mut s = String::from("t");
    for j in 1..=m {
        let _ = write!(s, ",{header}_{j}");
    }
    s.push('\n');
    for (t, row) in rows {
        s.push_str(&fmt_float(t));
        for x in row {
            s.push(',');
            s.push_str(&fmt_float(x));
        }
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("records serialize");
    s.push('\n');
    s
}

fn parse_probs(text: &str, m: usize) -> CliResult<ProbabilityVector> {
    let w: Vec<f64> = text
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Input(format!("--init-rho: `{}`: {e}", x.trim())))
        })
        .collect::<CliResult<_>>()?;
    if w.len() != m {
        return Err(CliError::Input(format!(
            "--init-rho has {} entries, the model has {m} states",
            w.len()
        )));
    }
    ProbabilityVector::new(w).map_err(|e| CliError::Input(format!("--init-rho: {e}")))
}

pub fn cmd_solve(args: &SolveArgs) -> CliResult<i32> {
    let scenario = Scenario::load(&args.model)?;
    let m = scenario.states();
    let grid = TimeGrid::new(scenario.horizon(), args.grid)
        .map_err(|e| CliError::Input(format!("--grid: {e}")))?;
    let rho = match &args.init_rho {
        Some(text) => parse_probs(text, m)?,
        None => scenario.initial(),
    };
    let opts = SolverOptions {
        tolerance: args.tol,
        max_iterations: args.max_iter,
        relaxation: args.relax,
        ..SolverOptions::default()
    };
    let eq = picard_solve(scenario.gen(), &scenario.cost, &rho, &grid, &opts)?;
    let coarse = TimeGrid::new(scenario.horizon(), args.grid.min(CONTRACTION_STEPS))?;
    let contraction = estimate_constants(
        scenario.gen(),
        &scenario.cost,
        &coarse,
        CONTRACTION_SAMPLES,
        CONTRACTION_SEED,
    )?;
    let converged = eq.diagnostics.converged();
    tracing::info!(
        iterations = eq.diagnostics.iterations,
        converged,
        product = contraction.product,
        "solve finished"
    );

    std::fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let record = EquilibriumRecord {
        format: EQ_FORMAT.into(),
        model_hash: scenario.hash.clone(),
        model: scenario.file.clone(),
        grid: GridRecord {
            horizon: grid.horizon(),
            steps: grid.steps(),
        },
        initial: rho.as_slice().to_vec(),
        options: OptionsRecord {
            tolerance: opts.tolerance,
            max_iterations: opts.max_iterations,
            relaxation: opts.relaxation,
        },
        converged,
        policy: eq.policy.rows().map(|r| r.to_vec()).collect(),
        diagnostics: eq.diagnostics.clone(),
        contraction,
    };
    write_file(&args.out.join("equilibrium.json"), &to_json(&record))?;
    write_artifacts(&args.out, &eq)?;
    if !converged {
        eprintln!(
            "warning: no convergence after {} iterations (status {:?}); artifacts are flagged",
            eq.diagnostics.iterations, eq.diagnostics.status
        );
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

fn write_artifacts(dir: &Path, eq: &Equilibrium) -> CliResult<()> {
    let grid = eq.grid;
    let m = eq.initial.len();
    let flow = csv_table(
        "nu",
        m,
        (0..=grid.steps()).map(|k| (grid.node(k), eq.flow.at(k).as_slice().to_vec())),
    );
    write_file(&dir.join("flow.csv"), &flow)?;
    let policy = csv_table(
        "pi",
        m,
        (0..grid.steps()).map(|k| (grid.node(k), eq.policy.row(k).to_vec())),
    );
    write_file(&dir.join("policy.csv"), &policy)?;
    let theta = csv_table(
        "theta",
        m,
        (0..=grid.steps()).map(|k| (grid.node(k), eq.values.diagonal(k))),
    );
    write_file(&dir.join("theta_diag.csv"), &theta)
}

fn read_csv(path: &Path, m: usize, expected_rows: usize) -> CliResult<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Input(format!("{}: empty file", path.display())))?;
    if header.split(',').count() != m + 1 {
        return Err(CliError::Input(format!(
            "{}: header has {} columns, expected {}",
            path.display(),
            header.split(',').count(),
            m + 1
        )));
    }
    let rows: Vec<Vec<f64>> = lines
        .enumerate()
        .map(|(n, line)| {
            let cells: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CliError::Input(format!("{}: line {}: {e}", path.display(), n + 2)))?;
            if cells.len() != m {
                return Err(CliError::Input(format!(
                    "{}: line {}: expected {m} values",
                    path.display(),
                    n + 2
                )));
            }
            Ok(cells)
        })
        .collect::<CliResult<_>>()?;
    if rows.len() != expected_rows {
        return Err(CliError::Input(format!(
            "{}: {} data rows, expected {expected_rows}",
            path.display(),
            rows.len()
        )));
    }
    Ok(rows)
}

/// An equilibrium directory read back from disk.
struct LoadedEquilibrium {
    scenario: Scenario,
    eq: Equilibrium,
}

fn load_equilibrium(dir: &Path) -> CliResult<LoadedEquilibrium> {
    if !dir.is_dir() {
        return Err(CliError::Input(format!("{}: not a directory", dir.display())));
    }
    let path = dir.join("equilibrium.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let record: EquilibriumRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if record.format != EQ_FORMAT {
        return Err(CliError::Input(format!(
            "{}: unknown format `{}`",
            path.display(),
            record.format
        )));
    }
    let scenario = Scenario::from_file(record.model)?;
    if scenario.hash != record.model_hash {
        return Err(CliError::Input(format!(
            "{}: model hash mismatch (recorded {}, computed {})",
            path.display(),
            record.model_hash,
            scenario.hash
        )));
    }
    let m = scenario.states();
    let grid = TimeGrid::new(record.grid.horizon, record.grid.steps)?;
    if (grid.horizon() - scenario.horizon()).abs() > 0.0 {
        return Err(CliError::Input("grid horizon differs from the model horizon".into()));
    }
    let initial = ProbabilityVector::new(record.initial)?;
    let flow_rows = read_csv(&dir.join("flow.csv"), m, grid.steps() + 1)?;
    let flow = FlowCurve::new(
        flow_rows
            .into_iter()
            .map(ProbabilityVector::new)
            .collect::<std::result::Result<_, _>>()?,
    )?;
    let policy = StrategyTable::from_rows(read_csv(&dir.join("policy.csv"), m, grid.steps())?)?;
    policy.check_admissible(scenario.gen(), &grid)?;
    let values = policy_values(scenario.gen(), &scenario.cost, &flow, &policy, &grid)?;
    let eq = Equilibrium {
        initial,
        grid,
        flow,
        policy,
        values,
        diagnostics: record.diagnostics,
    };
    Ok(LoadedEquilibrium { scenario, eq })
}

#[derive(Serialize)]
struct VerifySummary {
    model_hash: String,
    action_samples: usize,
    tolerance: f64,
    spikes: usize,
    min_gap: f64,
    violations: usize,
    worst: Option<SpikeEntry>,
    passed: bool,
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<i32> {
    let loaded = load_equilibrium(&args.eq)?;
    let tol = match args.tol_spike.as_str() {
        "auto" => None,
        s => Some(
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| CliError::Input(format!("--tol-spike: `{s}` is not `auto` or a nonnegative number")))?,
        ),
    };
    let report = verify_local_optimality(
        &loaded.eq,
        loaded.scenario.gen(),
        &loaded.scenario.cost,
        args.action_samples,
        tol,
    )?;
    let mut csv = String::from("t,state,action,gap\n");
    for e in &report.entries {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt_float(e.t),
            e.state + 1,
            fmt_float(e.action),
            fmt_float(e.gap)
        );
    }
    write_file(&args.eq.join("spike_report.csv"), &csv)?;
    let worst = report
        .entries
        .iter()
        .min_by(|a, b| a.gap.total_cmp(&b.gap))
        .cloned();
    let summary = VerifySummary {
        model_hash: loaded.scenario.hash.clone(),
        action_samples: args.action_samples,
        tolerance: report.tolerance,
        spikes: report.entries.len(),
        min_gap: report.min_gap,
        violations: report.violations.len(),
        worst,
        passed: report.passed(),
    };
    write_file(&args.eq.join("verify_summary.json"), &to_json(&summary))?;
    println!(
        "{} spikes, min gap {:.3e}, tolerance {:.3e}, {} violations",
        summary.spikes, summary.min_gap, summary.tolerance, summary.violations
    );
    Ok(if report.passed() { EXIT_OK } else { EXIT_VIOLATIONS })
}

#[derive(Serialize)]
struct DeviationRecord {
    node: usize,
    t: f64,
    state: usize,
    action: f64,
    gap: f64,
    half_width: f64,
    samples: usize,
}

#[derive(Serialize)]
struct SimReport {
    model_hash: String,
    players: usize,
    seed: u64,
    replications: usize,
    err_bound: f64,
    errors: Vec<f64>,
    max_error: f64,
    mean_error: f64,
    fraction_within_bound: f64,
    deviation: DeviationRecord,
    passed: bool,
}

/// Required share of replications within `--err-bound`.
const SIM_PASS_FRACTION: f64 = 0.95;

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<i32> {
    if args.players < 2 {
        return Err(CliError::Input(format!(
            "--players must be at least 2, got {}",
            args.players
        )));
    }
    if args.reps == 0 {
        return Err(CliError::Input("--reps must be positive".into()));
    }
    let loaded = load_equilibrium(&args.eq)?;
    let (gen, cost, eq) = (loaded.scenario.gen(), &loaded.scenario.cost, &loaded.eq);
    let grid = eq.grid;
    let m = gen.states();
    let cfg = SimConfig {
        players: args.players,
        seed: args.seed,
        replications: args.reps,
    };
    let errors = replicated_errors(gen, &eq.policy, &eq.initial, &eq.flow, &grid, &cfg)?;

    let mut csv = String::from("rep,t");
    for j in 1..=m {
        let _ = write!(csv, ",nu_{j}");
    }
    csv.push('\n');
    for r in 0..cfg.replications {
        let bundle = simulate(
            gen,
            &eq.policy,
            &eq.initial,
            &grid,
            &SimConfig {
                seed: cfg.replication_seed(r),
                ..cfg
            },
        )?;
        for k in 0..=grid.steps() {
            let _ = write!(csv, "{r},{}", fmt_float(grid.node(k)));
            for x in bundle.empirical(k).as_slice() {
                csv.push(',');
                csv.push_str(&fmt_float(*x));
            }
            csv.push('\n');
        }
    }
    write_file(&args.eq.join("empirical_flow.csv"), &csv)?;

    let probe = worst_spike(&loaded)?;
    let dev = deviation_test(eq, gen, cost, 0, probe, &cfg, args.paths.max(2))?;
    let within = errors.iter().filter(|e| **e <= args.err_bound).count() as f64 / errors.len() as f64;
    let passed = within >= SIM_PASS_FRACTION;
    let report = SimReport {
        model_hash: loaded.scenario.hash.clone(),
        players: cfg.players,
        seed: cfg.seed,
        replications: cfg.replications,
        err_bound: args.err_bound,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        mean_error: errors.iter().sum::<f64>() / errors.len() as f64,
        errors,
        fraction_within_bound: within,
        deviation: DeviationRecord {
            node: probe.node,
            t: grid.node(probe.node),
            state: probe.state + 1,
            action: probe.action,
            gap: dev.gap,
            half_width: dev.half_width,
            samples: dev.samples,
        },
        passed,
    };
    write_file(&args.eq.join("sim_report.json"), &to_json(&report))?;
    println!(
        "max sup-TV error {:.4e} over {} replications ({:.0}% within {}); deviation gap {:.4e} ± {:.2e}",
        report.max_error,
        report.replications,
        100.0 * within,
        args.err_bound,
        dev.gap,
        dev.half_width
    );
    Ok(if passed { EXIT_OK } else { EXIT_SIM_BOUND })
}

/// The verifier spike with the smallest gap among those that move the
/// action by at least [`WORST_SPIKE_SEPARATION`].
fn worst_spike(loaded: &LoadedEquilibrium) -> CliResult<Spike> {
    let report = verify_local_optimality(
        &loaded.eq,
        loaded.scenario.gen(),
        &loaded.scenario.cost,
        16,
        None,
    )?;
    let entry = crate::verify::worst_spike(&report, &loaded.eq, WORST_SPIKE_SEPARATION)
        .or_else(|| report.entries.iter().min_by(|a, b| a.gap.total_cmp(&b.gap)))
        .ok_or_else(|| CliError::Input("equilibrium has no grid cells".into()))?;
    Ok(Spike {
        node: entry.node,
        state: entry.state,
        action: entry.action,
    })
}
