use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aud_core::dist::{Family, ARRIVAL_GRAMMAR};
use aud_core::optimize::{
    bisection_optimal_arrival, default_tolerance, optimize_offset, OFFSET_MAX_ITER, OFFSET_TOL,
};
use aud_core::queue::{
    analyze, average_aud_dm1d_offset, average_aud_dm1m, DecisionProcess, SystemConfig, DECISION_GRAMMAR,
    RHO1_MAX_ITER, RHO1_START, RHO1_TOL,
};
use aud_core::report::{envelope, run_sweep, SweepSpec};
use aud_core::sim::{run_replications, run_trajectory, write_trajectory_csv, DUMP_GZIP_THRESHOLD, WARMUP_FRACTION};
use aud_core::AudError;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

const THREADS_ENV: &str = "AUDKIT_THREADS";

#[derive(Parser)]
#[command(name = "audkit", version, about = "Age-upon-Decisions analysis, optimization and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Emit the versioned JSON document instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Write the output to this file instead of standard output.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Worker threads for simulation and sweeps [default: all cores; AUDKIT_THREADS overrides].
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Include iteration traces in text output.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form AuD and missing probability for one system.
    Analyze(SystemArgs),
    /// Monte Carlo estimate of AuD and missing probability.
    Simulate(SimulateArgs),
    /// Smallest AuD attainable within an arrival family (bisection over a feasibility search).
    OptimizeArrival(OptimizeArrivalArgs),
    /// Best decision offset for periodic arrivals and decisions.
    OptimizeOffset(OptimizeOffsetArgs),
    /// Evaluate a grid described by a JSON spec file; writes CSV, or JSON with --json.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SystemArgs {
    /// Inter-arrival law: exp:rate=<r> | uniform:beta=<b> | lomax:alpha=<a>,beta=<b> | fnorm:alpha=<a>,sigma=<s> | det:period=<p>
    #[arg(long)]
    arrival: String,
    /// Service rate.
    #[arg(long)]
    mu: f64,
    /// Decision process: poisson:rate=<v> | sync:m0=<m> | offset:delta=<d>
    #[arg(long)]
    decision: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Updates per replication.
    #[arg(long, default_value_t = 1_000_000)]
    horizon: u64,
    /// Independent replications.
    #[arg(long, default_value_t = 5)]
    reps: u64,
    /// Base seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-update and per-decision trajectory of replication 0 as CSV.
    #[arg(long, value_name = "PATH")]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArrivalArgs {
    /// One of exp, uniform, lomax, fnorm, det.
    #[arg(long)]
    family: String,
    /// Service rate.
    #[arg(long)]
    mu: f64,
}

#[derive(Args)]
struct OptimizeOffsetArgs {
    /// Arrival rate of the periodic updates.
    #[arg(long)]
    lambda: f64,
    /// Service rate.
    #[arg(long)]
    mu: f64,
    /// Comma-separated offsets at which to also report the AuD curve.
    #[arg(long, value_name = "D1,D2,...", value_delimiter = ',')]
    delta_grid: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON sweep definition.
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
}

enum Failure {
    Input(String),
    Runtime(String),
}

impl From<AudError> for Failure {
    fn from(e: AudError) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome<T> = Result<T, Failure>;

/// Rendered result: the JSON document and its text view.
struct Report {
    json: Value,
    text: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Outcome<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Failure::Input(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Input("thread count must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Outcome<()> {
    configure_threads(cli.threads)?;
    if let Command::Sweep(args) = &cli.command {
        return sweep(cli, args);
    }
    let report = match &cli.command {
        Command::Analyze(args) => analyze_cmd(args)?,
        Command::Simulate(args) => simulate_cmd(args)?,
        Command::OptimizeArrival(args) => optimize_arrival_cmd(args, cli.verbose)?,
        Command::OptimizeOffset(args) => optimize_offset_cmd(args, cli.verbose)?,
        Command::Sweep(_) => unreachable!(),
    };
    let body = if cli.json {
        let mut s = serde_json::to_string_pretty(&report.json).map_err(|e| Failure::Runtime(e.to_string()))?;
        s.push('\n');
        s
    } else {
        report.text
    };
    emit(cli.out.as_deref(), body.as_bytes())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Outcome<()> {
    match out {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::Runtime(format!("cannot write to standard output: {e}")))
        }
    }
}

fn system(args: &SystemArgs) -> Outcome<SystemConfig> {
    let arrival = args.arrival.parse().map_err(|e: AudError| with_grammar(e, ARRIVAL_GRAMMAR))?;
    let decision: DecisionProcess = args
        .decision
        .parse()
        .map_err(|e: AudError| with_grammar(e, DECISION_GRAMMAR))?;
    let service = aud_core::dist::ServiceModel::new(args.mu)?;
    Ok(SystemConfig::new(arrival, service, decision)?)
}

fn with_grammar(e: AudError, grammar: &str) -> Failure {
    match e {
        AudError::Parse { .. } => Failure::Input(e.to_string()),
        other => Failure::Input(format!("{other} (accepted: {grammar})")),
    }
}

fn config_json(config: &SystemConfig) -> Outcome<Value> {
    serde_json::to_value(config).map_err(|e| Failure::Runtime(e.to_string()))
}

fn line(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key:<26}{value}");
}

fn header(out: &mut String, config: &SystemConfig) {
    line(out, "arrivals", config.arrival());
    line(out, "service", format!("exp:rate={}", config.mu()));
    line(out, "decisions", config.decision());
}

fn analyze_cmd(args: &SystemArgs) -> Outcome<Report> {
    let config = system(args)?;
    let a = analyze(&config)?;
    let formula = match config.decision() {
        DecisionProcess::Poisson { .. } => "(E[Y^2] + 2 E[T_{k-1} Y_k]) / (2 E[Y])",
        DecisionProcess::PeriodicSync { .. } => "periodic synchronous decisions, closed form",
        DecisionProcess::PeriodicOffset { .. } => "periodic offset decisions, closed form",
    };
    let mut json = envelope("analyze", &a)?;
    json["config"] = config_json(&config)?;
    json["aud_formula"] = Value::from(formula);
    json["rho1_settings"] = serde_json::json!({ "start": RHO1_START, "tol": RHO1_TOL, "max_iter": RHO1_MAX_ITER });

    let d = &a.derived;
    let mut text = String::new();
    header(&mut text, &config);
    line(&mut text, "rho", d.rho);
    line(&mut text, "rho1", d.rho1);
    for (name, v) in [("rho0", d.rho0), ("w0", d.w0), ("w1", d.w1), ("u0", d.u0), ("u1", d.u1), ("q0", d.q0)] {
        if let Some(v) = v {
            line(&mut text, name, v);
        }
    }
    line(&mut text, "q1", d.q1);
    line(&mut text, "E[T]", d.mean_system_time);
    line(&mut text, "E[Y]", d.departure.mean);
    line(&mut text, "E[Y^2]", d.departure.second);
    line(&mut text, "E[T_{k-1} Y_k]", d.departure.cross);
    line(&mut text, "mean AuD", a.mean_aud);
    line(&mut text, "AuD formula", formula);
    match a.missing_prob {
        Some(p) => line(&mut text, "missing probability", p),
        None => line(&mut text, "missing probability", "no closed form for this discipline"),
    }
    line(
        &mut text,
        "rho1 iteration",
        format!("start {RHO1_START}, tol {RHO1_TOL:e}, max {RHO1_MAX_ITER} iterations"),
    );
    Ok(Report { json, text })
}

fn simulate_cmd(args: &SimulateArgs) -> Outcome<Report> {
    let config = system(&args.system)?;
    let r = run_replications(&config, args.horizon, args.reps, args.seed)?;
    let mut dumped = None;
    if let Some(path) = &args.dump {
        let t = run_trajectory(&config, args.horizon, args.seed)?;
        let gz = write_trajectory_csv(path, &t, DUMP_GZIP_THRESHOLD)?;
        dumped = Some((path, gz));
    }
    let mut json = envelope("simulate", &r)?;
    json["warmup_fraction"] = Value::from(WARMUP_FRACTION);

    let mut text = String::new();
    header(&mut text, &config);
    line(&mut text, "mean AuD", format!("{} (se {:e})", r.mean_aud, r.aud_std_error));
    line(&mut text, "95% interval", format!("[{}, {}]", r.aud_ci95.0, r.aud_ci95.1));
    line(&mut text, "missing probability", format!("{} (se {:e})", r.p_mis_hat, r.p_mis_std_error));
    line(&mut text, "E[T]", r.mean_system_time);
    line(&mut text, "E[Y]", r.mean_y);
    line(&mut text, "E[Y^2]", r.second_moment_y);
    line(&mut text, "E[T_{k-1} Y_k]", r.cross_ty);
    line(&mut text, "busy arrivals", r.busy_arrival_fraction);
    line(&mut text, "updates counted", r.n_updates);
    line(&mut text, "decisions counted", r.n_decisions);
    line(
        &mut text,
        "warm-up discarded",
        format!(
            "{} updates, {} decisions (fraction {WARMUP_FRACTION})",
            r.warmup_discarded, r.warmup_decisions_discarded
        ),
    );
    line(&mut text, "horizon x replications", format!("{} x {}", r.horizon, r.replications));
    line(&mut text, "seed", r.seed);
    line(&mut text, "per-replication AuD", format!("{:?}", r.per_replication_aud));
    if let Some((path, gz)) = dumped {
        let how = if gz { " (gzip)" } else { "" };
        line(&mut text, "trajectory", format!("{}{how}", path.display()));
    }
    Ok(Report { json, text })
}

fn optimize_arrival_cmd(args: &OptimizeArrivalArgs, verbose: bool) -> Outcome<Report> {
    let family: Family = args.family.parse::<Family>().map_err(|e| Failure::Input(e.to_string()))?;
    let tol = default_tolerance(args.mu);
    let r = bisection_optimal_arrival(family, args.mu, tol, None, None, 200)?;
    let json = envelope("optimize-arrival", &r)?;

    let mut text = String::new();
    line(&mut text, "family", &r.family);
    line(&mut text, "mu", r.mu);
    for (name, v) in r.param_names.iter().zip(&r.kappa) {
        line(&mut text, name, v);
    }
    if family == Family::FoldedNormal {
        line(&mut text, "sigma^2", r.kappa[1] * r.kappa[1]);
    }
    line(&mut text, "c0*", r.c0_star);
    line(&mut text, "mean AuD", r.aud);
    line(&mut text, "lambda*", r.lambda_star);
    line(&mut text, "lambda*/mu", r.lambda_star / r.mu);
    line(&mut text, "converged", r.converged);
    line(&mut text, "bracket", format!("[{}, {}] width {:e}", r.lower, r.upper, r.bracket_width));
    line(&mut text, "tolerance", format!("{:e}", r.tolerance));
    line(&mut text, "outer iterations", r.outer_iterations);
    line(
        &mut text,
        "objective evaluations",
        r.inner_evaluations.iter().sum::<usize>(),
    );
    if verbose {
        line(&mut text, "evaluations per iteration", format!("{:?}", r.inner_evaluations));
    }
    Ok(Report { json, text })
}

fn optimize_offset_cmd(args: &OptimizeOffsetArgs, verbose: bool) -> Outcome<Report> {
    let r = optimize_offset(args.lambda, args.mu, OFFSET_TOL, OFFSET_MAX_ITER)?;
    let dm1m = average_aud_dm1m(args.lambda, args.mu)?;
    let curve = args
        .delta_grid
        .iter()
        .map(|&d| Ok((d, average_aud_dm1d_offset(args.lambda, args.mu, d)?)))
        .collect::<Result<Vec<_>, AudError>>()?;
    let mut json = envelope("optimize-offset", &r)?;
    json["dm1m_aud"] = Value::from(dm1m);
    json["max_iter"] = Value::from(OFFSET_MAX_ITER);
    if !curve.is_empty() {
        json["curve"] = serde_json::to_value(&curve).map_err(|e| Failure::Runtime(e.to_string()))?;
    }

    let mut text = String::new();
    line(&mut text, "lambda", r.lambda);
    line(&mut text, "mu", r.mu);
    line(&mut text, "delta*", r.delta);
    line(&mut text, "u1*", r.u1);
    line(&mut text, "phi(u1*)", format!("{:e}", r.phi));
    line(&mut text, "mean AuD", r.aud);
    line(&mut text, "D/M/1/M mean AuD", dm1m);
    line(&mut text, "rho1", r.rho1);
    line(&mut text, "iterations", format!("{} (max {OFFSET_MAX_ITER})", r.iterations));
    line(&mut text, "tolerance", format!("{:e}", r.tolerance));
    for (d, aud) in &curve {
        line(&mut text, &format!("AuD(delta={d})"), aud);
    }
    if verbose {
        for (i, (u, phi)) in r.trace.iter().enumerate() {
            let _ = writeln!(text, "  iterate {i:>5}: u1 = {u:.15}, phi = {phi:e}");
        }
    }
    Ok(Report { json, text })
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Outcome<()> {
    let raw = std::fs::read_to_string(&args.spec)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", args.spec.display())))?;
    let spec: SweepSpec = serde_json::from_str(&raw)
        .map_err(|e| Failure::Input(format!("invalid sweep spec {}: {e}", args.spec.display())))?;
    let table = run_sweep(&spec)?;
    let mut buf = Vec::new();
    if cli.json {
        table.write_json(&mut buf)?;
    } else {
        table.write_csv(&mut buf)?;
    }
    emit(cli.out.as_deref(), &buf)
}
