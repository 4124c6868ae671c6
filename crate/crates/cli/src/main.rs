//! `goalqvi` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O failure while writing, 2 configuration or
//! input error, 3 solver non-convergence, 4 failed bound or Monte Carlo check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use goalqvi::bounds::{check_bounds, SubsolutionParams, DEFAULT_LAMBDA, DEFAULT_Q};
use goalqvi::frictionless::{pi_grid, solve_frictionless, v_shape_profile, WealthGrid, DEFAULT_PI_POINTS};
use goalqvi::policy::{classify_level, target_points, Policy};
use goalqvi::simulator::{compare_to_value, simulate, trace_path, write_trace_csv, SimConfig};
use goalqvi::store::{load_run, output_file, save_run, verify_run};
use goalqvi::{solve, Error, PortfolioState, RunConfig, SolveResult};

#[derive(Parser)]
#[command(name = "goalqvi", version, about = "Goal-based portfolio selection with fixed transaction costs")]
struct Cli {
    /// Worker threads for solver and simulator (default: all cores).
    #[arg(long, global = true, env = "GOALQVI_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the QVI system and write surfaces, policies and a manifest.
    Solve {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Write trading-region and target-point CSVs for stored times.
    Regions(TimesArgs),
    /// Replay the policy by Monte Carlo and compare with the PDE value.
    Simulate(SimArgs),
    /// Check the solved surfaces against the analytic bounds.
    Bounds {
        run: PathBuf,
        #[arg(long, default_value_t = DEFAULT_Q)]
        q: f64,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        a: u8,
    },
    /// Solve the frictionless one-dimensional baseline.
    Frictionless {
        config: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PI_POINTS)]
        pi_points: usize,
        /// Times for the stock-proportion profiles.
        #[arg(long, num_args = 1.., default_values_t = [0.0, 0.5, 0.9])]
        profiles: Vec<f64>,
    },
    /// Export value slices at stored times and the funding rules.
    Export(TimesArgs),
}

#[derive(Args)]
struct TimesArgs {
    run: PathBuf,
    /// Stored times; defaults to t = 0 and every deadline.
    #[arg(long = "t", num_args = 0..)]
    times: Vec<f64>,
    /// Output directory (default: the run directory).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    run: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    x0: f64,
    #[arg(long, allow_negative_numbers = true)]
    x1: f64,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "dt-sim")]
    dt_sim: Option<f64>,
    /// Start time of the simulation.
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    /// Exit with code 4 when the comparison fails.
    #[arg(long = "assert")]
    assert_pass: bool,
    /// Write the events of path 0 to this CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Result JSON (default: `<run>/sim_<x0>_<x1>.json`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence { .. } | Error::PenaltyNonConvergence { .. } => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn write_out(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| fail(1, format!("{}: {e}", p.display())))?;
    }
    fs::write(path, bytes).map_err(|e| fail(1, format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> goalqvi::Result<()>) -> Result<(), Failure> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_out(path, buf)
}

fn json_line(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn load(run: &Path) -> Result<(RunConfig, SolveResult), Failure> {
    if !run.is_dir() {
        return Err(fail(2, format!("run directory {} not found", run.display())));
    }
    Ok(load_run(run)?)
}

/// Stored times requested on the command line; defaults to 0 and the deadlines.
fn resolve_times(result: &SolveResult, times: &[f64]) -> Result<Vec<(f64, usize, usize)>, Failure> {
    let times: Vec<f64> = if times.is_empty() {
        std::iter::once(0.0).chain(result.config.schedule.goals().iter().map(|g| g.deadline)).collect()
    } else {
        times.to_vec()
    };
    times
        .into_iter()
        .map(|t| {
            let (k, level) = result.locate(t).ok_or(Error::UnknownTimeLevel { t })?;
            Ok((t, k, level))
        })
        .collect()
}

fn cmd_solve(config: &Path, out: &Path) -> Result<(), Failure> {
    let run = RunConfig::load(config)?;
    let cfg = run.solver_config()?;
    let start = Instant::now();
    let result = solve(&cfg)?;
    let elapsed = start.elapsed();
    let m = save_run(out, &run, &result).map_err(|e| fail(1, e.to_string()))?;
    println!(
        "solved {} levels in {:.2}s; max residual {:.3e}; {} files written to {}",
        m.levels,
        elapsed.as_secs_f64(),
        result.diagnostics.max_residual(),
        m.files.len() + 1,
        out.display()
    );
    Ok(())
}

fn cmd_regions(args: &TimesArgs) -> Result<(), Failure> {
    let (_, result) = load(&args.run)?;
    let dir = args.out.clone().unwrap_or_else(|| args.run.clone());
    for (t, k, level) in resolve_times(&result, &args.times)? {
        let map = classify_level(&result, k, level);
        write_csv(&dir.join(format!("regions_t{t}.csv")), |w| map.write_csv(w))?;
        let pts = target_points(&map);
        write_csv(&dir.join(format!("targets_t{t}.csv")), |w| {
            use std::io::Write;
            writeln!(w, "x0,x1")?;
            for p in &pts {
                writeln!(w, "{},{}", p.x0, p.x1)?;
            }
            Ok(())
        })?;
        println!("t={t}: {} trading nodes, {} targets", map.deltas.iter().flatten().count(), pts.len());
    }
    Ok(())
}

fn cmd_simulate(args: &SimArgs) -> Result<(), Failure> {
    let x = PortfolioState::try_new(args.x0, args.x1)?;
    let (run, result) = load(&args.run)?;
    let cfg = SimConfig {
        n_paths: args.paths.unwrap_or(run.sim.paths),
        dt_sim: args.dt_sim.unwrap_or(run.sim.dt),
        seed: args.seed.unwrap_or(run.sim.seed),
        initial: x,
        start_time: args.t0,
        never_trade: false,
    };
    let policy = Policy::new(&result);
    let start = Instant::now();
    let sim = simulate(&policy, &cfg)?;
    let elapsed = start.elapsed();
    let pde = result.value(args.t0, x)?;
    let cmp = compare_to_value(&sim, pde);
    if let Some(path) = &args.trace {
        let tr = trace_path(&policy, &cfg, 0)?;
        write_csv(path, |w| write_trace_csv(w, &tr))?;
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.join(format!("sim_{}_{}.json", args.x0, args.x1)));
    write_out(&out, json_line(&serde_json::json!({ "config": cfg, "result": sim, "comparison": cmp })))?;
    println!(
        "mean {:.6} +- {:.6} vs PDE {:.6}: gap {:.2e} ({}) in {:.1}s",
        sim.mean_objective,
        sim.std_error,
        pde,
        cmp.gap,
        if cmp.passed { "pass" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    if args.assert_pass && !cmp.passed {
        return Err(fail(4, "Monte Carlo mean outside tolerance"));
    }
    Ok(())
}

fn cmd_bounds(run_dir: &Path, a: u8, q: f64, lambda: f64) -> Result<(), Failure> {
    let (_, result) = load(run_dir)?;
    let changed = verify_run(run_dir)?;
    if !changed.is_empty() {
        eprintln!("warning: {} file(s) differ from the manifest, first: {}", changed.len(), changed[0]);
    }
    let p = SubsolutionParams::new(a, q, lambda, &result.config.market, &result.config.schedule)?;
    let report = check_bounds(&result, &p);
    write_out(&run_dir.join("bounds.json"), json_line(&report.to_json()))?;
    let (i, j, k, t) = report.worst_node;
    println!(
        "bounds {}: worst gap {:.3e} at node ({i},{j}) k={k} t={t}; range violations {}; corner error {:.1e}",
        if report.passed { "pass" } else { "FAIL" },
        report.worst_gap,
        report.range_violations,
        report.corner_error
    );
    if report.passed {
        Ok(())
    } else {
        Err(fail(4, "bound check failed"))
    }
}

fn cmd_frictionless(config: &Path, out: &Path, pi_points: usize, profiles: &[f64]) -> Result<(), Failure> {
    let run = RunConfig::load(config)?;
    let cfg = run.solver_config()?;
    let grid = WealthGrid::new(cfg.grid.w_max, cfg.grid.n)?;
    let res = solve_frictionless(&cfg.market, &cfg.schedule, grid, &pi_grid(pi_points)?, cfg.dt)?;
    for s in &res.segmentation.segments {
        for level in 0..=s.steps {
            write_csv(&out.join(format!("k{}/level_{level:04}.csv", s.k)), |w| res.write_level_csv(w, s.k, level))?;
        }
        write_csv(&out.join(format!("funding_T{}.csv", s.k)), |w| res.write_funding_csv(w, s.k))?;
    }
    for &t in profiles {
        let prof = v_shape_profile(&res, t)?;
        write_csv(&out.join(format!("vshape_t{t}.csv")), |w| {
            use std::io::Write;
            writeln!(w, "w,pi_star")?;
            for (wealth, pi) in &prof {
                writeln!(w, "{wealth},{pi}")?;
            }
            Ok(())
        })?;
    }
    println!("frictionless baseline written to {}", out.display());
    Ok(())
}

fn cmd_export(args: &TimesArgs) -> Result<(), Failure> {
    let (_, result) = load(&args.run)?;
    let dir = args.out.clone().unwrap_or_else(|| args.run.join("export"));
    let grid = *result.grid();
    for (t, k, level) in resolve_times(&result, &args.times)? {
        write_csv(&dir.join(format!("value_t{t}.csv")), |w| goalqvi::grid::write_slice_csv(w, &grid, result.slice(k, level)))?;
    }
    for k in 1..result.config.schedule.len() {
        let src = args.run.join(goalqvi::store::funding_path(k));
        let dst = output_file(&dir, &format!("funding_T{k}.csv"))?;
        fs::copy(&src, &dst).map_err(|e| fail(1, format!("{}: {e}", src.display())))?;
    }
    println!("exported to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(fail(2, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| fail(2, e.to_string()))?;
    }
    match &cli.command {
        Command::Solve { config, out } => cmd_solve(config, out),
        Command::Regions(a) => cmd_regions(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bounds { run, q, lambda, a } => cmd_bounds(run, *a, *q, *lambda),
        Command::Frictionless { config, out, pi_points, profiles } => cmd_frictionless(config, out, *pi_points, profiles),
        Command::Export(a) => cmd_export(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
