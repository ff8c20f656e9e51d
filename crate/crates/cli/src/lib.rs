//! `rsbench` command-line driver: validate → estimate → solve → policy →
//! simulate → report, plus `experiment` and `verify`.

pub mod config;
mod verify;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;
use sha2::{Digest, Sha256};

use rsbench_core::analytics::{compare_strategies, format_table, performance_report, table_csv, PerfReport};
use rsbench_core::estimate::EstimationReport;
use rsbench_core::linalg::{max_abs, min_eigenvalue};
use rsbench_core::policy::{fractional_kelly, Route};
use rsbench_core::simulate::{
    factorization_errors, kl_estimate, martingale_check, mc_criterion, simulate_paths, Density, Measure, SimConfig,
    Strategy,
};
use rsbench_core::valuefn::max_riccati_residual;
use rsbench_core::{solve_value_coefficients, value_function, Error, ValidatedModel, ValueCoefficients};

use crate::config::RunConfig;

/// KN and FEED metric columns must agree to this.
pub const EQUIVALENCE_TOL: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "rsbench", version, about = "Benchmarked risk-sensitive portfolio toolkit")]
pub struct Cli {
    /// Run configuration (JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides the config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for simulation and probing
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the model (or estimation inputs) and print its dimensions
    Validate,
    /// Fit a model from the configured return panel
    Estimate,
    /// Solve for the value-function coefficients and check residuals
    Solve,
    /// Optimal allocation and its decomposition at one (t, x)
    Policy {
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// Comma-separated factor values; defaults to x0
        #[arg(long)]
        x: Option<String>,
    },
    /// Simulate paths with the configured strategy and measure
    Simulate(SimulateArgs),
    /// Performance table from return CSVs written by `simulate`
    Report {
        /// NAME=PATH of a returns CSV; repeatable. Defaults to <out>/returns.csv.
        #[arg(long = "input")]
        inputs: Vec<String>,
    },
    /// Benchmark, optimal (both routes) and Kelly on shared seeds
    Experiment,
    /// Run the invariant suite and print a pass/fail matrix
    Verify {
        /// Deliberately corrupt an artifact to exercise the failure paths
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

/// Overrides of the config's simulation section.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Years per step
    #[arg(long)]
    pub dt: Option<f64>,
    /// physical, tilted_gamma or tilted_h
    #[arg(long)]
    pub measure: Option<String>,
    /// optimal, optimal_kn, kelly, kelly_x2 or benchmark
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub antithetic: bool,
    /// Also write the full-path binary dump
    #[arg(long)]
    pub record_paths: bool,
}

impl SimulateArgs {
    fn apply(&self, s: &mut config::SimulationSection) {
        if let Some(p) = self.paths {
            s.paths = p;
        }
        if self.steps.is_some() {
            s.steps = self.steps;
        }
        if let Some(dt) = self.dt {
            s.dt = dt;
        }
        if let Some(m) = &self.measure {
            s.measure = m.clone();
        }
        if let Some(st) = &self.strategy {
            s.strategy = st.clone();
        }
        s.antithetic |= self.antithetic;
        s.record_paths |= self.record_paths;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Perturb one off-diagonal entry of every stored Q
    CorruptQ,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("Riccati residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    Residual { residual: f64, tolerance: f64 },
    #[error("failed checks: {}", failed.join(", "))]
    Verification { failed: Vec<String> },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Residual { .. } => "ResidualFailure",
            CliError::Verification { .. } => "VerificationFailure",
            CliError::Usage(_) => "UsageError",
        }
    }

    /// 2 for failed numerical checks, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::EigenvalueViolation { .. } | Error::EquivalenceFailure { .. }) => 2,
            CliError::Residual { .. } | CliError::Verification { .. } => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parse arguments, run, print errors as `ERROR <code>: message`; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ERROR {}: {e}", e.code());
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| dispatch(cli))
}

struct Ctx {
    cfg: Option<RunConfig>,
    out: PathBuf,
}

impl Ctx {
    fn cfg(&self) -> CliResult<&RunConfig> {
        self.cfg
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --config <path>".into()))
    }

    fn write(&self, name: &str, content: &[u8]) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, content).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &serde_json::Value) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    if let (Some(c), Some(seed)) = (cfg.as_mut(), cli.seed) {
        c.seed = seed;
    }
    if let (Some(c), Command::Simulate(args)) = (cfg.as_mut(), &cli.command) {
        args.apply(&mut c.simulation);
    }
    let out = match (&cli.out, &cfg) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c
            .output
            .as_ref()
            .map(|o| c.resolve(o))
            .unwrap_or_else(|| c.resolve(Path::new("rsbench-out"))),
        (None, None) => PathBuf::from("rsbench-out"),
    };
    let ctx = Ctx { cfg, out };
    let result = match &cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::Estimate => cmd_estimate(&ctx),
        Command::Solve => cmd_solve(&ctx),
        Command::Policy { t, x } => cmd_policy(&ctx, *t, x.as_deref()),
        Command::Simulate(_) => cmd_simulate(&ctx),
        Command::Report { inputs } => cmd_report(&ctx, inputs),
        Command::Experiment => cmd_experiment(&ctx),
        Command::Verify { inject_fault } => verify::cmd_verify(&ctx, *inject_fault),
    };
    // failed checks still leave their artifacts listed
    if ctx.out.exists() {
        write_manifest(&ctx.out)?;
    }
    result
}

/// manifest.json: SHA-256 and size of every other file under `out`, sorted by path.
pub fn write_manifest(out: &Path) -> CliResult<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.sort();
    let entries: Vec<serde_json::Value> = files
        .iter()
        .filter(|rel| rel.as_str() != "manifest.json")
        .map(|rel| {
            let path = out.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
            Ok(json!({
                "path": rel,
                "sha256": hex::encode(Sha256::digest(&bytes)),
                "bytes": bytes.len(),
            }))
        })
        .collect::<CliResult<_>>()?;
    let mut text = serde_json::to_string_pretty(&json!({ "files": entries })).map_err(Error::from)?;
    text.push('\n');
    let path = out.join("manifest.json");
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn collect_files(root: &Path, dir: &Path, files: &mut Vec<String>) -> CliResult<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, files)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            files.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn vec_json(v: &DVector<f64>) -> serde_json::Value {
    json!(v.iter().copied().collect::<Vec<_>>())
}

fn cmd_validate(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let model = cfg.model()?;
    let segments: Vec<serde_json::Value> = (0..model.segments().len())
        .map(|k| {
            let gb = model.segment_blocks(k);
            json!({
                "start": model.segments()[k].start,
                "end": model.segment_end(k),
                "asset_covariance_min_eigenvalue": min_eigenvalue(&gb.ss),
            })
        })
        .collect();
    ctx.write_json(
        "validation.json",
        &json!({
            "n": model.n(), "m": model.m(), "d": model.d(),
            "theta": model.theta(), "horizon_years": model.horizon(),
            "x0": vec_json(model.x0()),
            "segments": segments,
            "kelly_mode": model.theta() == 0.0,
        }),
    )?;
    println!(
        "OK model n={} m={} d={} theta={} horizon={} segments={}",
        model.n(),
        model.m(),
        model.d(),
        model.theta(),
        model.horizon(),
        model.segments().len()
    );
    Ok(())
}

fn cmd_estimate(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let report: EstimationReport = cfg
        .estimation_report()?
        .ok_or_else(|| CliError::Usage("estimate needs an \"estimation\" block in the config".into()))?;
    ctx.write("estimation_report.json", (report.to_json_string() + "\n").as_bytes())?;
    ctx.write("model.json", (report.spec.to_json_string() + "\n").as_bytes())?;
    println!(
        "estimated m={} n={} from {} observations (regressor condition {:.3e})",
        report.spec.m, report.spec.n, report.observations, report.regressor_condition
    );
    Ok(())
}

fn residual_scale(vc: &ValueCoefficients) -> f64 {
    max_abs(&vc.q_mat[0])
        .max(vc.q_vec[0].amax())
        .max(vc.k[0].abs())
        .max(1.0)
}

fn solve(cfg: &RunConfig, model: &ValidatedModel) -> CliResult<ValueCoefficients> {
    Ok(solve_value_coefficients(model, cfg.solver.steps_per_year)?)
}

fn cmd_solve(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let model = cfg.model()?;
    let vc = solve(cfg, &model)?;
    ctx.write("value_coefficients.json", (vc.dump_json() + "\n").as_bytes())?;
    let res = max_riccati_residual(&vc, &model)?;
    let tolerance = cfg.solver.residual_tolerance * residual_scale(&vc);
    let passed = res.max() <= tolerance;
    ctx.write_json(
        "residual_summary.json",
        &json!({
            "max_residual": res.max(),
            "at_time": res.time,
            "q_mat": res.q_mat, "q_vec": res.q_vec, "k": res.k,
            "tolerance": tolerance,
            "min_eigenvalue": vc.meta.min_eigenvalue,
            "max_asymmetry": vc.meta.max_asymmetry,
            "grid_points": vc.grid.len(),
            "passed": passed,
        }),
    )?;
    let u0 = value_function(&vc, 0.0, model.x0())?;
    println!(
        "solved {} nodes; u(0,x0) = {:.10}; max residual {:.3e} (tolerance {:.3e})",
        vc.grid.len(),
        u0.u,
        res.max(),
        tolerance
    );
    if passed {
        Ok(())
    } else {
        Err(CliError::Residual {
            residual: res.max(),
            tolerance,
        })
    }
}

fn parse_x(text: &str, n: usize) -> CliResult<DVector<f64>> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--x: {e}")))?;
    if vals.len() != n {
        return Err(Error::DimensionMismatch {
            what: "--x".into(),
            expected: n.to_string(),
            got: vals.len().to_string(),
        }
        .into());
    }
    Ok(DVector::from_vec(vals))
}

fn cmd_policy(ctx: &Ctx, t: f64, x: Option<&str>) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let model = cfg.model()?;
    let vc = solve(cfg, &model)?;
    let x = match x {
        Some(s) => parse_x(s, model.n())?,
        None => model.x0().clone(),
    };
    let action = fractional_kelly(&model, &vc, t, &x)?;
    let value = value_function(&vc, t, &x)?;
    let doc = json!({
        "t": t,
        "x": vec_json(&x),
        "u": value.u,
        "action": action,
    });
    ctx.write_json("policy.json", &doc)?;
    println!("{}", serde_json::to_string_pretty(&doc).map_err(Error::from)?);
    Ok(())
}

fn cmd_simulate(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let model = cfg.model()?;
    let vc = solve(cfg, &model)?;
    let sim = cfg.sim_config(&model)?;
    let bundle = simulate_paths(&model, &vc, &sim)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| io_err(&ctx.out, e))?;
    bundle.write_terminal_csv(ctx.out.join("terminal.csv"))?;
    bundle.write_returns_csv(ctx.out.join("returns.csv"))?;
    if sim.record_paths {
        bundle.write_path_dump(ctx.out.join("paths.bin"))?;
    }
    let theta = model.theta();
    let u0 = value_function(&vc, 0.0, model.x0())?.u;
    let mut summary = json!({
        "measure": bundle.measure.name(),
        "strategy": bundle.strategy,
        "paths": bundle.n_paths,
        "steps": bundle.steps,
        "dt": bundle.dt,
        "seed": bundle.seed,
        "antithetic": bundle.antithetic,
        "value_u0": u0,
    });
    match bundle.measure {
        Measure::Physical => {
            let crit = mc_criterion(&bundle, theta)?;
            let (mg, mg_se) = martingale_check(&bundle, Density::Gamma)?;
            let (mh, mh_se) = martingale_check(&bundle, Density::H)?;
            let (fact, route) = factorization_errors(&bundle);
            summary["criterion"] = json!(crit);
            summary["martingale_gamma"] = json!({"mean": mg, "se": mg_se});
            summary["martingale_h"] = json!({"mean": mh, "se": mh_se});
            summary["factorization_error"] = json!(fact);
            summary["measure_equality_error"] = json!(route);
            println!(
                "simulated {} paths: ln E[exp(-theta R)] = {:.6} ± {:.6}, u(0,x0) = {:.6}",
                bundle.n_paths, crit.log_estimate, crit.log_std_error, u0
            );
        }
        Measure::TiltedGamma => {
            let kl = kl_estimate(&bundle)?;
            summary["kl"] = json!(kl);
            println!(
                "simulated {} paths under the tilted measure: KL {:.6} ± {:.6} vs {:.6} ± {:.6}",
                bundle.n_paths, kl.from_logchi, kl.from_logchi_se, kl.from_gamma_norm, kl.from_gamma_norm_se
            );
        }
        Measure::TiltedH => {
            println!("simulated {} paths under the change-of-measure tilt", bundle.n_paths);
        }
    }
    ctx.write_json("simulation.json", &summary)?;
    Ok(())
}

/// Strategy and benchmark log returns from a `simulate` returns CSV.
fn read_returns(path: &Path) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = reader.headers().map_err(Error::from)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Core(Error::Schema(format!("{}: no '{name}' column", path.display()))))
    };
    let (lv, ll) = (col("log_return")?, col("benchmark_log_return")?);
    let mut v = Vec::new();
    let mut l = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(Error::from)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |i: usize| -> CliResult<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                CliError::Core(Error::Parse {
                    line,
                    message: format!("bad number in column {}", &headers[i]),
                })
            })
        };
        v.push(num(lv)?);
        l.push(num(ll)?);
    }
    Ok((v, l))
}

fn emit_table(ctx: &Ctx, stem: &str, reports: &[(String, PerfReport)]) -> CliResult<String> {
    let text = format_table(reports);
    ctx.write(&format!("{stem}.txt"), text.as_bytes())?;
    ctx.write(&format!("{stem}.csv"), table_csv(reports)?.as_bytes())?;
    for (name, r) in reports {
        if r.degenerate() {
            eprintln!("WARNING {name}: zero dispersion or tail loss, some ratios are undefined");
        }
    }
    Ok(text)
}

fn cmd_report(ctx: &Ctx, inputs: &[String]) -> CliResult<()> {
    let conventions = ctx.cfg.as_ref().map(|c| c.metrics).unwrap_or_default();
    let mut reports = Vec::new();
    if inputs.is_empty() {
        let (v, l) = read_returns(&ctx.out.join("returns.csv"))?;
        reports.push(("Benchmark".to_string(), performance_report(&l, &conventions)?));
        reports.push(("Strategy".to_string(), performance_report(&v, &conventions)?));
    } else {
        for spec in inputs {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--input expects NAME=PATH, got '{spec}'")))?;
            let (v, _) = read_returns(Path::new(path))?;
            reports.push((name.to_string(), performance_report(&v, &conventions)?));
        }
    }
    let text = emit_table(ctx, "report_table", &reports)?;
    print!("{text}");
    Ok(())
}

fn cmd_experiment(ctx: &Ctx) -> CliResult<()> {
    let cfg = ctx.cfg()?;
    let model = cfg.model()?;
    let vc = solve(cfg, &model)?;
    let base = SimConfig {
        measure: Measure::Physical,
        densities: false,
        record_paths: false,
        record_returns: true,
        ..cfg.sim_config(&model)?
    };
    if base.n_paths < 2 {
        eprintln!("WARNING a single path: the statistics describe one trajectory");
    }
    let conv = cfg.metrics;
    let theta = model.theta();
    let run = |strategy: Strategy| -> CliResult<(Vec<f64>, Vec<f64>, serde_json::Value)> {
        let b = simulate_paths(
            &model,
            &vc,
            &SimConfig {
                strategy,
                ..base.clone()
            },
        )?;
        let crit = mc_criterion(&b, theta)?;
        Ok((
            b.log_v_returns.expect("recorded"),
            b.log_l_returns.expect("recorded"),
            json!(crit),
        ))
    };
    let (feed_v, bench_l, feed_c) = run(Strategy::Optimal(Route::Feed))?;
    let bench = performance_report(&bench_l, &conv)?;
    drop(bench_l);
    let feed = performance_report(&feed_v, &conv)?;
    let (kn_v, _, kn_c) = run(Strategy::Optimal(Route::Kn))?;
    let kn = performance_report(&kn_v, &conv)?;
    let identical_paths = kn_v == feed_v;
    drop((feed_v, kn_v));
    let (kelly_v, _, kelly_c) = run(Strategy::Kelly)?;
    let kelly = performance_report(&kelly_v, &conv)?;
    drop(kelly_v);

    let reports = vec![
        ("Benchmark".to_string(), bench),
        ("Portfolio (KN)".to_string(), kn),
        ("Portfolio (FEED)".to_string(), feed),
        ("Kelly".to_string(), kelly),
    ];
    let verdict = compare_strategies(&reports, EQUIVALENCE_TOL);
    let pair = verdict
        .pair("Portfolio (KN)", "Portfolio (FEED)")
        .expect("both columns present");
    let text = emit_table(ctx, "experiment_table", &reports)?;
    ctx.write_json(
        "experiment.json",
        &json!({
            "theta": theta,
            "paths": base.n_paths,
            "steps": base.steps,
            "dt": base.dt,
            "seed": base.seed,
            "antithetic": base.antithetic,
            "value_u0": value_function(&vc, 0.0, model.x0())?.u,
            "reports": reports.iter().map(|(n, r)| json!({"name": n, "report": r})).collect::<Vec<_>>(),
            "criterion": {"kn": kn_c, "feed": feed_c, "kelly": kelly_c},
            "kn_feed_max_diff": pair.max_diff,
            "kn_feed_identical_returns": identical_paths,
            "comparison": verdict,
        }),
    )?;
    print!("{text}");
    if !pair.within_tolerance {
        let (metric, diff) =
            pair.diffs.iter().cloned().fold(
                (String::from("sample_count"), 0.0),
                |acc, d| if d.1 > acc.1 { d } else { acc },
            );
        return Err(Error::EquivalenceFailure { metric, diff }.into());
    }
    println!("KN and FEED columns agree (max difference {:.3e})", pair.max_diff);
    let _ = std::io::stdout().flush();
    Ok(())
}
