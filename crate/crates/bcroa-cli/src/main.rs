//! Command-line front end for the region-of-attraction pipeline.
//!
//! Subcommands map onto the library stages: `approx` polynomializes a
//! system's known non-polynomial part, `simulate` integrates the true
//! dynamics, `learn` fits the discrepancy model from a measurement CSV,
//! `sos` certifies and enlarges a region for a fully known system,
//! `estimate` runs the complete learning loop, `export-sdp` dumps the
//! level-feasibility program in sparse SDPA format, and `plot` re-emits
//! contour/variance artifacts from a stored report.
//!
//! Artifacts are JSON or CSV; every artifact embeds the resolved
//! configuration (JSON objects under a `config` key, CSVs and SDPA files
//! in a leading comment line). Identical command lines with identical
//! seeds produce byte-identical artifacts, except `timings.json`, which
//! records wall-clock measurements.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bcroa::cheb::{approximate_system, ChebConfig, RemainderBound};
use bcroa::exprlang::{parse_expr, parse_system, SystemDefinition};
use bcroa::gp::{fit, Dataset, DeltaOutcome, GpConfig};
use bcroa::poly::Poly;
use bcroa::roa::{
    contour_polylines, contour_slices, contours_to_csv, run_algorithm1, slices_to_csv,
    variance_surface_csv, EpisodeReport, RoaConfig,
};
use bcroa::sdp::export_sdpa;
use bcroa::sim::{integrate, SimConfig};
use bcroa::sos::{
    alternate, auto_multiplier_degree, sos_basis, step1_initial_region, AlternationConfig,
    Identity, SosProgramBuilder,
};

type CliError = Box<dyn std::error::Error>;
type CliResult = Result<(), CliError>;

/// Probabilistic region-of-attraction estimation for partially known systems.
#[derive(Parser)]
#[command(name = "bcroa", version, about, propagate_version = true)]
struct Cli {
    /// Worker threads for parallel candidate scoring (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Polynomialize the known part of a system and report remainder bounds
    Approx(ApproxArgs),
    /// Integrate the true system from a start state and write the trajectory CSV
    Simulate(SimulateArgs),
    /// Fit the discrepancy model to a measurement CSV and dump it as JSON
    Learn(LearnArgs),
    /// Certify and enlarge an invariant region for a system without learning
    Sos(SosArgs),
    /// Run the full learning pipeline and write report and plot artifacts
    Estimate(EstimateArgs),
    /// Export the level-feasibility program in sparse SDPA format
    ExportSdp(ExportSdpArgs),
    /// Re-emit plot artifacts from a stored report
    Plot(PlotArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let result = match cli.command {
        Command::Approx(a) => cmd_approx(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Learn(a) => cmd_learn(a),
        Command::Sos(a) => cmd_sos(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::ExportSdp(a) => cmd_export_sdp(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()).into())
}

/// Write an artifact, creating parent directories as needed.
fn write_artifact(path: &Path, content: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| format!("creating {}: {e}", dir.display()))?;
        }
    }
    fs::write(path, content).map_err(|e| format!("writing {}: {e}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn pretty(value: &impl Serialize) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// `"0.1, -0.2"` -> point.
fn parse_point(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|e| format!("coordinate `{}`: {e}", c.trim()).into())
        })
        .collect()
}

/// `"0.1, -0.2; 0.3, 0.4"` -> list of points.
fn parse_points(s: &str) -> Result<Vec<Vec<f64>>, CliError> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(parse_point).collect()
}

/// `"-2, 2; -2, 2"` -> per-axis intervals.
fn parse_bounds(s: &str) -> Result<Vec<(f64, f64)>, CliError> {
    parse_points(s)?
        .into_iter()
        .map(|p| match p.as_slice() {
            &[a, b] if a < b => Ok((a, b)),
            &[a, b] => Err(format!("interval [{a}, {b}] is empty").into()),
            other => Err(format!("expected `lo, hi`, got {other:?}").into()),
        })
        .collect()
}

fn parse_poly_expr(src: &str, state_dim: usize) -> Result<Poly, CliError> {
    let expr = parse_expr(src, state_dim)?;
    expr.try_to_polynomial(state_dim)
        .ok_or_else(|| format!("`{src}` is not a polynomial in x1..x{state_dim}").into())
}

fn load_system(path: &Path) -> Result<SystemDefinition, CliError> {
    let sys = parse_system(&read_to_string(path)?)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(sys)
}

// ---------------------------------------------------------------------------
// approx
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ApproxArgs {
    /// System definition file
    #[arg(long)]
    system: PathBuf,
    /// Interpolation degree for univariate replaced terms
    #[arg(long, default_value_t = 4)]
    cheb_degree: usize,
    /// Per-axis degree for bivariate tensor terms
    #[arg(long, default_value_t = 8)]
    bivariate_degree: usize,
    /// Output JSON path
    #[arg(long, default_value = "approx.json")]
    out: PathBuf,
}

fn cmd_approx(a: ApproxArgs) -> CliResult {
    let sys = load_system(&a.system)?;
    let cheb = ChebConfig {
        degree: a.cheb_degree,
        bivariate_degree: a.bivariate_degree,
        ..Default::default()
    };
    let approx = approximate_system(&sys, &cheb)?;
    let config = serde_json::json!({
        "system": a.system.display().to_string(),
        "cheb_degree": a.cheb_degree,
        "bivariate_degree": a.bivariate_degree,
        "out": a.out.display().to_string(),
    });
    let components: Vec<serde_json::Value> = (0..approx.state_dim)
        .map(|i| {
            let (kind, value) = match approx.remainders[i] {
                RemainderBound::Zero => ("zero", 0.0),
                RemainderBound::Formal(v) => ("formal", v),
                RemainderBound::Empirical(v) => ("empirical", v),
            };
            serde_json::json!({
                "component": i + 1,
                "polynomial_part": approx.f[i],
                "interpolant": approx.pk[i],
                "interpolant_degree": approx.pk[i].degree(),
                "known_field": approx.known_field(i),
                "remainder_kind": kind,
                "remainder_bound": value,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "config": config,
        "state_dim": approx.state_dim,
        "domain": approx.domain,
        "components": components,
        "warnings": approx.warnings,
    });
    write_artifact(&a.out, &pretty(&doc)?)?;
    for (i, r) in approx.remainders.iter().enumerate() {
        let label = match r {
            RemainderBound::Zero => "exact (no replaced term)".to_string(),
            RemainderBound::Formal(v) => format!("formal remainder <= {v:.3e}"),
            RemainderBound::Empirical(v) => format!("empirical remainder <= {v:.3e}"),
        };
        println!(
            "component {}: degree {} interpolant, {label}",
            i + 1,
            approx.pk[i].degree()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimulateArgs {
    /// System definition file
    #[arg(long)]
    system: PathBuf,
    /// Start state, comma-separated
    #[arg(long, allow_hyphen_values = true)]
    start: String,
    /// Integration horizon in seconds
    #[arg(long, default_value_t = 10.0)]
    t_horizon: f64,
    /// Fixed integration step
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Terminal states within this radius of the origin count as converged
    #[arg(long, default_value_t = 1e-3)]
    r_conv: f64,
    /// Output CSV path
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let sys = load_system(&a.system)?;
    let x0 = parse_point(&a.start)?;
    if x0.len() != sys.state_dim {
        return Err(format!(
            "start state has {} coordinates for state dimension {}",
            x0.len(),
            sys.state_dim
        )
        .into());
    }
    let sim = SimConfig {
        t_horizon: a.t_horizon,
        dt: a.dt,
        r_conv: a.r_conv,
        stride: 1,
        domain: Some(sys.domain.clone()),
    };
    let field = |x: &[f64]| {
        sys.eval_true_field(x).unwrap_or_else(|_| vec![f64::NAN; x.len()])
    };
    let traj = integrate(field, &x0, &sim)?;
    let config = serde_json::json!({
        "system": a.system.display().to_string(),
        "start": x0,
        "t_horizon": a.t_horizon,
        "dt": a.dt,
        "r_conv": a.r_conv,
        "out": a.out.display().to_string(),
    });
    let csv = format!("# config: {}\n{}", serde_json::to_string(&config)?, traj.to_csv());
    write_artifact(&a.out, &csv)?;
    println!(
        "{} steps, terminal state {:?}, converged: {}, escaped: {}",
        traj.times.len() - 1,
        traj.terminal(),
        traj.converged,
        traj.escaped
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// learn
// ---------------------------------------------------------------------------

#[derive(Args)]
struct LearnArgs {
    /// Measurement CSV with header x_1..x_n,y_1..y_m
    #[arg(long)]
    data: PathBuf,
    /// Total degree of the polynomial mean
    #[arg(long, default_value_t = 2)]
    mean_degree: u32,
    #[arg(long, default_value_t = 1.0)]
    signal_variance: f64,
    #[arg(long, default_value_t = 1.0)]
    length_scale: f64,
    /// Observation noise standard deviation
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Prior variance of the mean weights
    #[arg(long, default_value_t = 1.0)]
    prior_variance: f64,
    /// Norm bound entering the failure-probability machinery
    #[arg(long, default_value_t = 1.0)]
    rkhs_bound: f64,
    /// Per-axis feature scales, comma-separated (default: unit scales)
    #[arg(long, allow_hyphen_values = true)]
    scales: Option<String>,
    /// Drop the constant regression feature, pinning the mean at the origin
    #[arg(long)]
    no_constant_feature: bool,
    /// Output JSON path for the model dump
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    /// Also write a posterior-variance grid CSV to this path
    #[arg(long)]
    variance_out: Option<PathBuf>,
    /// Box for the variance grid, e.g. "-2, 2; -2, 2"
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Variance grid resolution per axis
    #[arg(long, default_value_t = 61)]
    variance_per_axis: usize,
}

fn cmd_learn(a: LearnArgs) -> CliResult {
    let data = Dataset::from_csv(&read_to_string(&a.data)?)?;
    let mut cfg = GpConfig {
        signal_variance: a.signal_variance,
        length_scale: a.length_scale,
        noise_sigma_n: a.noise,
        prior_weight_variance: a.prior_variance,
        mean_degree: a.mean_degree,
        rkhs_bound_b: a.rkhs_bound,
        feature_scales: Vec::new(),
        include_constant_feature: !a.no_constant_feature,
    };
    if let Some(s) = &a.scales {
        cfg.feature_scales = parse_point(s)?;
    }
    let model = fit(&data, &cfg)?;
    let dump = model.dump();
    let config = serde_json::json!({
        "data": a.data.display().to_string(),
        "out": a.out.display().to_string(),
        "gp": model.config(),
    });
    let doc = serde_json::json!({
        "config": config,
        "model": dump,
        "info_gain": model.info_gain(),
    });
    write_artifact(&a.out, &pretty(&doc)?)?;
    println!(
        "fitted {} samples ({} outputs), info gain {:.6}, dataset checksum {}",
        data.count(),
        data.output_dim(),
        model.info_gain(),
        dump.dataset_checksum
    );
    if let Some(vout) = &a.variance_out {
        let bounds_src = a
            .bounds
            .as_deref()
            .ok_or("--variance-out needs --bounds to define the grid box")?;
        let bounds = parse_bounds(bounds_src)?;
        if bounds.len() != data.state_dim() {
            return Err(format!(
                "--bounds gives {} intervals for state dimension {}",
                bounds.len(),
                data.state_dim()
            )
            .into());
        }
        let csv = variance_surface_csv(&model, &bounds, a.variance_per_axis);
        let text = format!("# config: {}\n{csv}", serde_json::to_string(&config)?);
        write_artifact(vout, &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sos
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SosArgs {
    /// System definition file (the field is polynomialized before certification)
    #[arg(long)]
    system: PathBuf,
    /// Lyapunov candidate as an expression in x1..xn
    #[arg(long = "V", visible_alias = "lyapunov")]
    v: String,
    /// Barrier polynomial degree for the enlargement alternation
    #[arg(long, default_value_t = 4)]
    barrier_degree: u32,
    /// Multiplier degree; 0 derives it from the field degree
    #[arg(long, default_value_t = 0)]
    mult_degree: u32,
    /// Maximum alternation rounds
    #[arg(long, default_value_t = 10)]
    max_rounds: usize,
    /// Trace-gain stopping threshold of the alternation
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Upper limit of the initial-level search
    #[arg(long, default_value_t = 10.0)]
    c_max: f64,
    /// Relative tolerance of the level bisection
    #[arg(long, default_value_t = 1e-3)]
    step1_tol: f64,
    /// Interpolation degree used when polynomializing the system
    #[arg(long, default_value_t = 4)]
    cheb_degree: usize,
    /// Stop after the level search; skip barrier enlargement
    #[arg(long)]
    skip_enlarge: bool,
    /// Output JSON path for the certificate
    #[arg(long, default_value = "certificate.json")]
    out: PathBuf,
}

fn cmd_sos(a: SosArgs) -> CliResult {
    let sys = load_system(&a.system)?;
    let n = sys.state_dim;
    let v = parse_poly_expr(&a.v, n)?;
    let cheb = ChebConfig { degree: a.cheb_degree, ..Default::default() };
    let approx = approximate_system(&sys, &cheb)?;
    let xdot = approx.known_field_all();
    let mult_degree =
        if a.mult_degree == 0 { auto_multiplier_degree(&xdot) } else { a.mult_degree };
    let t0 = Instant::now();
    let s1 = step1_initial_region(&v, &xdot, a.c_max, mult_degree, a.step1_tol)?;
    println!(
        "certified level c* = {:.6} (margin {:+.2e}, {} solves{})",
        s1.c_star,
        s1.margin,
        s1.probes,
        if s1.saturated { ", search saturated" } else { "" }
    );
    let config = serde_json::json!({
        "system": a.system.display().to_string(),
        "lyapunov": a.v,
        "barrier_degree": a.barrier_degree,
        "mult_degree": mult_degree,
        "max_rounds": a.max_rounds,
        "eps": a.eps,
        "c_max": a.c_max,
        "step1_tol": a.step1_tol,
        "cheb_degree": a.cheb_degree,
        "skip_enlarge": a.skip_enlarge,
        "out": a.out.display().to_string(),
    });
    let mut doc = serde_json::json!({
        "config": config,
        "vector_field": xdot,
        "lyapunov": v,
        "c_star": s1.c_star,
        "step1_margin": s1.margin,
        "step1_solves": s1.probes,
        "saturated": s1.saturated,
        "multiplier": s1.multiplier,
    });
    if !a.skip_enlarge {
        let h0 = &Poly::constant(n, s1.c_star) - &v;
        let alt_cfg = AlternationConfig {
            barrier_degree: a.barrier_degree,
            mult_degree,
            max_rounds: a.max_rounds,
            eps: a.eps,
            ..Default::default()
        };
        let alt = alternate(&v, &h0, &xdot, &alt_cfg)?;
        println!(
            "enlargement: {} rounds, stop {:?}, trace {:.6} -> {:.6}",
            alt.rounds,
            alt.stop,
            alt.trace_history.first().copied().unwrap_or(f64::NAN),
            alt.trace_history.last().copied().unwrap_or(f64::NAN),
        );
        doc["barrier"] = serde_json::to_value(&alt.h)?;
        doc["gram"] = serde_json::to_value(alt.gram_rows())?;
        doc["multiplier_l1"] = serde_json::to_value(&alt.l1)?;
        doc["multiplier_l2"] = serde_json::to_value(&alt.l2)?;
        doc["trace_history"] = serde_json::to_value(&alt.trace_history)?;
        doc["rounds"] = serde_json::to_value(alt.rounds)?;
        doc["stop"] = serde_json::to_value(&alt.stop)?;
    }
    println!("total {:.2}s", t0.elapsed().as_secs_f64());
    write_artifact(&a.out, &pretty(&doc)?)
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

/// Fully resolved pipeline settings, embedded in every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    system: String,
    lyapunov: String,
    domain: Vec<(f64, f64)>,
    c0: f64,
    episodes: usize,
    beta: f64,
    seed: u64,
    starts: Vec<Vec<f64>>,
    cheb_degree: usize,
    mean_degree: u32,
    signal_variance: f64,
    length_scale: f64,
    prior_variance: f64,
    barrier_degree: u32,
    mult_degree: u32,
    max_rounds: usize,
    eps: f64,
    c_max: f64,
    step1_tol: f64,
    t_horizon: f64,
    dt: f64,
    r_conv: f64,
    stride: usize,
    candidates_per_axis: usize,
    validation_per_axis: usize,
    contour_per_axis: usize,
    contour_slices: usize,
    out: String,
}

/// Option-typed settings collected from the config file and command line;
/// later sources win field by field.
#[derive(Default)]
struct Overrides {
    system: Option<PathBuf>,
    v: Option<String>,
    c0: Option<f64>,
    episodes: Option<usize>,
    beta: Option<f64>,
    seed: Option<u64>,
    starts: Option<Vec<Vec<f64>>>,
    cheb_degree: Option<usize>,
    mean_degree: Option<u32>,
    signal_variance: Option<f64>,
    length_scale: Option<f64>,
    prior_variance: Option<f64>,
    barrier_degree: Option<u32>,
    mult_degree: Option<u32>,
    max_rounds: Option<usize>,
    eps: Option<f64>,
    c_max: Option<f64>,
    step1_tol: Option<f64>,
    t_horizon: Option<f64>,
    dt: Option<f64>,
    r_conv: Option<f64>,
    stride: Option<usize>,
    candidates_per_axis: Option<usize>,
    validation_per_axis: Option<usize>,
    contour_per_axis: Option<usize>,
    contour_slices: Option<usize>,
    out: Option<PathBuf>,
}

impl Overrides {
    fn merge(self, over: Overrides) -> Overrides {
        Overrides {
            system: over.system.or(self.system),
            v: over.v.or(self.v),
            c0: over.c0.or(self.c0),
            episodes: over.episodes.or(self.episodes),
            beta: over.beta.or(self.beta),
            seed: over.seed.or(self.seed),
            starts: over.starts.or(self.starts),
            cheb_degree: over.cheb_degree.or(self.cheb_degree),
            mean_degree: over.mean_degree.or(self.mean_degree),
            signal_variance: over.signal_variance.or(self.signal_variance),
            length_scale: over.length_scale.or(self.length_scale),
            prior_variance: over.prior_variance.or(self.prior_variance),
            barrier_degree: over.barrier_degree.or(self.barrier_degree),
            mult_degree: over.mult_degree.or(self.mult_degree),
            max_rounds: over.max_rounds.or(self.max_rounds),
            eps: over.eps.or(self.eps),
            c_max: over.c_max.or(self.c_max),
            step1_tol: over.step1_tol.or(self.step1_tol),
            t_horizon: over.t_horizon.or(self.t_horizon),
            dt: over.dt.or(self.dt),
            r_conv: over.r_conv.or(self.r_conv),
            stride: over.stride.or(self.stride),
            candidates_per_axis: over.candidates_per_axis.or(self.candidates_per_axis),
            validation_per_axis: over.validation_per_axis.or(self.validation_per_axis),
            contour_per_axis: over.contour_per_axis.or(self.contour_per_axis),
            contour_slices: over.contour_slices.or(self.contour_slices),
            out: over.out.or(self.out),
        }
    }
}

fn parse_val<T: FromStr>(
    value: &str,
    key: &str,
    path: &Path,
    ln: usize,
) -> Result<T, CliError>
where
    T::Err: Display,
{
    value.parse().map_err(|e| {
        format!("{}:{}: {key} = `{value}`: {e}", path.display(), ln + 1).into()
    })
}

/// Plain `key = value` file with `#` comments.
fn parse_config_file(text: &str, path: &Path) -> Result<Overrides, CliError> {
    let mut o = Overrides::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(
                format!("{}:{}: expected `key = value`", path.display(), ln + 1).into()
            );
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "system" => o.system = Some(PathBuf::from(value)),
            "V" | "lyapunov" => o.v = Some(value.to_string()),
            "c0" => o.c0 = Some(parse_val(value, key, path, ln)?),
            "episodes" => o.episodes = Some(parse_val(value, key, path, ln)?),
            "beta" => o.beta = Some(parse_val(value, key, path, ln)?),
            "seed" => o.seed = Some(parse_val(value, key, path, ln)?),
            "starts" => {
                o.starts = Some(parse_points(value).map_err(|e| {
                    format!("{}:{}: starts: {e}", path.display(), ln + 1)
                })?)
            }
            "cheb_degree" => o.cheb_degree = Some(parse_val(value, key, path, ln)?),
            "mean_degree" => o.mean_degree = Some(parse_val(value, key, path, ln)?),
            "signal_variance" => {
                o.signal_variance = Some(parse_val(value, key, path, ln)?)
            }
            "length_scale" => o.length_scale = Some(parse_val(value, key, path, ln)?),
            "prior_variance" => o.prior_variance = Some(parse_val(value, key, path, ln)?),
            "barrier_degree" => o.barrier_degree = Some(parse_val(value, key, path, ln)?),
            "mult_degree" => o.mult_degree = Some(parse_val(value, key, path, ln)?),
            "max_rounds" => o.max_rounds = Some(parse_val(value, key, path, ln)?),
            "eps" => o.eps = Some(parse_val(value, key, path, ln)?),
            "c_max" => o.c_max = Some(parse_val(value, key, path, ln)?),
            "step1_tol" => o.step1_tol = Some(parse_val(value, key, path, ln)?),
            "t_horizon" => o.t_horizon = Some(parse_val(value, key, path, ln)?),
            "dt" => o.dt = Some(parse_val(value, key, path, ln)?),
            "r_conv" => o.r_conv = Some(parse_val(value, key, path, ln)?),
            "stride" => o.stride = Some(parse_val(value, key, path, ln)?),
            "candidates_per_axis" => {
                o.candidates_per_axis = Some(parse_val(value, key, path, ln)?)
            }
            "validation_per_axis" => {
                o.validation_per_axis = Some(parse_val(value, key, path, ln)?)
            }
            "contour_per_axis" => {
                o.contour_per_axis = Some(parse_val(value, key, path, ln)?)
            }
            "contour_slices" => o.contour_slices = Some(parse_val(value, key, path, ln)?),
            "out" => o.out = Some(PathBuf::from(value)),
            other => {
                return Err(format!(
                    "{}:{}: unknown key `{other}`",
                    path.display(),
                    ln + 1
                )
                .into())
            }
        }
    }
    Ok(o)
}

#[derive(Args)]
struct EstimateArgs {
    /// Plain key = value configuration file; command-line flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// System definition file
    #[arg(long)]
    system: Option<PathBuf>,
    /// Lyapunov candidate as an expression in x1..xn
    #[arg(long = "V", visible_alias = "lyapunov")]
    v: Option<String>,
    /// Assumed-safe initial sublevel {V <= c0}
    #[arg(long)]
    c0: Option<f64>,
    /// Number of learning episodes
    #[arg(long)]
    episodes: Option<usize>,
    /// Confidence multiplier of the failure-probability bound
    #[arg(long)]
    beta: Option<f64>,
    /// Master seed for measurement noise
    #[arg(long)]
    seed: Option<u64>,
    /// Start states, e.g. "-0.05, -0.05; 0.1, 0.0"
    #[arg(long, allow_hyphen_values = true)]
    starts: Option<String>,
    #[arg(long)]
    cheb_degree: Option<usize>,
    #[arg(long)]
    mean_degree: Option<u32>,
    #[arg(long)]
    signal_variance: Option<f64>,
    #[arg(long)]
    length_scale: Option<f64>,
    #[arg(long)]
    prior_variance: Option<f64>,
    #[arg(long)]
    barrier_degree: Option<u32>,
    /// Multiplier degree; 0 derives it from the learned field degree
    #[arg(long)]
    mult_degree: Option<u32>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// Trace-gain stopping threshold of the alternation
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    c_max: Option<f64>,
    #[arg(long)]
    step1_tol: Option<f64>,
    #[arg(long)]
    t_horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    r_conv: Option<f64>,
    /// Keep every stride-th trajectory point as a measurement
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    candidates_per_axis: Option<usize>,
    /// Validation grid resolution; 0 picks 100/axis in 2D and 40/axis above
    #[arg(long)]
    validation_per_axis: Option<usize>,
    /// Contour grid resolution for plot artifacts
    #[arg(long)]
    contour_per_axis: Option<usize>,
    /// Number of axis-aligned slices for 3D contour artifacts
    #[arg(long)]
    contour_slices: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(
    args: EstimateArgs,
) -> Result<(RunConfig, SystemDefinition, Poly), CliError> {
    let mut o = Overrides::default();
    if let Some(cfg_path) = &args.config {
        o = o.merge(parse_config_file(&read_to_string(cfg_path)?, cfg_path)?);
    }
    let cli = Overrides {
        system: args.system,
        v: args.v,
        c0: args.c0,
        episodes: args.episodes,
        beta: args.beta,
        seed: args.seed,
        starts: args.starts.as_deref().map(parse_points).transpose()?,
        cheb_degree: args.cheb_degree,
        mean_degree: args.mean_degree,
        signal_variance: args.signal_variance,
        length_scale: args.length_scale,
        prior_variance: args.prior_variance,
        barrier_degree: args.barrier_degree,
        mult_degree: args.mult_degree,
        max_rounds: args.max_rounds,
        eps: args.eps,
        c_max: args.c_max,
        step1_tol: args.step1_tol,
        t_horizon: args.t_horizon,
        dt: args.dt,
        r_conv: args.r_conv,
        stride: args.stride,
        candidates_per_axis: args.candidates_per_axis,
        validation_per_axis: args.validation_per_axis,
        contour_per_axis: args.contour_per_axis,
        contour_slices: args.contour_slices,
        out: args.out,
    };
    let o = o.merge(cli);

    let system_path = o
        .system
        .ok_or("no system file given (--system or `system =` in the config file)")?;
    let sys = load_system(&system_path)?;
    let v_src = o
        .v
        .ok_or("no Lyapunov candidate given (--V or `V =` in the config file)")?;
    let v = parse_poly_expr(&v_src, sys.state_dim)?;
    let starts = o.starts.unwrap_or_default();
    if starts.is_empty() {
        return Err("no start states given (--starts or `starts =` in the config file)".into());
    }
    for s in &starts {
        if s.len() != sys.state_dim {
            return Err(format!(
                "start state {s:?} has {} coordinates for state dimension {}",
                s.len(),
                sys.state_dim
            )
            .into());
        }
    }
    let n = sys.state_dim;
    let rc = RunConfig {
        system: system_path.display().to_string(),
        lyapunov: v_src,
        domain: sys.domain.clone(),
        c0: o.c0.unwrap_or(0.1),
        episodes: o.episodes.unwrap_or(3),
        beta: o.beta.unwrap_or(2.0),
        seed: o.seed.unwrap_or(0),
        starts,
        cheb_degree: o.cheb_degree.unwrap_or(4),
        mean_degree: o.mean_degree.unwrap_or(2),
        signal_variance: o.signal_variance.unwrap_or(1.0),
        length_scale: o.length_scale.unwrap_or(1.0),
        prior_variance: o.prior_variance.unwrap_or(1.0),
        barrier_degree: o.barrier_degree.unwrap_or(4),
        mult_degree: o.mult_degree.unwrap_or(0),
        max_rounds: o.max_rounds.unwrap_or(10),
        eps: o.eps.unwrap_or(1e-3),
        c_max: o.c_max.unwrap_or(10.0),
        step1_tol: o.step1_tol.unwrap_or(1e-3),
        t_horizon: o.t_horizon.unwrap_or(10.0),
        dt: o.dt.unwrap_or(1e-3),
        r_conv: o.r_conv.unwrap_or(1e-3),
        stride: o.stride.unwrap_or(50),
        candidates_per_axis: o.candidates_per_axis.unwrap_or(15),
        validation_per_axis: o.validation_per_axis.unwrap_or(0),
        contour_per_axis: o.contour_per_axis.unwrap_or(if n == 2 { 201 } else { 81 }),
        contour_slices: o.contour_slices.unwrap_or(5),
        out: o.out.unwrap_or_else(|| PathBuf::from("out")).display().to_string(),
    };
    Ok((rc, sys, v))
}

fn roa_config(rc: &RunConfig, v: Poly) -> RoaConfig {
    RoaConfig {
        v,
        c0: rc.c0,
        episodes: rc.episodes,
        beta: rc.beta,
        master_seed: rc.seed,
        initial_starts: rc.starts.clone(),
        cheb: ChebConfig { degree: rc.cheb_degree, ..Default::default() },
        // noise, feature scales, constant feature, and the norm bound are
        // overridden from the system definition inside the episode loop
        gp: GpConfig {
            signal_variance: rc.signal_variance,
            length_scale: rc.length_scale,
            prior_weight_variance: rc.prior_variance,
            mean_degree: rc.mean_degree,
            ..Default::default()
        },
        alternation: AlternationConfig {
            barrier_degree: rc.barrier_degree,
            mult_degree: rc.mult_degree,
            max_rounds: rc.max_rounds,
            eps: rc.eps,
            ..Default::default()
        },
        c_max: rc.c_max,
        step1_tol: rc.step1_tol,
        sim: SimConfig {
            t_horizon: rc.t_horizon,
            dt: rc.dt,
            r_conv: rc.r_conv,
            stride: rc.stride,
            domain: None,
        },
        candidates_per_axis: rc.candidates_per_axis,
        validation_per_axis: rc.validation_per_axis,
    }
}

fn cmd_estimate(args: EstimateArgs) -> CliResult {
    let (rc, sys, v) = resolve_config(args)?;
    let cfg = roa_config(&rc, v);
    log::info!(
        "estimating over {} episodes on {} (seed {})",
        rc.episodes,
        rc.system,
        rc.seed
    );
    let t0 = Instant::now();
    let report = run_algorithm1(&sys, &cfg)?;
    let total = t0.elapsed().as_secs_f64();

    let outdir = PathBuf::from(&rc.out);
    let doc = serde_json::json!({ "config": rc, "report": report });
    write_artifact(&outdir.join("report.json"), &pretty(&doc)?)?;
    let timings = serde_json::json!({
        "config": rc,
        "episode_seconds": report.timings,
        "total_seconds": total,
    });
    write_artifact(&outdir.join("timings.json"), &pretty(&timings)?)?;
    emit_plot_artifacts(&report, &rc, &outdir)?;
    print_report_summary(&report);
    Ok(())
}

fn emit_plot_artifacts(
    report: &EpisodeReport,
    rc: &RunConfig,
    outdir: &Path,
) -> CliResult {
    let config_line = format!("# config: {}\n", serde_json::to_string(rc)?);
    let n = rc.domain.len();
    for est in &report.estimates {
        let path = outdir.join(format!("contour_ep{}.csv", est.episode));
        match n {
            2 => {
                let lines = contour_polylines(&est.barrier, &rc.domain, rc.contour_per_axis)?;
                write_artifact(&path, &format!("{config_line}{}", contours_to_csv(&lines)))?;
            }
            3 => {
                let slices = contour_slices(
                    &est.barrier,
                    &rc.domain,
                    rc.contour_per_axis,
                    rc.contour_slices,
                )?;
                write_artifact(&path, &format!("{config_line}{}", slices_to_csv(&slices)))?;
            }
            _ => log::warn!("no contour artifact for state dimension {n}"),
        }
    }
    if let (Some(dump), Some(dataset)) = (&report.final_model, &report.final_dataset) {
        let model = fit(dataset, &dump.config)?;
        let per_axis = if n <= 2 { 61 } else { 21 };
        let csv = variance_surface_csv(&model, &rc.domain, per_axis);
        write_artifact(&outdir.join("variance.csv"), &format!("{config_line}{csv}"))?;
    }
    Ok(())
}

fn print_report_summary(report: &EpisodeReport) {
    for est in &report.estimates {
        let delta = match &est.delta {
            DeltaOutcome::Attained(d) => format!("{d:.4}"),
            DeltaOutcome::Unattainable { reason } => format!("not attained ({reason})"),
        };
        println!(
            "episode {}: c* = {:.6}, samples = {}, info gain = {:.4}, delta = {delta}, validation {}",
            est.episode,
            est.c_star,
            est.sample_count,
            est.info_gain,
            if est.validation.accepted { "accepted" } else { "REJECTED" }
        );
    }
    match (report.union_bound, report.intersection_bound) {
        (Some(u), Some(i)) => {
            println!("episode-region probability interval: [{u:.4}, {i:.4}]")
        }
        _ => println!(
            "probability interval unavailable (a failure-probability bound was not attained)"
        ),
    }
    if let Some(t) = &report.truncated {
        println!("stopped early: {t}");
    }
}

// ---------------------------------------------------------------------------
// export-sdp
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ExportSdpArgs {
    /// System definition file
    #[arg(long)]
    system: PathBuf,
    /// Lyapunov candidate as an expression in x1..xn
    #[arg(long = "V", visible_alias = "lyapunov")]
    v: String,
    /// Sublevel to test: the c in {V <= c}
    #[arg(long)]
    level: f64,
    /// Multiplier degree; 0 derives it from the field degree
    #[arg(long, default_value_t = 0)]
    mult_degree: u32,
    /// Interpolation degree used when polynomializing the system
    #[arg(long, default_value_t = 4)]
    cheb_degree: usize,
    /// Output path for the sparse SDPA file
    #[arg(long, default_value = "problem.dat-s")]
    out: PathBuf,
}

fn cmd_export_sdp(a: ExportSdpArgs) -> CliResult {
    let sys = load_system(&a.system)?;
    let n = sys.state_dim;
    let v = parse_poly_expr(&a.v, n)?;
    let cheb = ChebConfig { degree: a.cheb_degree, ..Default::default() };
    let approx = approximate_system(&sys, &cheb)?;
    let xdot = approx.known_field_all();
    let mult_degree =
        if a.mult_degree == 0 { auto_multiplier_degree(&xdot) } else { a.mult_degree };

    // Level-feasibility program, matching the level search: maximize the
    // margin t subject to
    //   z^T Gq z + t Sq + (z^T Gl z + t Sl)(c - V) + grad V . xdot = 0
    // with Gq, Gl PSD; the level c is feasible iff the optimum t is >= 0.
    let vdot = v
        .gradient()
        .iter()
        .zip(&xdot)
        .fold(Poly::zero(n), |acc, (gi, fi)| &acc + &(gi * fi));
    let cv = &Poly::constant(n, a.level) - &v;
    let target_deg = (-&vdot).degree().max(cv.degree() + mult_degree);
    let mut b = SosProgramBuilder::new(n);
    let gq = b.add_gram("main", sos_basis(n, target_deg));
    let gl = b.add_gram("L", sos_basis(n, mult_degree));
    let t = b.add_free("t");
    let sq_q = b.basis_square_sum(gq);
    let sq_l = b.basis_square_sum(gl);
    b.add_identity(
        Identity::new()
            .gram(gq, Poly::constant(n, 1.0))
            .free(t, sq_q)
            .gram(gl, cv.clone())
            .free(t, &sq_l * &cv)
            .constant(vdot),
    );
    b.minimize_free(t, -1.0);
    let compiled = b.compile()?;

    let config = serde_json::json!({
        "system": a.system.display().to_string(),
        "lyapunov": a.v,
        "level": a.level,
        "mult_degree": mult_degree,
        "cheb_degree": a.cheb_degree,
        "out": a.out.display().to_string(),
    });
    let text = format!(
        "* config: {}\n{}",
        serde_json::to_string(&config)?,
        export_sdpa(&compiled.problem)
    );
    write_artifact(&a.out, &text)?;
    println!(
        "{} constraints, block sizes {:?}",
        compiled.problem.num_constraints(),
        compiled.problem.block_sizes
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PlotArgs {
    /// report.json produced by `estimate`
    #[arg(long)]
    report: PathBuf,
    /// Output directory (default: the report's directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Contour grid resolution override
    #[arg(long)]
    contour_per_axis: Option<usize>,
    /// 3D slice count override
    #[arg(long)]
    contour_slices: Option<usize>,
}

#[derive(Deserialize)]
struct StoredReport {
    config: RunConfig,
    report: EpisodeReport,
}

fn cmd_plot(a: PlotArgs) -> CliResult {
    let stored: StoredReport = serde_json::from_str(&read_to_string(&a.report)?)
        .map_err(|e| format!("{}: {e}", a.report.display()))?;
    let mut rc = stored.config;
    if let Some(p) = a.contour_per_axis {
        rc.contour_per_axis = p;
    }
    if let Some(s) = a.contour_slices {
        rc.contour_slices = s;
    }
    let outdir = match a.out {
        Some(dir) => dir,
        None => a
            .report
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    emit_plot_artifacts(&stored.report, &rc, &outdir)
}
