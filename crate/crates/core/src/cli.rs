//! The `levyap` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure (or disagreement under
//! `--compare`), 2 on usage and configuration errors.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{estimate_detailed, estimates_agree, simulate, sweep, write_estimate_csv, write_sweep_csv};
use crate::config::RunConfig;
use crate::error::Error;
use crate::estimators::{LyapunovEstimate, Method};
use crate::fpcircle::write_density_csv;

#[derive(Debug, Parser)]
#[command(name = "levyap", version, about = "Lyapunov exponents of Hamiltonian systems under small Lévy noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one trajectory as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Steps between rows.
        #[arg(long)]
        stride: Option<usize>,
        /// Also write the angle and log-norm of a transported tangent.
        #[arg(long)]
        angles: bool,
    },
    /// Estimate the top Lyapunov exponent and write it as JSON.
    Lyapunov {
        #[command(flatten)]
        common: Common,
        /// Run a second method and fail unless both agree within three
        /// combined standard errors.
        #[arg(long, value_name = "METHOD")]
        compare: Option<Method>,
        /// Also write the estimate as a CSV row to this file.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
        /// Include wall-clock runtimes in the JSON (makes output
        /// non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Estimate over a list of epsilons and fit the log-log slope.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated epsilon values (overrides `sweep.epsilons`).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        epsilons: Option<Vec<f64>>,
        /// Write the fit summary JSON here instead of standard error.
        #[arg(long, value_name = "PATH")]
        fit: Option<PathBuf>,
    },
    /// Solve the stationary angular equation of the nilpotent system.
    FpSolve {
        #[command(flatten)]
        common: Common,
        /// Write the summary JSON here instead of standard error.
        #[arg(long, value_name = "PATH")]
        summary: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    Defaults {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

/// Options shared by the computing subcommands. Each named flag is shorthand
/// for one `--set` override and is applied before the explicit ones.
#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set estimator.stepper.dt=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `system.name`: nilpotent or duffing.
    #[arg(long)]
    system: Option<String>,
    /// `run.epsilon`.
    #[arg(long)]
    epsilon: Option<f64>,
    /// `run.method`: direct, khasminskii, theorem33 or fpcircle.
    #[arg(long)]
    method: Option<String>,
    /// `estimator.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `estimator.horizon`.
    #[arg(long)]
    horizon: Option<f64>,
    /// `estimator.replicates`.
    #[arg(long)]
    replicates: Option<usize>,
    /// `estimator.stepper.dt`.
    #[arg(long)]
    dt: Option<f64>,
    /// `estimator.beta`.
    #[arg(long)]
    beta: Option<f64>,
    /// `noise.jumps = true`.
    #[arg(long)]
    jumps: bool,
    /// `noise.brownian = false`.
    #[arg(long)]
    no_brownian: bool,
    /// `noise.alpha`.
    #[arg(long)]
    alpha: Option<f64>,
    /// `noise.c_alpha`.
    #[arg(long)]
    c_alpha: Option<f64>,
    /// `fpcircle.grid`.
    #[arg(long)]
    grid: Option<usize>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output file (default: standard output).
    #[arg(short, long, value_name = "PATH")]
    output: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        push("system.name", self.system.clone());
        push("run.epsilon", self.epsilon.map(|v| format!("{v:?}")));
        push("run.method", self.method.clone());
        push("estimator.seed", self.seed.map(|v| v.to_string()));
        push("estimator.horizon", self.horizon.map(|v| format!("{v:?}")));
        push("estimator.replicates", self.replicates.map(|v| v.to_string()));
        push("estimator.stepper.dt", self.dt.map(|v| format!("{v:?}")));
        push("estimator.beta", self.beta.map(|v| format!("{v:?}")));
        push("noise.jumps", self.jumps.then(|| "true".into()));
        push("noise.brownian", self.no_brownian.then(|| "false".into()));
        push("noise.alpha", self.alpha.map(|v| format!("{v:?}")));
        push("noise.c_alpha", self.c_alpha.map(|v| format!("{v:?}")));
        push("fpcircle.grid", self.grid.map(|v| v.to_string()));
        o.extend(self.set.iter().cloned());
        o
    }

    fn load(&self, extra: &[String]) -> Result<RunConfig, Failure> {
        self.load_with(extra, false)
    }

    /// Reads the file, applies flags and `--set`, and validates; a trajectory
    /// dump may have a zero horizon.
    fn load_with(&self, extra: &[String], zero_horizon_ok: bool) -> Result<RunConfig, Failure> {
        let base = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::from_toml(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let mut overrides = extra.to_vec();
        overrides.extend(self.overrides());
        let cfg = base.with_overrides(&overrides).map_err(Failure::usage_from)?;
        let mut check = cfg.clone();
        if zero_horizon_ok && check.estimator.horizon == 0.0 {
            check.estimator.horizon = 1.0;
        }
        check.validate().map_err(Failure::usage_from)?;
        Ok(cfg)
    }
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: String) -> Self {
        Self { code: 2, message }
    }
    fn usage_from(e: Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self { code: 1, message: e.to_string() }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::from(io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T, fallback_stderr: bool) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    match (path, fallback_stderr) {
        (None, true) => eprintln!("{text}"),
        _ => {
            let mut out = open_output(path)?;
            writeln!(out, "{text}")?;
            out.flush()?;
        }
    }
    Ok(())
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Failure::usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure { code: 1, message: e.to_string() })?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Serialize)]
struct LyapunovReport<'a> {
    estimate: &'a LyapunovEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    chart_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    runtime_seconds: Option<f64>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct Comparison<'a> {
    estimate: &'a LyapunovEstimate,
    agree: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    runtime_seconds: Option<f64>,
}

#[derive(Serialize)]
struct FitReport<'a> {
    slope: f64,
    intercept: f64,
    residual: f64,
    epsilons: &'a [f64],
    included: &'a [bool],
}

#[derive(Serialize)]
struct CircleReport<'a> {
    lambda: f64,
    residual: f64,
    chart_residual: Option<f64>,
    clipped_mass: f64,
    nullspace_gap: f64,
    grid: usize,
    config: &'a RunConfig,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Defaults { output } => {
            let mut out = open_output(output.as_deref())?;
            write!(out, "{}", RunConfig::default().to_toml())?;
            out.flush()?;
        }
        Command::Simulate { common, stride, angles } => {
            let mut extra = Vec::new();
            if let Some(s) = stride {
                extra.push(format!("simulate.stride={s}"));
            }
            if angles {
                extra.push("simulate.angles=true".into());
            }
            let cfg = common.load_with(&extra, true)?;
            let mut out = open_output(common.output.as_deref())?;
            let summary = simulate(&cfg, &mut out)?;
            out.flush()?;
            if summary.exit != crate::marcus::ExitFlag::None {
                eprintln!("trajectory exited at t = {} ({:?})", summary.final_time, summary.exit);
            }
        }
        Command::Lyapunov { common, compare, csv, timing } => {
            let cfg = common.load(&[])?;
            let timed = |m: Method| {
                let start = Instant::now();
                let r = with_threads(common.threads, || estimate_detailed(&cfg, m));
                (r, start.elapsed().as_secs_f64())
            };
            let (first, t1) = timed(cfg.run.method);
            let (est, sol) = first??;
            let second = match compare {
                Some(m) => {
                    let (r, t2) = timed(m);
                    Some((r??.0, t2))
                }
                None => None,
            };
            let comparison = second.as_ref().map(|(other, t2)| Comparison {
                estimate: other,
                agree: estimates_agree(&est, other),
                runtime_seconds: timing.then_some(*t2),
            });
            let agree = comparison.as_ref().map_or(true, |c| c.agree);
            let report = LyapunovReport {
                estimate: &est,
                chart_residual: sol.and_then(|s| s.chart_residual),
                comparison,
                runtime_seconds: timing.then_some(t1),
                config: &cfg,
            };
            write_json(common.output.as_deref(), &report, false)?;
            if let Some(path) = csv {
                let mut out = open_output(Some(&path))?;
                write_estimate_csv(&mut out, &est)?;
                out.flush()?;
            }
            if !agree {
                return Err(Failure { code: 1, message: "estimates disagree beyond three combined standard errors".into() });
            }
        }
        Command::Sweep { common, epsilons, fit } => {
            let cfg = common.load(&[])?;
            let eps = epsilons.unwrap_or_else(|| cfg.sweep.epsilons.clone());
            crate::estimators::validate_epsilons(&eps).map_err(Failure::usage_from)?;
            let result = with_threads(common.threads, || sweep(&cfg, cfg.run.method, &eps))??;
            let mut out = open_output(common.output.as_deref())?;
            write_sweep_csv(&mut out, &result)?;
            out.flush()?;
            let report = FitReport {
                slope: result.slope,
                intercept: result.intercept,
                residual: result.residual,
                epsilons: &result.epsilons,
                included: &result.included,
            };
            write_json(fit.as_deref(), &report, true)?;
        }
        Command::FpSolve { common, summary } => {
            let cfg = common.load(&[])?;
            let problem = cfg.circle_problem().map_err(Failure::usage_from)?;
            let sol = with_threads(common.threads, || {
                crate::fpcircle::solve_circle(&problem, cfg.fpcircle.grid, cfg.fpcircle.variant)
            })??;
            let mut out = open_output(common.output.as_deref())?;
            write_density_csv(&mut out, &sol.density)?;
            out.flush()?;
            let report = CircleReport {
                lambda: sol.lambda,
                residual: sol.density.residual,
                chart_residual: sol.chart_residual,
                clipped_mass: sol.density.clipped_mass,
                nullspace_gap: sol.density.gap,
                grid: cfg.fpcircle.grid,
                config: &cfg,
            };
            write_json(summary.as_deref(), &report, true)?;
        }
    }
    Ok(())
}

/// Entry point of the binary.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
