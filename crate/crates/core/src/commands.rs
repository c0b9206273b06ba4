//! Configuration-driven operations behind the command-line tool: single
//! estimates, trajectory dumps, scaling sweeps and circle solves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::estimators::{
    lyapunov_direct, lyapunov_khasminskii, theorem33_estimate, validate_epsilons, LyapunovEstimate, Method,
    SweepResult,
};
use crate::fpcircle::{solve_circle, CircleSolution, GeneratorVariant};
use crate::frame::{frame_coordinates, wrap_angle};
use crate::marcus::{check_exit, ExitFlag, MarcusSde, Stepper, TrajectoryState};
use crate::noise::stream;
use crate::output::{fmt_f64, SCHEMA_HEADER};
use crate::Vec2;

/// Runs one estimator on the configured system and noise.
pub fn estimate(cfg: &RunConfig, method: Method) -> Result<LyapunovEstimate> {
    Ok(estimate_detailed(cfg, method)?.0)
}

/// Like [`estimate`], also returning the circle solution of the `fpcircle`
/// method.
pub fn estimate_detailed(cfg: &RunConfig, method: Method) -> Result<(LyapunovEstimate, Option<CircleSolution>)> {
    let system = cfg.build_system()?;
    let noise = cfg.noise_model()?;
    let eps = cfg.run.epsilon;
    let est = &cfg.estimator;
    Ok(match method {
        Method::Direct => (lyapunov_direct(&*system, eps, noise, est)?, None),
        Method::Khasminskii => (lyapunov_khasminskii(&*system, eps, noise, est)?.estimate, None),
        Method::Theorem33 => {
            let run = lyapunov_khasminskii(&*system, eps, noise, est)?;
            let value =
                theorem33_estimate(&*system, &noise, &run, cfg.run.jump_term.into(), &est.quadrature, &est.stepper)?;
            (value, None)
        }
        Method::Fpcircle => {
            let problem = cfg.circle_problem()?;
            let variant = cfg.fpcircle.variant;
            let sol = solve_circle(&problem, cfg.fpcircle.grid, variant)?;
            let value = LyapunovEstimate {
                value: sol.lambda,
                stderr: 0.0,
                method: Method::Fpcircle,
                epsilon: eps,
                beta: match variant {
                    GeneratorVariant::Plain => 0.0,
                    GeneratorVariant::Pw => 2.0 / 3.0,
                },
                horizon: 0.0,
                replicates: 0,
                renorm_interval: 0,
                restarts: 0,
                unreliable: false,
                per_replicate: Vec::new(),
                martingale: None,
                residual: Some(sol.density.residual),
            };
            (value, Some(sol))
        }
    })
}

/// Whether two estimates agree within three combined standard errors.
pub fn estimates_agree(a: &LyapunovEstimate, b: &LyapunovEstimate) -> bool {
    (a.value - b.value).abs() <= 3.0 * a.stderr.hypot(b.stderr)
}

/// Outcome of a trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub rows: usize,
    pub final_time: f64,
    pub exit: ExitFlag,
}

/// Integrates one trajectory (stream 0 of the configured seed) and writes
/// `t,x1,x2,h` rows every `simulate.stride` steps, with `theta,rho` of the
/// rescaled frame coordinates of a transported tangent when
/// `simulate.angles` is set. A zero horizon writes only the header.
pub fn simulate<W: Write>(cfg: &RunConfig, out: &mut W) -> Result<SimulationSummary> {
    let system = cfg.build_system()?;
    let noise = cfg.noise_model()?;
    let est = &cfg.estimator;
    let step_cfg = est.stepper;
    step_cfg.validate()?;
    if !(est.horizon >= 0.0 && est.horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon = {} must be >= 0", est.horizon)));
    }
    let stride = cfg.simulate.stride.max(1) as u64;
    let angles = cfg.simulate.angles;
    writeln!(out, "{SCHEMA_HEADER}")?;
    writeln!(out, "{}", if angles { "t,x1,x2,h,theta,rho" } else { "t,x1,x2,h" })?;
    let steps = (est.horizon / step_cfg.dt).round() as u64;
    let x0 = Vec2::new(est.x0[0], est.x0[1]);
    let mut summary = SimulationSummary { rows: 0, final_time: 0.0, exit: ExitFlag::None };
    if steps == 0 {
        return Ok(summary);
    }
    let eps = cfg.run.epsilon;
    let scale = if eps > 0.0 { eps.powf(est.beta) } else { 1.0 };
    let tangent = angles.then(|| {
        let v = est.v0.unwrap_or([1.0, 0.0]);
        Vec2::new(v[0], v[1]).normalize()
    });
    let mut state = TrajectoryState::new(x0, tangent);
    state.exit = check_exit(&*system, x0, &step_cfg);
    if state.exit != ExitFlag::None {
        summary.exit = state.exit;
        return Ok(summary);
    }
    let sde = MarcusSde::new(&*system, eps, noise)?;
    let mut stepper = Stepper::new(sde, step_cfg)?;
    let mut rng = stream(est.seed, 0);
    let mut log_norm = 0.0;
    let row = |out: &mut W, state: &TrajectoryState, log_norm: f64| -> Result<()> {
        let x = state.x;
        write!(out, "{},{},{},{}", fmt_f64(state.t), fmt_f64(x.x), fmt_f64(x.y), fmt_f64(system.hamiltonian(x)))?;
        if let Some(v) = state.tangent {
            let w = frame_coordinates(&*system, x, v, step_cfg.tol_crit)?;
            let w = Vec2::new(scale * w.x, w.y);
            let theta = wrap_angle(w.y.atan2(w.x));
            write!(out, ",{},{}", fmt_f64(theta), fmt_f64(log_norm + w.norm().ln()))?;
        }
        writeln!(out)?;
        Ok(())
    };
    row(out, &state, log_norm)?;
    summary.rows = 1;
    for k in 1..=steps {
        match stepper.advance(&mut state, &mut rng) {
            Ok(()) => {}
            Err(Error::ExitDetected { .. }) => break,
            Err(e) => return Err(e),
        }
        if let Some(v) = state.tangent.as_mut() {
            let n = v.norm();
            log_norm += n.ln();
            *v /= n;
        }
        if k % stride == 0 {
            row(out, &state, log_norm)?;
            summary.rows += 1;
        }
    }
    summary.final_time = state.t;
    summary.exit = state.exit;
    Ok(summary)
}

/// Runs `method` at every epsilon of the sweep and fits the log-log slope.
pub fn sweep(cfg: &RunConfig, method: Method, epsilons: &[f64]) -> Result<SweepResult> {
    validate_epsilons(epsilons)?;
    crate::estimators::scaling_sweep_with(epsilons, |e| {
        let mut c = cfg.clone();
        c.run.epsilon = e;
        estimate(&c, method)
    })
}

/// Writes the sweep table `epsilon,lambda,stderr,method,included`.
pub fn write_sweep_csv<W: Write>(out: &mut W, result: &SweepResult) -> Result<()> {
    writeln!(out, "{SCHEMA_HEADER}")?;
    writeln!(out, "epsilon,lambda,stderr,method,included")?;
    for ((e, est), inc) in result.epsilons.iter().zip(&result.estimates).zip(&result.included) {
        writeln!(out, "{},{},{},{},{}", fmt_f64(*e), fmt_f64(est.value), fmt_f64(est.stderr), est.method, inc)?;
    }
    Ok(())
}

/// Writes one estimate as a table row with the sweep columns.
pub fn write_estimate_csv<W: Write>(out: &mut W, est: &LyapunovEstimate) -> Result<()> {
    writeln!(out, "{SCHEMA_HEADER}")?;
    writeln!(out, "epsilon,lambda,stderr,method")?;
    writeln!(out, "{},{},{},{}", fmt_f64(est.epsilon), fmt_f64(est.value), fmt_f64(est.stderr), est.method)?;
    Ok(())
}
