//! Top Lyapunov exponent estimators.
//!
//! * [`lyapunov_direct`] transports a tangent vector along the Marcus SDE and
//!   averages the growth of its logarithmic norm, renormalising periodically.
//! * [`lyapunov_khasminskii`] simulates the state together with the angle
//!   `theta` of the rescaled frame coordinates and time-averages the drift of
//!   `rho = log |w|`; the martingale parts of `rho` are tracked separately as a
//!   diagnostic only.
//! * [`lyapunov_theorem33`] evaluates the leading-order formula
//!   `eps^{2/3} int Sigma0 d mu` against an occupation measure.
//! * [`scaling_sweep`] fits `log lambda` against `log eps`.
//!
//! Replicates are independent random streams `(seed, index)`; they run in
//! parallel and are reduced in replicate order, so results do not depend on
//! the number of threads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::frame::{
    angular_jump, coefficient_gradients, frame_coefficients, frame_coordinates, graded_terms, sigma0, wrap_angle,
    CoefficientGradients, JumpQuadrature, JumpTerm, DEFAULT_BETA,
};
use crate::marcus::{check_exit, ExitFlag, MarcusSde, Stepper, StepperConfig, TrajectoryState};
use crate::model::{FrameCoefficients, PerturbedSystem};
use crate::noise::{stream, IncrementBatch, NoiseModel, Stream};
use crate::Vec2;

pub use crate::frame::compute_irho;

use std::f64::consts::TAU;

/// Estimation route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Khasminskii,
    Theorem33,
    Fpcircle,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Khasminskii => "khasminskii",
            Method::Theorem33 => "theorem33",
            Method::Fpcircle => "fpcircle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Method::Direct),
            "khasminskii" => Ok(Method::Khasminskii),
            "theorem33" => Ok(Method::Theorem33),
            "fpcircle" => Ok(Method::Fpcircle),
            other => Err(Error::InvalidParameter(format!(
                "unknown method `{other}` (expected direct, khasminskii, theorem33 or fpcircle)"
            ))),
        }
    }
}

/// Norm whose logarithmic growth the direct estimator averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TangentNorm {
    /// Euclidean norm of the tangent vector.
    #[default]
    Euclidean,
    /// Norm of the frame coordinates rescaled by `diag(eps^beta, 1)`.
    PwFrame,
}

/// Settings shared by the Monte Carlo estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub stepper: StepperConfig,
    pub horizon: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Steps between tangent renormalisations.
    pub renorm_interval: usize,
    /// Renormalise early once `|log |v||` exceeds this bound.
    pub renorm_log_bound: f64,
    /// Fraction of the horizon excluded from drift averages and occupation.
    pub burn_in: f64,
    pub beta: f64,
    pub x0: [f64; 2],
    /// Initial tangent; a uniformly random direction per replicate if unset.
    pub v0: Option<[f64; 2]>,
    pub tangent_norm: TangentNorm,
    pub theta_bins: usize,
    /// Bins per state coordinate of the occupation box (moving frames only).
    pub x_bins: usize,
    pub occupation_stride: usize,
    /// Angle table size for the jump drift term of constant frames.
    pub irho_table: usize,
    /// Steps between evaluations of the jump drift term for moving frames.
    pub irho_stride: usize,
    /// Restarts allowed per replicate after exits.
    pub max_restarts: usize,
    pub quadrature: JumpQuadrature,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            stepper: StepperConfig::default(),
            horizon: 1000.0,
            replicates: 16,
            seed: 0,
            renorm_interval: 10,
            renorm_log_bound: 20.0,
            burn_in: 0.1,
            beta: DEFAULT_BETA,
            x0: [1.0, 0.0],
            v0: None,
            tangent_norm: TangentNorm::Euclidean,
            theta_bins: 256,
            x_bins: 16,
            occupation_stride: 10,
            irho_table: 4096,
            irho_stride: 100,
            max_restarts: 10,
            quadrature: JumpQuadrature { z_nodes: 48, b_nodes: 8, check: false, tolerance: 1e-4 },
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.stepper.validate()?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon = {} must be positive", self.horizon));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.renorm_interval == 0 || self.occupation_stride == 0 || self.irho_stride == 0 {
            return bad("renorm_interval, occupation_stride and irho_stride must be at least 1".into());
        }
        if !(self.renorm_log_bound > 0.0) {
            return bad(format!("renorm_log_bound = {} must be positive", self.renorm_log_bound));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return bad(format!("burn_in = {} must lie in [0, 1)", self.burn_in));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta = {} must lie in (0, 1)", self.beta));
        }
        if self.theta_bins == 0 || self.x_bins == 0 || self.irho_table < 2 {
            return bad("theta_bins and x_bins must be >= 1 and irho_table >= 2".into());
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return bad("x0 must be finite".into());
        }
        if let Some(v) = self.v0 {
            if !(v[0].hypot(v[1]) > 0.0) {
                return bad("v0 must be a nonzero finite vector".into());
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        (self.horizon / self.stepper.dt).round() as u64
    }
}

/// Mean and standard error of a martingale time average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub mean: f64,
    pub stderr: f64,
}

/// A Lyapunov exponent estimate with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: Method,
    pub epsilon: f64,
    pub beta: f64,
    pub horizon: f64,
    pub replicates: usize,
    pub renorm_interval: usize,
    /// Trajectory restarts after exits, summed over replicates.
    pub restarts: usize,
    /// Set when restarts exceed 10% of the replicates or a replicate was
    /// discarded.
    pub unreliable: bool,
    pub per_replicate: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub martingale: Option<MartingaleCheck>,
    /// Residual of the stationary Fokker–Planck solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

/// Sample mean and standard error `sd / sqrt(n)`; zero error for `n = 1`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn initial_angle(rng: &mut Stream) -> f64 {
    rng.random::<f64>() * TAU
}

fn initial_tangent(cfg: &EstimatorConfig, rng: &mut Stream) -> Vec2 {
    match cfg.v0 {
        Some(v) => Vec2::new(v[0], v[1]),
        None => {
            let t = initial_angle(rng);
            Vec2::new(t.cos(), t.sin())
        }
    }
}

fn check_start<S: PerturbedSystem + ?Sized>(system: &S, x0: Vec2, cfg: &StepperConfig) -> Result<()> {
    match check_exit(system, x0, cfg) {
        ExitFlag::None => Ok(()),
        flag => Err(Error::ExitDetected { t: 0.0, flag }),
    }
}

struct ReplicateRun {
    sum: f64,
    time: f64,
    restarts: usize,
    martingale: f64,
    samples: OccupationSamples,
}

struct Aggregate {
    values: Vec<f64>,
    martingale: Vec<f64>,
    restarts: usize,
    discarded: usize,
}

fn aggregate(runs: &[ReplicateRun], min_time: f64) -> Result<Aggregate> {
    let mut agg = Aggregate { values: Vec::new(), martingale: Vec::new(), restarts: 0, discarded: 0 };
    for run in runs {
        agg.restarts += run.restarts;
        if run.time >= min_time && run.time > 0.0 {
            agg.values.push(run.sum / run.time);
            agg.martingale.push(run.martingale / run.time);
        } else {
            agg.discarded += 1;
        }
    }
    if agg.values.is_empty() {
        return Err(Error::AllTrajectoriesExited { replicates: runs.len() });
    }
    Ok(agg)
}

fn tangent_measure<S: PerturbedSystem + ?Sized>(
    system: &S,
    norm: TangentNorm,
    scale: f64,
    x: Vec2,
    v: Vec2,
    tol: f64,
) -> Result<f64> {
    match norm {
        TangentNorm::Euclidean => Ok(v.norm()),
        TangentNorm::PwFrame => {
            let w = frame_coordinates(system, x, v, tol)?;
            Ok(Vec2::new(scale * w.x, w.y).norm())
        }
    }
}

fn direct_replicate<S: PerturbedSystem + ?Sized>(
    sde: &MarcusSde<'_, S>,
    cfg: &EstimatorConfig,
    replicate: u64,
) -> Result<ReplicateRun> {
    let system = sde.system;
    let steps = cfg.steps();
    let dt = cfg.stepper.dt;
    let x0 = Vec2::new(cfg.x0[0], cfg.x0[1]);
    let linear = system.is_linear();
    let scale = sde.epsilon.powf(cfg.beta);
    let tol = cfg.stepper.tol_crit;
    let mut stepper = Stepper::new(*sde, cfg.stepper)?;
    let mut sum = 0.0;
    let mut counted: u64 = 0;
    let mut done: u64 = 0;
    let mut restarts = 0;
    let mut attempt: u64 = 0;
    while done < steps {
        let mut rng = stream(cfg.seed, replicate + cfg.replicates as u64 * attempt);
        let v0 = initial_tangent(cfg, &mut rng);
        let mut state = TrajectoryState::new(x0, Some(v0));
        let n0 = tangent_measure(system, cfg.tangent_norm, scale, x0, v0, tol)?;
        state.tangent = Some(v0 / n0);
        let mut since: u64 = 0;
        let exited = loop {
            if done == steps {
                break false;
            }
            done += 1;
            match stepper.advance(&mut state, &mut rng) {
                Ok(()) => {}
                Err(Error::ExitDetected { .. }) => break true,
                Err(e) => return Err(e),
            }
            since += 1;
            let v = state.tangent.expect("tangent is transported");
            let n = match tangent_measure(system, cfg.tangent_norm, scale, state.x, v, tol) {
                Ok(n) => n,
                Err(Error::CriticalPoint { .. }) => break true,
                Err(e) => return Err(e),
            };
            let ln = n.ln();
            if !ln.is_finite() {
                break true;
            }
            if since as usize >= cfg.renorm_interval || ln.abs() > cfg.renorm_log_bound || done == steps {
                sum += ln;
                counted += since;
                since = 0;
                state.tangent = Some(v / n);
                if linear {
                    let xn = state.x.norm();
                    if xn > 0.0 {
                        state.x /= xn;
                    }
                }
            }
        };
        if exited {
            restarts += 1;
            attempt += 1;
            if restarts > cfg.max_restarts {
                break;
            }
        }
    }
    Ok(ReplicateRun {
        sum,
        time: counted as f64 * dt,
        restarts,
        martingale: 0.0,
        samples: OccupationSamples::None,
    })
}

/// Direct estimate `lim (1/t) log |v_t|` from tangent transport.
///
/// Trajectories that exit are restarted from `x0` with a fresh stream; only
/// time up to the last renormalisation before an exit is counted, and a
/// replicate is kept when it accumulates at least half the horizon.
pub fn lyapunov_direct<S: PerturbedSystem + ?Sized>(
    system: &S,
    epsilon: f64,
    noise: NoiseModel,
    cfg: &EstimatorConfig,
) -> Result<LyapunovEstimate> {
    cfg.validate()?;
    let x0 = Vec2::new(cfg.x0[0], cfg.x0[1]);
    check_start(system, x0, &cfg.stepper)?;
    if cfg.tangent_norm == TangentNorm::PwFrame && epsilon <= 0.0 {
        return Err(Error::InvalidParameter("the rescaled-frame norm needs epsilon > 0".into()));
    }
    let sde = MarcusSde::new(system, epsilon, noise)?;
    let runs: Vec<ReplicateRun> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| direct_replicate(&sde, cfg, r))
        .collect::<Result<_>>()?;
    let agg = aggregate(&runs, 0.5 * cfg.horizon)?;
    let (value, stderr) = mean_stderr(&agg.values);
    Ok(LyapunovEstimate {
        value,
        stderr,
        method: Method::Direct,
        epsilon,
        beta: cfg.beta,
        horizon: cfg.horizon,
        replicates: cfg.replicates,
        renorm_interval: cfg.renorm_interval,
        restarts: agg.restarts,
        unreliable: unreliable(agg.restarts, agg.discarded, cfg.replicates),
        per_replicate: agg.values,
        martingale: None,
        residual: None,
    })
}

fn unreliable(restarts: usize, discarded: usize, replicates: usize) -> bool {
    restarts as f64 > 0.1 * replicates as f64 || discarded > 0
}

/// Occupation samples of one replicate.
enum OccupationSamples {
    None,
    /// Angle-bin counts (constant frames, where the state does not matter).
    Angles(Vec<u64>),
    /// `(x, angle bin)` pairs (moving frames).
    States(Vec<(Vec2, u32)>),
}

/// One cell of an occupation measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupationCell {
    /// Cell index within its grid; cells with equal index share a center.
    pub index: usize,
    pub x: Vec2,
    pub theta: f64,
    pub mass: f64,
}

/// Empirical occupation measure over `(x, theta)` cells with total mass 1.
/// Only cells with positive mass are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationMeasure {
    pub theta_bins: usize,
    pub x_bins: usize,
    pub cells: Vec<OccupationCell>,
}

impl OccupationMeasure {
    /// Unit mass at a single point.
    pub fn point(x: Vec2, theta: f64) -> Self {
        Self { theta_bins: 1, x_bins: 1, cells: vec![OccupationCell { index: 0, x, theta, mass: 1.0 }] }
    }

    /// Angle-only measure with masses proportional to `weights` at the nodes
    /// `2 pi j / n`, all at state `x`.
    pub fn from_angle_weights(x: Vec2, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().filter(|w| **w > 0.0).sum();
        if !(total > 0.0) {
            return Err(Error::EmptyMeasure);
        }
        let n = weights.len();
        let cells = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(j, w)| OccupationCell { index: j, x, theta: TAU * j as f64 / n as f64, mass: w / total })
            .collect();
        Ok(Self { theta_bins: n, x_bins: 1, cells })
    }

    pub fn total_mass(&self) -> f64 {
        self.cells.iter().map(|c| c.mass).sum()
    }

    /// Angle marginal on `theta_bins` bins.
    pub fn theta_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.theta_bins];
        for c in &self.cells {
            out[c.index % self.theta_bins] += c.mass;
        }
        out
    }
}

/// Grid shared by the per-replicate occupation measures of one run.
struct OccupationGrid {
    theta_bins: usize,
    x_bins: usize,
    lo: Vec2,
    width: Vec2,
    fixed_x: Option<Vec2>,
}

impl OccupationGrid {
    fn theta_bin(theta_bins: usize, theta: f64) -> u32 {
        ((wrap_angle(theta) / TAU * theta_bins as f64) as usize).min(theta_bins - 1) as u32
    }

    fn theta_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * TAU / self.theta_bins as f64
    }

    fn x_index(&self, x: Vec2) -> usize {
        let cell = |v: f64, lo: f64, w: f64| (((v - lo) / w * self.x_bins as f64) as usize).min(self.x_bins - 1);
        cell(x.x, self.lo.x, self.width.x) * self.x_bins + cell(x.y, self.lo.y, self.width.y)
    }

    fn center(&self, index: usize) -> (Vec2, f64) {
        let theta = self.theta_center(index % self.theta_bins);
        let xi = index / self.theta_bins;
        let x = match self.fixed_x {
            Some(x) => x,
            None => {
                let (ix, iy) = (xi / self.x_bins, xi % self.x_bins);
                let n = self.x_bins as f64;
                Vec2::new(
                    self.lo.x + (ix as f64 + 0.5) * self.width.x / n,
                    self.lo.y + (iy as f64 + 0.5) * self.width.y / n,
                )
            }
        };
        (x, theta)
    }

    fn measure(&self, counts: &BTreeMap<usize, u64>) -> Result<OccupationMeasure> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(Error::EmptyMeasure);
        }
        let cells = counts
            .iter()
            .map(|(&index, &n)| {
                let (x, theta) = self.center(index);
                OccupationCell { index, x, theta, mass: n as f64 / total as f64 }
            })
            .collect();
        let x_bins = if self.fixed_x.is_some() { 1 } else { self.x_bins };
        Ok(OccupationMeasure { theta_bins: self.theta_bins, x_bins, cells })
    }
}

fn build_occupation(
    runs: &[ReplicateRun],
    theta_bins: usize,
    x_bins: usize,
    x0: Vec2,
) -> (OccupationGrid, Vec<BTreeMap<usize, u64>>) {
    let mut lo = Vec2::repeat(f64::INFINITY);
    let mut hi = Vec2::repeat(f64::NEG_INFINITY);
    let mut fixed = true;
    for run in runs {
        if let OccupationSamples::States(s) = &run.samples {
            fixed = false;
            for (x, _) in s {
                lo = lo.inf(x);
                hi = hi.sup(x);
            }
        }
    }
    let width = if lo.x.is_finite() {
        (hi - lo).map(|w| if w > 0.0 { w * (1.0 + 1e-9) } else { 1.0 })
    } else {
        lo = Vec2::zeros();
        Vec2::repeat(1.0)
    };
    let grid = OccupationGrid { theta_bins, x_bins, lo, width, fixed_x: fixed.then_some(x0) };
    let counts = runs
        .iter()
        .map(|run| {
            let mut m = BTreeMap::new();
            match &run.samples {
                OccupationSamples::None => {}
                OccupationSamples::Angles(c) => {
                    for (j, &n) in c.iter().enumerate() {
                        if n > 0 {
                            m.insert(j, n);
                        }
                    }
                }
                OccupationSamples::States(s) => {
                    for (x, b) in s {
                        *m.entry(grid.x_index(*x) * theta_bins + *b as usize).or_insert(0) += 1;
                    }
                }
            }
            m
        })
        .collect();
    (grid, counts)
}

/// Output of a Khasminskii run: the estimate and the occupation measures of
/// `(x, theta)` after burn-in, merged and per replicate on a shared grid.
#[derive(Debug, Clone)]
pub struct KhasminskiiRun {
    pub estimate: LyapunovEstimate,
    pub occupation: OccupationMeasure,
    pub replicate_occupations: Vec<OccupationMeasure>,
}

/// Jump drift term `I_rho` along the path.
enum IrhoSource {
    Zero,
    /// Periodic angle table (constant frames).
    Table(Vec<f64>),
    /// Evaluated by quadrature every `irho_stride` steps (moving frames).
    Sampled,
}

impl IrhoSource {
    fn table_lookup(table: &[f64], theta: f64) -> f64 {
        let n = table.len();
        let u = wrap_angle(theta) / TAU * n as f64;
        let i = (u.floor() as usize).min(n - 1);
        let f = u - i as f64;
        table[i] * (1.0 - f) + table[(i + 1) % n] * f
    }
}

fn build_irho<S: PerturbedSystem + ?Sized>(
    system: &S,
    noise: &NoiseModel,
    epsilon: f64,
    cfg: &EstimatorConfig,
) -> Result<IrhoSource> {
    let Some(m) = noise.jumps.as_ref() else {
        return Ok(IrhoSource::Zero);
    };
    if epsilon == 0.0 || m.c_alpha == 0.0 {
        return Ok(IrhoSource::Zero);
    }
    if system.constant_frame().is_none() {
        return Ok(IrhoSource::Sampled);
    }
    let x0 = Vec2::new(cfg.x0[0], cfg.x0[1]);
    let n = cfg.irho_table;
    let table = (0..n)
        .into_par_iter()
        .map(|j| {
            let theta = TAU * j as f64 / n as f64;
            compute_irho(system, Some(m), x0, theta, epsilon, cfg.beta, &cfg.quadrature, &cfg.stepper)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(IrhoSource::Table(table))
}

/// Frame data at a state: constant for constant frames.
fn frame_data<S: PerturbedSystem + ?Sized>(
    system: &S,
    fixed: &Option<(FrameCoefficients, CoefficientGradients)>,
    x: Vec2,
    tol: f64,
) -> Result<(FrameCoefficients, CoefficientGradients)> {
    match fixed {
        Some(f) => Ok(f.clone()),
        None => Ok((frame_coefficients(system, x, tol)?, coefficient_gradients(system, x, tol)?)),
    }
}

#[allow(clippy::too_many_arguments)]
fn khasminskii_replicate<S: PerturbedSystem + ?Sized>(
    sde: &MarcusSde<'_, S>,
    cfg: &EstimatorConfig,
    irho: &IrhoSource,
    replicate: u64,
) -> Result<ReplicateRun> {
    let system = sde.system;
    let eps = sde.epsilon;
    let beta = cfg.beta;
    let steps = cfg.steps();
    let burn = (cfg.burn_in * steps as f64).round() as u64;
    let dt = cfg.stepper.dt;
    let tol = cfg.stepper.tol_crit;
    let q = sde.noise.gaussian_rate();
    let eb = eps.powf(beta);
    let d = system.noise_dim();
    let x0 = Vec2::new(cfg.x0[0], cfg.x0[1]);
    let fixed = system.constant_frame().map(|c| {
        let g = CoefficientGradients::zero(c.fields.len());
        (c, g)
    });
    let stepper = Stepper::new(*sde, cfg.stepper)?;
    let mut batch = IncrementBatch::quiet(dt, d);
    let mut samples = if fixed.is_some() {
        OccupationSamples::Angles(vec![0; cfg.theta_bins])
    } else {
        OccupationSamples::States(Vec::new())
    };
    let (mut drift, mut mart, mut acc_steps) = (0.0, 0.0, 0u64);
    let mut restarts = 0;
    let mut attempt: u64 = 0;
    let mut done: u64 = 0;
    let mut db: SmallVec<[f64; 2]> = SmallVec::from_elem(0.0, d);
    let mut fields: SmallVec<[Vec2; 2]> = SmallVec::from_elem(Vec2::zeros(), d);
    'outer: while done < steps {
        let mut rng = stream(cfg.seed, replicate + cfg.replicates as u64 * attempt);
        let mut state = TrajectoryState::new(x0, None);
        let mut theta = match cfg.v0 {
            Some(v) => {
                let w = frame_coordinates(system, x0, Vec2::new(v[0], v[1]), tol)?;
                (w.y).atan2(eb * w.x)
            }
            None => initial_angle(&mut rng),
        };
        let mut irho_held = 0.0;
        while done < steps {
            let accumulate = done >= burn;
            let step_index = done;
            done += 1;
            let (coeffs, grads) = match frame_data(system, &fixed, state.x, tol) {
                Ok(f) => f,
                Err(Error::CriticalPoint { .. }) => {
                    restarts += 1;
                    attempt += 1;
                    if restarts > cfg.max_restarts {
                        break 'outer;
                    }
                    continue 'outer;
                }
                Err(e) => return Err(e),
            };
            for (k, f) in fields.iter_mut().enumerate() {
                *f = system.field(k, state.x);
            }
            let g = graded_terms(&coeffs, &grads, &fields, theta, eps, beta);
            let (s, c) = theta.sin_cos();

            stepper.sampler().sample_gaussian(&mut db, &mut rng);
            let mut theta_new = theta - eb * coeffs.a * s * s * dt;
            let mut p = eb * coeffs.a * s * c;
            let mut dm = 0.0;
            for k in 0..d {
                theta_new += 0.5 * q * g.sigma1_wz(k) * dt + g.sigma1(k) * db[k];
                p += 0.5 * q * g.sigma2_wz(k);
                dm += g.sigma2(k) * db[k];
            }
            let i_rho = match irho {
                IrhoSource::Zero => 0.0,
                IrhoSource::Table(t) => IrhoSource::table_lookup(t, theta),
                IrhoSource::Sampled => {
                    if accumulate && (step_index - burn) % cfg.irho_stride as u64 == 0 {
                        irho_held = compute_irho(
                            system,
                            sde.noise.jumps.as_ref(),
                            state.x,
                            theta,
                            eps,
                            beta,
                            &cfg.quadrature,
                            &cfg.stepper,
                        )?;
                    }
                    irho_held
                }
            };
            p += i_rho;
            dm -= i_rho * dt;

            stepper.continuous(&mut state, &db);
            let jumps: SmallVec<[SmallVec<[f64; 2]>; 2]> = if d == 1 {
                let z = stepper.sampler().sample_jump_sum(&mut rng);
                if z != 0.0 {
                    smallvec::smallvec![smallvec::smallvec![z]]
                } else {
                    SmallVec::new()
                }
            } else {
                stepper.sampler().sample_into(&mut batch, dt, &mut rng);
                batch.jumps.iter().map(|j| SmallVec::from_vec(j.mark(d))).collect()
            };
            let mut exited = false;
            for z in &jumps {
                match angular_jump(system, eps, beta, z, state.x, theta_new, &cfg.stepper) {
                    Ok(j) => {
                        theta_new = j.theta;
                        dm += j.log_growth;
                        state.x = j.x;
                    }
                    Err(Error::FlowEscape { .. }) | Err(Error::CriticalPoint { .. }) => {
                        exited = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if !exited {
                match stepper.finish(&mut state) {
                    Ok(()) => {}
                    Err(Error::ExitDetected { .. }) => exited = true,
                    Err(e) => return Err(e),
                }
            }
            if exited {
                restarts += 1;
                attempt += 1;
                if restarts > cfg.max_restarts {
                    break 'outer;
                }
                continue 'outer;
            }
            theta = wrap_angle(theta_new);
            if accumulate {
                drift += p * dt;
                mart += dm;
                acc_steps += 1;
                if (step_index - burn) % cfg.occupation_stride as u64 == 0 {
                    let bin = OccupationGrid::theta_bin(cfg.theta_bins, theta);
                    match &mut samples {
                        OccupationSamples::Angles(c) => c[bin as usize] += 1,
                        OccupationSamples::States(v) => v.push((state.x, bin)),
                        OccupationSamples::None => {}
                    }
                }
            }
        }
    }
    Ok(ReplicateRun { sum: drift, time: acc_steps as f64 * dt, restarts, martingale: mart, samples })
}

/// Khasminskii estimate: the time average of the drift of `rho` along the
/// joint `(x, theta)` process of the frame coordinates rescaled by
/// `diag(eps^beta, 1)`.
pub fn lyapunov_khasminskii<S: PerturbedSystem + ?Sized>(
    system: &S,
    epsilon: f64,
    noise: NoiseModel,
    cfg: &EstimatorConfig,
) -> Result<KhasminskiiRun> {
    cfg.validate()?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon = {epsilon} must be positive for the rescaled frame"
        )));
    }
    let x0 = Vec2::new(cfg.x0[0], cfg.x0[1]);
    check_start(system, x0, &cfg.stepper)?;
    let sde = MarcusSde::new(system, epsilon, noise)?;
    let irho = build_irho(system, &noise, epsilon, cfg)?;
    let runs: Vec<ReplicateRun> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| khasminskii_replicate(&sde, cfg, &irho, r))
        .collect::<Result<_>>()?;
    let agg = aggregate(&runs, 0.5 * cfg.horizon * (1.0 - cfg.burn_in))?;
    let (value, stderr) = mean_stderr(&agg.values);
    let (mmean, mse) = mean_stderr(&agg.martingale);
    let (grid, counts) = build_occupation(&runs, cfg.theta_bins, cfg.x_bins, x0);
    let mut merged = BTreeMap::new();
    for c in &counts {
        for (&k, &n) in c {
            *merged.entry(k).or_insert(0) += n;
        }
    }
    let occupation = grid.measure(&merged)?;
    let replicate_occupations = counts
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| grid.measure(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(KhasminskiiRun {
        estimate: LyapunovEstimate {
            value,
            stderr,
            method: Method::Khasminskii,
            epsilon,
            beta: cfg.beta,
            horizon: cfg.horizon,
            replicates: cfg.replicates,
            renorm_interval: cfg.renorm_interval,
            restarts: agg.restarts,
            unreliable: unreliable(agg.restarts, agg.discarded, cfg.replicates),
            per_replicate: agg.values,
            martingale: Some(MartingaleCheck { mean: mmean, stderr: mse }),
            residual: None,
        },
        occupation,
        replicate_occupations,
    })
}

fn sigma0_cells<S: PerturbedSystem + ?Sized>(
    system: &S,
    noise: &NoiseModel,
    epsilon: f64,
    cells: &[OccupationCell],
    term: JumpTerm,
    quad: &JumpQuadrature,
    cfg: &StepperConfig,
) -> Result<Vec<f64>> {
    cells
        .par_iter()
        .map(|c| sigma0(system, noise, c.x, c.theta, epsilon, term, quad, cfg))
        .collect()
}

/// Leading-order value `eps^{2/3} sum_cells mass * Sigma0(center)`.
pub fn lyapunov_theorem33<S: PerturbedSystem + ?Sized>(
    system: &S,
    noise: &NoiseModel,
    epsilon: f64,
    occupation: &OccupationMeasure,
    term: JumpTerm,
    quad: &JumpQuadrature,
    cfg: &StepperConfig,
) -> Result<f64> {
    if occupation.cells.is_empty() || !(occupation.total_mass() > 0.0) {
        return Err(Error::EmptyMeasure);
    }
    let values = sigma0_cells(system, noise, epsilon, &occupation.cells, term, quad, cfg)?;
    let sum: f64 = occupation.cells.iter().zip(&values).map(|(c, v)| c.mass * v).sum();
    Ok(epsilon.powf(2.0 / 3.0) * sum)
}

/// Leading-order estimate from a Khasminskii run with `beta = 2/3`: the merged
/// occupation gives the value, the per-replicate occupations the error bar.
pub fn theorem33_estimate<S: PerturbedSystem + ?Sized>(
    system: &S,
    noise: &NoiseModel,
    run: &KhasminskiiRun,
    term: JumpTerm,
    quad: &JumpQuadrature,
    cfg: &StepperConfig,
) -> Result<LyapunovEstimate> {
    let base = &run.estimate;
    if (base.beta - DEFAULT_BETA).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "the leading-order formula needs occupation in the beta = 2/3 frame, got beta = {}",
            base.beta
        )));
    }
    let eps = base.epsilon;
    let cells = &run.occupation.cells;
    if cells.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let values = sigma0_cells(system, noise, eps, cells, term, quad, cfg)?;
    let by_index: BTreeMap<usize, f64> = cells.iter().map(|c| c.index).zip(values.iter().copied()).collect();
    let scale = eps.powf(2.0 / 3.0);
    let value = scale * cells.iter().zip(&values).map(|(c, v)| c.mass * v).sum::<f64>();
    let per_replicate: Vec<f64> = run
        .replicate_occupations
        .iter()
        .map(|m| scale * m.cells.iter().map(|c| c.mass * by_index[&c.index]).sum::<f64>())
        .collect();
    let (_, stderr) = mean_stderr(&per_replicate);
    Ok(LyapunovEstimate {
        value,
        stderr,
        method: Method::Theorem33,
        martingale: None,
        per_replicate,
        ..base.clone()
    })
}

/// Log-log fit of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub epsilons: Vec<f64>,
    pub estimates: Vec<LyapunovEstimate>,
    /// Whether each estimate entered the fit (positive values only).
    pub included: Vec<bool>,
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Checks that a sweep has at least four positive, strictly increasing values
/// spanning a factor of at least four.
pub fn validate_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "a sweep needs at least 4 epsilon values, got {}",
            epsilons.len()
        )));
    }
    if !epsilons.iter().all(|e| *e > 0.0 && e.is_finite()) {
        return Err(Error::InvalidParameter("sweep epsilons must be positive".into()));
    }
    if !epsilons.windows(2).all(|w| w[1] > w[0]) {
        return Err(Error::InvalidParameter("sweep epsilons must be strictly increasing".into()));
    }
    if epsilons[epsilons.len() - 1] < 4.0 * epsilons[0] {
        return Err(Error::InvalidParameter("sweep epsilons must span at least a factor of 4".into()));
    }
    Ok(())
}

/// Least-squares line `y = slope x + intercept` and its RMS residual.
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    (slope, intercept, (rss / n).sqrt())
}

/// Runs `estimate` for each epsilon and fits `log lambda` on `log eps` over
/// the positive estimates; at least three must remain.
pub fn scaling_sweep_with<F>(epsilons: &[f64], mut estimate: F) -> Result<SweepResult>
where
    F: FnMut(f64) -> Result<LyapunovEstimate>,
{
    validate_epsilons(epsilons)?;
    let estimates = epsilons.iter().map(|&e| estimate(e)).collect::<Result<Vec<_>>>()?;
    let included: Vec<bool> = estimates.iter().map(|e| e.value > 0.0 && e.value.is_finite()).collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = epsilons
        .iter()
        .zip(&estimates)
        .zip(&included)
        .filter(|(_, inc)| **inc)
        .map(|((e, est), _)| (e.ln(), est.value.ln()))
        .unzip();
    if lx.len() < 3 {
        let (eps, est) = epsilons
            .iter()
            .zip(&estimates)
            .find(|(_, est)| !(est.value > 0.0))
            .expect("some estimate is non-positive");
        return Err(Error::NonPositiveEstimate { epsilon: *eps, value: est.value });
    }
    let (slope, intercept, residual) = fit_line(&lx, &ly);
    Ok(SweepResult { epsilons: epsilons.to_vec(), estimates, included, slope, intercept, residual })
}

/// Scaling sweep with the direct estimator.
pub fn scaling_sweep<S: PerturbedSystem + ?Sized>(
    system: &S,
    noise: NoiseModel,
    epsilons: &[f64],
    cfg: &EstimatorConfig,
) -> Result<SweepResult> {
    scaling_sweep_with(epsilons, |e| lyapunov_direct(system, e, noise, cfg))
}
