//! Marcus-canonical SDEs `dx = U1(x) dt + eps * sum_k V_k(x) <> dL^k`.
//!
//! Continuous motion is stepped in Itô form: the Hamiltonian drift by a
//! classical fourth-order Runge–Kutta step, the Stratonovich correction
//! `1/2 eps^2 q sum_k DV_k V_k` as an Euler increment, and the Brownian term by
//! Euler–Maruyama. Each jump `z` then moves the state by the time-one flow
//! `xi(z)` of `eps * sum_k z_k V_k`.
//!
//! The Itô form also carries the compensator drift
//! `int [xi(z)(x) - x - eps z V(x)] nu(dz)`, while its jump part is the
//! compensated integral `int [xi(z)(x) - x] (N - nu)(dz)`. Their `nu`-parts add
//! up to `-eps int z nu(dz) V(x)`, which is zero for a symmetric measure, so the
//! stepper applies the raw jumps and no drift; [`compensator_drift`] is kept as
//! a diagnostic.

use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{Error, Result};
use crate::model::{fd_step, PerturbedSystem};
use crate::noise::{IncrementBatch, IncrementSampler, JumpMeasureSpec, JumpRule, NoiseModel};
use crate::{Mat2, Vec2};

/// Step size and tolerances of the integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepperConfig {
    pub dt: f64,
    pub flow_substeps: usize,
    pub tol_crit: f64,
    pub bound_explode: f64,
    pub compensator_quadrature_nodes: usize,
}

impl Default for StepperConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            flow_substeps: 16,
            tol_crit: 1e-6,
            bound_explode: 1e8,
            compensator_quadrature_nodes: 32,
        }
    }
}

impl StepperConfig {
    pub fn with_dt(dt: f64) -> Self {
        Self { dt, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt = {} must be positive", self.dt)));
        }
        if self.flow_substeps == 0 {
            return Err(Error::InvalidParameter("flow_substeps must be at least 1".into()));
        }
        if !(self.tol_crit >= 0.0) || !(self.bound_explode > 0.0) {
            return Err(Error::InvalidParameter("tol_crit must be >= 0 and bound_explode > 0".into()));
        }
        if self.compensator_quadrature_nodes == 0 {
            return Err(Error::InvalidParameter("compensator_quadrature_nodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitFlag {
    None,
    CriticalPoint,
    Explosion,
}

/// State of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub t: f64,
    pub x: Vec2,
    pub tangent: Option<Vec2>,
    pub exit: ExitFlag,
}

impl TrajectoryState {
    pub fn new(x: Vec2, tangent: Option<Vec2>) -> Self {
        Self { t: 0.0, x, tangent, exit: ExitFlag::None }
    }
}

/// A perturbed Hamiltonian system with its noise scale and driving noise.
#[derive(Debug)]
pub struct MarcusSde<'a, S: ?Sized> {
    pub system: &'a S,
    pub epsilon: f64,
    pub noise: NoiseModel,
}

impl<S: ?Sized> Clone for MarcusSde<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S: ?Sized> Copy for MarcusSde<'_, S> {}

impl<'a, S: PerturbedSystem + ?Sized> MarcusSde<'a, S> {
    pub fn new(system: &'a S, epsilon: f64, noise: NoiseModel) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be >= 0")));
        }
        if let Some(m) = &noise.jumps {
            m.validate()?;
            if m.dimension != system.noise_dim() {
                return Err(Error::InvalidMeasure(format!(
                    "measure dimension {} does not match {} driving components",
                    m.dimension,
                    system.noise_dim()
                )));
            }
        }
        Ok(Self { system, epsilon, noise })
    }
}

/// Exit classification of a point.
pub fn check_exit<S: PerturbedSystem + ?Sized>(system: &S, x: Vec2, cfg: &StepperConfig) -> ExitFlag {
    if !(x.x.is_finite() && x.y.is_finite()) || x.norm() > cfg.bound_explode {
        ExitFlag::Explosion
    } else if system.singular_distance(x) < cfg.tol_crit {
        ExitFlag::CriticalPoint
    } else {
        ExitFlag::None
    }
}

fn combined_field<S: PerturbedSystem + ?Sized>(system: &S, eps: f64, z: &[f64], x: Vec2) -> Vec2 {
    z.iter()
        .enumerate()
        .filter(|(_, zk)| **zk != 0.0)
        .fold(Vec2::zeros(), |acc, (k, zk)| acc + eps * zk * system.field(k, x))
}

fn combined_jacobian<S: PerturbedSystem + ?Sized>(system: &S, eps: f64, z: &[f64], x: Vec2) -> Mat2 {
    z.iter()
        .enumerate()
        .filter(|(_, zk)| **zk != 0.0)
        .fold(Mat2::zeros(), |acc, (k, zk)| acc + eps * zk * system.field_jacobian(k, x))
}

/// Time-one flow of `eps * sum_k z_k V_k` from `x` and its Jacobian, by RK4
/// with `substeps` fixed steps, ignoring any closed form the system offers.
pub fn generic_jump_flow<S: PerturbedSystem + ?Sized>(
    system: &S,
    eps: f64,
    z: &[f64],
    x: Vec2,
    cfg: &StepperConfig,
) -> Result<(Vec2, Mat2)> {
    let n = cfg.flow_substeps.max(1);
    let h = 1.0 / n as f64;
    let mut y = x;
    let mut j = Mat2::identity();
    let f = |y: Vec2| combined_field(system, eps, z, y);
    let g = |y: Vec2, j: Mat2| combined_jacobian(system, eps, z, y) * j;
    for i in 0..n {
        let k1 = f(y);
        let l1 = g(y, j);
        let y2 = y + 0.5 * h * k1;
        let j2 = j + 0.5 * h * l1;
        let k2 = f(y2);
        let l2 = g(y2, j2);
        let y3 = y + 0.5 * h * k2;
        let j3 = j + 0.5 * h * l2;
        let k3 = f(y3);
        let l3 = g(y3, j3);
        let y4 = y + h * k3;
        let j4 = j + h * l3;
        let k4 = f(y4);
        let l4 = g(y4, j4);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        j += h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
        if check_exit(system, y, cfg) != ExitFlag::None {
            return Err(Error::FlowEscape { tau: (i + 1) as f64 * h });
        }
    }
    Ok((y, j))
}

fn jump_flow<S: PerturbedSystem + ?Sized>(
    system: &S,
    eps: f64,
    z: &[f64],
    x: Vec2,
    cfg: &StepperConfig,
) -> Result<(Vec2, Mat2)> {
    if z.iter().all(|zk| *zk == 0.0) || eps == 0.0 {
        return Ok((x, Mat2::identity()));
    }
    match system.exact_jump_flow(eps, z, x) {
        Some(pair) => Ok(pair),
        None => generic_jump_flow(system, eps, z, x, cfg),
    }
}

/// The Marcus jump map `xi(z)(x)`.
pub fn marcus_jump_map<S: PerturbedSystem + ?Sized>(
    system: &S,
    eps: f64,
    z: &[f64],
    x: Vec2,
    cfg: &StepperConfig,
) -> Result<Vec2> {
    jump_flow(system, eps, z, x, cfg).map(|(y, _)| y)
}

/// Jacobian `D xi(z)(x)` of the Marcus jump map.
pub fn marcus_jump_jacobian<S: PerturbedSystem + ?Sized>(
    system: &S,
    eps: f64,
    z: &[f64],
    x: Vec2,
    cfg: &StepperConfig,
) -> Result<Mat2> {
    jump_flow(system, eps, z, x, cfg).map(|(_, j)| j)
}

/// Stratonovich-to-Itô drift `1/2 eps^2 q sum_k DV_k V_k` for Gaussian
/// variance rate `q`.
pub fn ito_correction<S: PerturbedSystem + ?Sized>(system: &S, eps: f64, q: f64, x: Vec2) -> Vec2 {
    if eps == 0.0 || q == 0.0 {
        return Vec2::zeros();
    }
    (0..system.noise_dim()).fold(Vec2::zeros(), |acc, k| {
        acc + system.field_jacobian(k, x) * system.field(k, x)
    }) * (0.5 * eps * eps * q)
}

/// The Itô compensator drift `int [xi(z)(x) - x - eps z V(x)] nu(dz)`, summed
/// over the driving components, by symmetric Gauss quadrature in `z`.
pub fn compensator_drift<S: PerturbedSystem + ?Sized>(
    system: &S,
    eps: f64,
    measure: &JumpMeasureSpec,
    x: Vec2,
    cfg: &StepperConfig,
) -> Result<Vec2> {
    let rule = JumpRule::new(measure, measure.floor, measure.cutoff, cfg.compensator_quadrature_nodes);
    let d = system.noise_dim();
    let mut total = Vec2::zeros();
    let mut z: SmallVec<[f64; 2]> = smallvec![0.0; d];
    for k in 0..d {
        let vk = system.field(k, x);
        for &(r, w) in rule.nodes() {
            for s in [r, -r] {
                z[k] = s;
                let y = marcus_jump_map(system, eps, &z, x, cfg)?;
                total += w * (y - x - eps * s * vk);
            }
        }
        z[k] = 0.0;
    }
    Ok(total)
}

fn rk4_drift<S: PerturbedSystem + ?Sized>(system: &S, x: Vec2, v: Option<Vec2>, dt: f64) -> (Vec2, Option<Vec2>) {
    let f = |x: Vec2| system.hamiltonian_field(x);
    match v {
        None => {
            let k1 = f(x);
            let k2 = f(x + 0.5 * dt * k1);
            let k3 = f(x + 0.5 * dt * k2);
            let k4 = f(x + dt * k3);
            (x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), None)
        }
        Some(v) => {
            let g = |x: Vec2, v: Vec2| system.hamiltonian_field_jacobian(x) * v;
            let k1 = f(x);
            let l1 = g(x, v);
            let (x2, v2) = (x + 0.5 * dt * k1, v + 0.5 * dt * l1);
            let k2 = f(x2);
            let l2 = g(x2, v2);
            let (x3, v3) = (x + 0.5 * dt * k2, v + 0.5 * dt * l2);
            let k3 = f(x3);
            let l3 = g(x3, v3);
            let (x4, v4) = (x + dt * k3, v + dt * l3);
            let k4 = f(x4);
            let l4 = g(x4, v4);
            (
                x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
                Some(v + dt / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4)),
            )
        }
    }
}

/// Continuous part of one step: RK4 drift, Euler Itô correction, then the
/// Euler–Maruyama Brownian increment `db` (already scaled to variance `q dt`).
fn continuous_part<S: PerturbedSystem + ?Sized>(
    sde: &MarcusSde<'_, S>,
    correction: bool,
    state: &mut TrajectoryState,
    dt: f64,
    db: &[f64],
) {
    let sys = sde.system;
    let eps = sde.epsilon;
    let x0 = state.x;
    let (mut x, mut v) = rk4_drift(sys, x0, state.tangent, dt);
    if correction {
        let q = sde.noise.gaussian_rate();
        x += dt * ito_correction(sys, eps, q, x0);
        if let Some(v) = v.as_mut() {
            let h = fd_step(x0);
            let dx = (ito_correction(sys, eps, q, x0 + Vec2::new(h, 0.0))
                - ito_correction(sys, eps, q, x0 - Vec2::new(h, 0.0)))
                / (2.0 * h);
            let dy = (ito_correction(sys, eps, q, x0 + Vec2::new(0.0, h))
                - ito_correction(sys, eps, q, x0 - Vec2::new(0.0, h)))
                / (2.0 * h);
            *v += dt * (Mat2::from_columns(&[dx, dy]) * state.tangent.expect("tangent present"));
        }
    }
    if eps != 0.0 {
        let (xb, vb) = (x, v);
        for (k, &b) in db.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            x += eps * b * sys.field(k, xb);
            if let (Some(v), Some(vb)) = (v.as_mut(), vb) {
                *v += eps * b * (sys.field_jacobian(k, xb) * vb);
            }
        }
    }
    state.x = x;
    state.tangent = v;
}

fn apply_jump<S: PerturbedSystem + ?Sized>(
    sde: &MarcusSde<'_, S>,
    state: &mut TrajectoryState,
    z: &[f64],
    cfg: &StepperConfig,
) -> Result<()> {
    let (y, j) = jump_flow(sde.system, sde.epsilon, z, state.x, cfg)?;
    state.x = y;
    if let Some(v) = state.tangent.as_mut() {
        *v = j * *v;
    }
    Ok(())
}

fn finish_step<S: PerturbedSystem + ?Sized>(
    system: &S,
    state: &mut TrajectoryState,
    dt: f64,
    cfg: &StepperConfig,
) -> Result<()> {
    state.t += dt;
    state.exit = check_exit(system, state.x, cfg);
    if state.exit != ExitFlag::None {
        return Err(Error::ExitDetected { t: state.t, flag: state.exit });
    }
    Ok(())
}

/// Advances `state` by one step driven by `batch`: drift and corrections,
/// then the Brownian increment, then each jump in time order.
pub fn step<S: PerturbedSystem + ?Sized>(
    sde: &MarcusSde<'_, S>,
    state: &mut TrajectoryState,
    batch: &IncrementBatch,
    cfg: &StepperConfig,
) -> Result<()> {
    if state.exit != ExitFlag::None {
        return Err(Error::ExitDetected { t: state.t, flag: state.exit });
    }
    let correction = !sde.system.marcus_matches_ito();
    continuous_part(sde, correction, state, batch.dt, &batch.brownian);
    let d = sde.system.noise_dim();
    let mut z: SmallVec<[f64; 2]> = smallvec![0.0; d];
    for jump in &batch.jumps {
        z[jump.component] = jump.size;
        let res = apply_jump(sde, state, &z, cfg);
        z[jump.component] = 0.0;
        if let Err(Error::FlowEscape { .. }) = res {
            state.t += batch.dt;
            state.exit = ExitFlag::CriticalPoint;
            return Err(Error::ExitDetected { t: state.t, flag: state.exit });
        }
        res?;
    }
    finish_step(sde.system, state, batch.dt, cfg)
}

/// Samples noise and advances trajectories with a fixed step size.
///
/// With a single driving component, all jumps of a step act through the flow
/// of one field and compose into a single jump by the sum of their marks, so
/// only that sum is drawn.
#[derive(Debug)]
pub struct Stepper<'a, S: ?Sized> {
    pub sde: MarcusSde<'a, S>,
    pub cfg: StepperConfig,
    sampler: IncrementSampler,
    correction: bool,
    batch: IncrementBatch,
}

impl<'a, S: PerturbedSystem + ?Sized> Stepper<'a, S> {
    pub fn new(sde: MarcusSde<'a, S>, cfg: StepperConfig) -> Result<Self> {
        cfg.validate()?;
        let d = sde.system.noise_dim();
        let sampler = IncrementSampler::new(&sde.noise, d, cfg.dt)?;
        let correction = !sde.system.marcus_matches_ito();
        Ok(Self {
            sde,
            cfg,
            sampler,
            correction,
            batch: IncrementBatch::quiet(cfg.dt, d),
        })
    }

    pub fn sampler(&self) -> &IncrementSampler {
        &self.sampler
    }

    /// One step with freshly sampled noise.
    pub fn advance<R: Rng + ?Sized>(&mut self, state: &mut TrajectoryState, rng: &mut R) -> Result<()> {
        if state.exit != ExitFlag::None {
            return Err(Error::ExitDetected { t: state.t, flag: state.exit });
        }
        let dt = self.cfg.dt;
        if self.sampler.dimension() == 1 {
            let mut db = [0.0];
            self.sampler.sample_gaussian(&mut db, rng);
            let zsum = self.sampler.sample_jump_sum(rng);
            self.advance_with(state, &db, zsum)
        } else {
            self.sampler.sample_into(&mut self.batch, dt, rng);
            step(&self.sde, state, &self.batch, &self.cfg)
        }
    }

    /// One step of a single-component system with given Gaussian increment and
    /// jump-mark sum.
    pub fn advance_with(&self, state: &mut TrajectoryState, db: &[f64], zsum: f64) -> Result<()> {
        self.continuous(state, db);
        self.jump(state, &[zsum])?;
        self.finish(state)
    }

    /// Continuous part of a step (drift, correction, Brownian increment).
    pub fn continuous(&self, state: &mut TrajectoryState, db: &[f64]) {
        continuous_part(&self.sde, self.correction, state, self.cfg.dt, db);
    }

    /// Applies the jump with mark vector `z`; a flow that runs into the
    /// singular set ends the trajectory.
    pub fn jump(&self, state: &mut TrajectoryState, z: &[f64]) -> Result<()> {
        if z.iter().all(|zk| *zk == 0.0) {
            return Ok(());
        }
        match apply_jump(&self.sde, state, z, &self.cfg) {
            Err(Error::FlowEscape { .. }) => {
                state.t += self.cfg.dt;
                state.exit = ExitFlag::CriticalPoint;
                Err(Error::ExitDetected { t: state.t, flag: state.exit })
            }
            other => other,
        }
    }

    /// Advances the clock by one step and checks for exit.
    pub fn finish(&self, state: &mut TrajectoryState) -> Result<()> {
        finish_step(self.sde.system, state, self.cfg.dt, &self.cfg)
    }
}

/// Integrates from `x0` (optionally with a tangent) up to `horizon`, calling
/// `observer` after every step. The horizon is rounded to a whole number of
/// steps.
pub fn integrate<S, R, F>(
    sde: &MarcusSde<'_, S>,
    x0: Vec2,
    tangent0: Option<Vec2>,
    horizon: f64,
    cfg: &StepperConfig,
    rng: &mut R,
    mut observer: F,
) -> Result<TrajectoryState>
where
    S: PerturbedSystem + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(&mut TrajectoryState),
{
    if !(horizon >= 0.0) {
        return Err(Error::InvalidParameter(format!("horizon = {horizon} must be >= 0")));
    }
    let mut state = TrajectoryState::new(x0, tangent0);
    state.exit = check_exit(sde.system, x0, cfg);
    if state.exit != ExitFlag::None {
        return Err(Error::ExitDetected { t: 0.0, flag: state.exit });
    }
    let mut stepper = Stepper::new(*sde, *cfg)?;
    let steps = (horizon / cfg.dt).round() as u64;
    for _ in 0..steps {
        stepper.advance(&mut state, rng)?;
        observer(&mut state);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HamiltonianModel;
    use crate::noise::{stream, Jump};

    /// Harmonic oscillator with a rotational perturbation field; the jump flow
    /// is a rotation by `eps z`.
    struct Rotor;

    impl HamiltonianModel for Rotor {
        fn hamiltonian(&self, x: Vec2) -> f64 {
            0.5 * x.norm_squared()
        }
        fn gradient(&self, x: Vec2) -> Vec2 {
            x
        }
        fn hessian(&self, _x: Vec2) -> Mat2 {
            Mat2::identity()
        }
    }

    impl PerturbedSystem for Rotor {
        fn name(&self) -> &str {
            "rotor"
        }
        fn field(&self, _k: usize, x: Vec2) -> Vec2 {
            Vec2::new(-x.y, x.x)
        }
    }

    fn rotation(phi: f64) -> Mat2 {
        Mat2::new(phi.cos(), -phi.sin(), phi.sin(), phi.cos())
    }

    #[test]
    fn generic_flow_is_a_rotation() {
        let cfg = StepperConfig { flow_substeps: 64, ..Default::default() };
        let x = Vec2::new(0.3, -1.1);
        let (y, j) = generic_jump_flow(&Rotor, 0.5, &[0.8], x, &cfg).unwrap();
        assert!((y - rotation(0.4) * x).norm() < 1e-10);
        assert!((j - rotation(0.4)).norm() < 1e-10);
        assert!((j.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_mark_is_identity() {
        let cfg = StepperConfig::default();
        let x = Vec2::new(0.3, -1.1);
        assert_eq!(marcus_jump_map(&Rotor, 0.5, &[0.0], x, &cfg).unwrap(), x);
        assert_eq!(marcus_jump_jacobian(&Rotor, 0.5, &[0.0], x, &cfg).unwrap(), Mat2::identity());
    }

    #[test]
    fn compensator_matches_closed_form() {
        // xi(z)(x) - x - eps z V = (R(eps z) - I - eps z J) x; the odd parts
        // cancel, leaving x * int (cos(eps z) - 1) nu(dz).
        let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 0.01, 1).unwrap();
        let cfg = StepperConfig { flow_substeps: 64, compensator_quadrature_nodes: 48, ..Default::default() };
        let eps = 0.7;
        let x = Vec2::new(0.6, 0.2);
        let got = compensator_drift(&Rotor, eps, &m, x, &cfg).unwrap();
        let want = m.quadrature(400).integrate(|z| (eps * z).cos() - 1.0);
        assert!((got - want * x).norm() < 1e-9 * x.norm(), "{got} vs {}", want * x);
    }

    #[test]
    fn single_jump_step_reproduces_jump_map() {
        let cfg = StepperConfig::default();
        let sde = MarcusSde::new(&Rotor, 0.3, NoiseModel::silent()).unwrap();
        let x = Vec2::new(1.0, 0.5);
        let mut state = TrajectoryState::new(x, Some(Vec2::new(1.0, 0.0)));
        let batch = IncrementBatch {
            dt: 0.0,
            brownian: vec![0.0],
            jumps: vec![Jump { offset: 0.0, component: 0, size: 0.9 }],
        };
        step(&sde, &mut state, &batch, &cfg).unwrap();
        let want = marcus_jump_map(&Rotor, 0.3, &[0.9], x, &cfg).unwrap();
        assert!((state.x - want).norm() < 1e-15);
    }

    #[test]
    fn critical_start_exits_immediately() {
        let cfg = StepperConfig::default();
        let sde = MarcusSde::new(&Rotor, 0.1, NoiseModel::brownian()).unwrap();
        let mut rng = stream(0, 0);
        let err = integrate(&sde, Vec2::zeros(), None, 1.0, &cfg, &mut rng, |_| {}).unwrap_err();
        assert_eq!(err, Error::ExitDetected { t: 0.0, flag: ExitFlag::CriticalPoint });
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let cfg = StepperConfig::default();
        let sde = MarcusSde::new(&Rotor, 0.1, NoiseModel::brownian()).unwrap();
        let mut rng = stream(0, 0);
        let x0 = Vec2::new(0.2, 0.4);
        let s = integrate(&sde, x0, None, 0.0, &cfg, &mut rng, |_| {}).unwrap();
        assert_eq!(s, TrajectoryState::new(x0, None));
    }

    #[test]
    fn same_seed_same_path() {
        let cfg = StepperConfig::with_dt(1e-2);
        let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 0.05, 1).unwrap();
        let sde = MarcusSde::new(&Rotor, 0.2, NoiseModel::levy(m)).unwrap();
        let run = || {
            let mut rng = stream(42, 7);
            integrate(&sde, Vec2::new(1.0, 0.0), Some(Vec2::new(0.0, 1.0)), 5.0, &cfg, &mut rng, |_| {}).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rotor_preserves_energy_under_noise() {
        // Every field here is tangent to circles, and the Itô correction keeps
        // the Euler scheme on average on the circle only to O(dt); check the
        // drift of H stays small.
        let cfg = StepperConfig::with_dt(1e-3);
        let sde = MarcusSde::new(&Rotor, 0.3, NoiseModel::brownian()).unwrap();
        let mut rng = stream(3, 1);
        let s = integrate(&sde, Vec2::new(1.0, 0.0), None, 10.0, &cfg, &mut rng, |_| {}).unwrap();
        assert!((Rotor.hamiltonian(s.x) - 0.5).abs() < 0.05);
    }
}
