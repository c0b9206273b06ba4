//! Moving-frame algebra of the linearised flow.
//!
//! Away from critical points of `H` the tangent vector is written as
//! `v = w1 U1(x) + w2 U2(x)` with `U1 = (d2 H, -d1 H)` and
//! `U2 = grad H / |grad H|^2`. In these coordinates the linearisation is a
//! perturbed nilpotent system
//! `dw = [[0, A], [0, 0]] w dt + eps sum_k [[B_k, C_k], [D_k, E_k]] w <> dL^k`.
//! After the rescaling `T = diag(eps^beta, 1)` and the polar split
//! `w = e^rho (cos theta, sin theta)`, the angle and log-radius follow
//! `dtheta = -eps^beta A sin^2 dt + sum_k sigma1_k <> dL^k` and
//! `drho = eps^beta A sin cos dt + sum_k sigma2_k <> dL^k`.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::marcus::{marcus_jump_map, StepperConfig};
use crate::model::{FieldCoefficients, FrameCoefficients, HamiltonianModel, PerturbedSystem};
use crate::noise::{JumpMeasureSpec, JumpRule, NoiseModel};
use crate::quadrature::GaussLegendre;
use crate::{Mat2, Vec2};

/// Default Pinsky–Wihstutz exponent for Brownian plus bounded-jump noise.
pub const DEFAULT_BETA: f64 = 2.0 / 3.0;

fn regular_gradient<M: HamiltonianModel + ?Sized>(model: &M, x: Vec2, tol: f64) -> Result<Vec2> {
    let g = model.gradient(x);
    if g.norm() < tol || !g.norm().is_finite() {
        return Err(Error::CriticalPoint { x: x.x, y: x.y });
    }
    Ok(g)
}

/// The frame `(U1, U2)` at `x`.
pub fn frame_vectors<M: HamiltonianModel + ?Sized>(model: &M, x: Vec2, tol: f64) -> Result<(Vec2, Vec2)> {
    let g = regular_gradient(model, x, tol)?;
    Ok((Vec2::new(g.y, -g.x), g / g.norm_squared()))
}

/// Drift coefficient `A` of the moving frame,
/// `[((d2H)^2 - (d1H)^2)(d22H - d11H) + 4 d1H d2H d12H] / |grad H|^4`.
pub fn moving_frame_a<M: HamiltonianModel + ?Sized>(model: &M, x: Vec2, tol: f64) -> Result<f64> {
    let g = regular_gradient(model, x, tol)?;
    let h = model.hessian(x);
    let (h1, h2) = (g.x, g.y);
    let num = (h2 * h2 - h1 * h1) * (h[(1, 1)] - h[(0, 0)]) + 4.0 * h1 * h2 * h[(0, 1)];
    Ok(num / g.norm_squared().powi(2))
}

/// Drift coefficient `A` in the frame the system uses (constant for systems
/// that are already nilpotent in their own coordinates).
pub fn coefficient_a<S: PerturbedSystem + ?Sized>(system: &S, x: Vec2, tol: f64) -> Result<f64> {
    match system.constant_frame() {
        Some(c) => Ok(c.a),
        None => moving_frame_a(system, x, tol),
    }
}

/// `A, B_k, C_k, D_k, E_k` of the moving frame at `x`.
pub fn moving_frame_coefficients<S: PerturbedSystem + ?Sized>(
    system: &S,
    x: Vec2,
    tol: f64,
) -> Result<FrameCoefficients> {
    let (u1, u2) = frame_vectors(system, x, tol)?;
    let a = moving_frame_a(system, x, tol)?;
    let fields = (0..system.noise_dim())
        .map(|k| {
            let [a1, a2] = system.frame_components(k, x);
            let [g1, g2] = system.frame_component_gradients(k, x);
            FieldCoefficients {
                b: u1.dot(&g1) - a * a2,
                c: u2.dot(&g1) + a * a1,
                d: u1.dot(&g2),
                e: u2.dot(&g2),
            }
        })
        .collect();
    Ok(FrameCoefficients { a, fields })
}

/// Frame coefficients in the frame the system uses.
pub fn frame_coefficients<S: PerturbedSystem + ?Sized>(system: &S, x: Vec2, tol: f64) -> Result<FrameCoefficients> {
    match system.constant_frame() {
        Some(c) => Ok(c),
        None => moving_frame_coefficients(system, x, tol),
    }
}

/// Moving-frame coordinates `(w1, w2)` of a tangent vector `v` at `x`.
pub fn decompose_tangent<M: HamiltonianModel + ?Sized>(model: &M, x: Vec2, v: Vec2, tol: f64) -> Result<Vec2> {
    let g = regular_gradient(model, x, tol)?;
    let u1 = Vec2::new(g.y, -g.x);
    Ok(Vec2::new(v.dot(&u1) / g.norm_squared(), v.dot(&g)))
}

/// Inverse of [`decompose_tangent`].
pub fn recompose_tangent<M: HamiltonianModel + ?Sized>(model: &M, x: Vec2, w: Vec2, tol: f64) -> Result<Vec2> {
    let (u1, u2) = frame_vectors(model, x, tol)?;
    Ok(w.x * u1 + w.y * u2)
}

/// Frame coordinates in the frame the system uses.
pub fn frame_coordinates<S: PerturbedSystem + ?Sized>(system: &S, x: Vec2, v: Vec2, tol: f64) -> Result<Vec2> {
    if system.constant_frame().is_some() {
        Ok(v)
    } else {
        decompose_tangent(system, x, v, tol)
    }
}

/// Spatial gradients of the frame coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientGradients {
    pub a: Vec2,
    /// Gradients of `(B_k, C_k, D_k, E_k)`.
    pub fields: SmallVec<[[Vec2; 4]; 2]>,
}

impl CoefficientGradients {
    pub fn zero(d: usize) -> Self {
        Self { a: Vec2::zeros(), fields: (0..d).map(|_| [Vec2::zeros(); 4]).collect() }
    }
}

/// Gradients of the frame coefficients by central differences with step
/// `1e-5 (1 + |x|)`; zero for constant frames.
pub fn coefficient_gradients<S: PerturbedSystem + ?Sized>(
    system: &S,
    x: Vec2,
    tol: f64,
) -> Result<CoefficientGradients> {
    let d = system.noise_dim();
    if system.constant_frame().is_some() {
        return Ok(CoefficientGradients::zero(d));
    }
    let h = 1e-5 * (1.0 + x.norm());
    let at = |dx: f64, dy: f64| moving_frame_coefficients(system, x + Vec2::new(dx, dy), tol);
    let (px, mx, py, my) = (at(h, 0.0)?, at(-h, 0.0)?, at(0.0, h)?, at(0.0, -h)?);
    let grad = |f: &dyn Fn(&FrameCoefficients) -> f64| {
        Vec2::new(f(&px) - f(&mx), f(&py) - f(&my)) / (2.0 * h)
    };
    let fields = (0..d)
        .map(|k| {
            [
                grad(&|c| c.fields[k].b),
                grad(&|c| c.fields[k].c),
                grad(&|c| c.fields[k].d),
                grad(&|c| c.fields[k].e),
            ]
        })
        .collect();
    Ok(CoefficientGradients { a: grad(&|c| c.a), fields })
}

/// The rescaling `T = diag(eps^beta, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwTransform {
    pub epsilon: f64,
    pub beta: f64,
}

impl PwTransform {
    pub fn new(epsilon: f64, beta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be positive")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidParameter(format!("beta = {beta} must lie in (0, 1)")));
        }
        Ok(Self { epsilon, beta })
    }

    /// `eps^beta`.
    pub fn factor(&self) -> f64 {
        self.epsilon.powf(self.beta)
    }

    /// Noise block `T M T^{-1}`.
    pub fn conjugate(&self, f: &FieldCoefficients) -> Mat2 {
        let s = self.factor();
        Mat2::new(f.b, s * f.c, f.d / s, f.e)
    }
}

/// `T w = (eps^beta w1, w2)`.
pub fn pw_scale(w: Vec2, t: &PwTransform) -> Vec2 {
    Vec2::new(t.factor() * w.x, w.y)
}

/// Angular (`sigma1`) and radial (`sigma2`) noise coefficients split by powers
/// of `eps`, with their Wong–Zakai corrections.
///
/// `sigma1_k = eps^{1-b} q[0] + eps q[1] + eps^{1+b} q[2]`, likewise `sigma2_k`
/// with `p`; the corrections `eps Dx sigma V_k + Dtheta sigma sigma1_k` are
/// split into the powers `eps^{2-2b}, eps^{2-b}, eps^2, eps^{2+b}, eps^{2+2b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedTerms {
    pub epsilon: f64,
    pub beta: f64,
    pub q: SmallVec<[[f64; 3]; 2]>,
    pub p: SmallVec<[[f64; 3]; 2]>,
    pub q_wz: SmallVec<[[f64; 5]; 2]>,
    pub p_wz: SmallVec<[[f64; 5]; 2]>,
    pow3: [f64; 3],
    pow5: [f64; 5],
}

impl GradedTerms {
    pub fn sigma1(&self, k: usize) -> f64 {
        dot3(&self.pow3, &self.q[k])
    }

    pub fn sigma2(&self, k: usize) -> f64 {
        dot3(&self.pow3, &self.p[k])
    }

    /// Wong–Zakai correction of the angle equation.
    pub fn sigma1_wz(&self, k: usize) -> f64 {
        dot5(&self.pow5, &self.q_wz[k])
    }

    /// Wong–Zakai correction of the radial equation.
    pub fn sigma2_wz(&self, k: usize) -> f64 {
        dot5(&self.pow5, &self.p_wz[k])
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dot5(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Graded noise coefficients at angle `theta`; `fields[k]` is `V_k(x)`.
pub fn graded_terms(
    coeffs: &FrameCoefficients,
    grads: &CoefficientGradients,
    fields: &[Vec2],
    theta: f64,
    epsilon: f64,
    beta: f64,
) -> GradedTerms {
    let (s, c) = theta.sin_cos();
    let (ss, cc, sc) = (s * s, c * c, s * c);
    let diff = cc - ss;
    let d = coeffs.fields.len();
    let mut out = GradedTerms {
        epsilon,
        beta,
        q: SmallVec::with_capacity(d),
        p: SmallVec::with_capacity(d),
        q_wz: SmallVec::with_capacity(d),
        p_wz: SmallVec::with_capacity(d),
        pow3: [epsilon.powf(1.0 - beta), epsilon, epsilon.powf(1.0 + beta)],
        pow5: [
            epsilon.powf(2.0 - 2.0 * beta),
            epsilon.powf(2.0 - beta),
            epsilon * epsilon,
            epsilon.powf(2.0 + beta),
            epsilon.powf(2.0 + 2.0 * beta),
        ],
    };
    for (k, f) in coeffs.fields.iter().enumerate() {
        let q = [f.d * cc, -(f.b - f.e) * sc, -f.c * ss];
        let p = [f.d * sc, f.b * cc + f.e * ss, f.c * sc];
        let dq = [-2.0 * f.d * sc, -(f.b - f.e) * diff, -2.0 * f.c * sc];
        let dp = [f.d * diff, 2.0 * (f.e - f.b) * sc, f.c * diff];
        let [gb, gc, gd, ge] = grads.fields[k];
        let v = fields[k];
        let xq = [gd.dot(&v) * cc, -(gb - ge).dot(&v) * sc, -gc.dot(&v) * ss];
        let xp = [gd.dot(&v) * sc, gb.dot(&v) * cc + ge.dot(&v) * ss, gc.dot(&v) * sc];
        let grade = |x: &[f64; 3], dv: &[f64; 3]| {
            [
                dv[0] * q[0],
                x[0] + dv[0] * q[1] + dv[1] * q[0],
                x[1] + dv[0] * q[2] + dv[1] * q[1] + dv[2] * q[0],
                x[2] + dv[1] * q[2] + dv[2] * q[1],
                dv[2] * q[2],
            ]
        };
        out.q_wz.push(grade(&xq, &dq));
        out.p_wz.push(grade(&xp, &dp));
        out.q.push(q);
        out.p.push(p);
    }
    out
}

/// `1/2 cos^2 - sin^2 cos^2`.
pub fn brownian_angular_profile(theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    c * c * (0.5 - s * s)
}

/// Wraps an angle into `[0, 2 pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(std::f64::consts::TAU);
    if t >= std::f64::consts::TAU {
        0.0
    } else {
        t
    }
}

/// `exp(m)` for a real 2x2 matrix.
pub fn expm2(m: &Mat2) -> Mat2 {
    let half_tr = 0.5 * m.trace();
    let n = m - Mat2::identity() * half_tr;
    let delta = -n.determinant();
    let (ch, shc) = if delta.abs() < 1e-8 {
        (1.0 + 0.5 * delta + delta * delta / 24.0, 1.0 + delta / 6.0 + delta * delta / 120.0)
    } else if delta > 0.0 {
        let r = delta.sqrt();
        (r.cosh(), r.sinh() / r)
    } else {
        let r = (-delta).sqrt();
        (r.cos(), r.sin() / r)
    };
    (Mat2::identity() * ch + n * shc) * half_tr.exp()
}

/// Result of the joint jump flow on `(x, theta, rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularJump {
    pub x: Vec2,
    /// New angle in `[0, 2 pi)`.
    pub theta: f64,
    /// Increment of `rho = log |w|`.
    pub log_growth: f64,
}

/// Time-one flow of `sum_k z_k (eps V_k, sigma1_k, sigma2_k)` by RK4 on
/// `(x, theta, rho)`.
pub fn angular_flow_ode<S: PerturbedSystem + ?Sized>(
    system: &S,
    epsilon: f64,
    beta: f64,
    z: &[f64],
    x: Vec2,
    theta: f64,
    cfg: &StepperConfig,
) -> Result<AngularJump> {
    let tol = cfg.tol_crit;
    let rhs = |x: Vec2, th: f64| -> Result<(Vec2, f64, f64)> {
        let coeffs = frame_coefficients(system, x, tol)?;
        let t = PwTransform { epsilon, beta };
        let (s, c) = th.sin_cos();
        let mut dx = Vec2::zeros();
        let (mut dth, mut drho) = (0.0, 0.0);
        for (k, &zk) in z.iter().enumerate() {
            if zk == 0.0 {
                continue;
            }
            let m = t.conjugate(&coeffs.fields[k]) * epsilon;
            let w = Vec2::new(c, s);
            let mw = m * w;
            dx += epsilon * zk * system.field(k, x);
            dth += zk * (c * mw.y - s * mw.x);
            drho += zk * (c * mw.x + s * mw.y);
        }
        Ok((dx, dth, drho))
    };
    let n = cfg.flow_substeps.max(1);
    let h = 1.0 / n as f64;
    let (mut y, mut th, mut rho) = (x, theta, 0.0);
    for _ in 0..n {
        let (k1, t1, r1) = rhs(y, th)?;
        let (k2, t2, r2) = rhs(y + 0.5 * h * k1, th + 0.5 * h * t1)?;
        let (k3, t3, r3) = rhs(y + 0.5 * h * k2, th + 0.5 * h * t2)?;
        let (k4, t4, r4) = rhs(y + h * k3, th + h * t3)?;
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        th += h / 6.0 * (t1 + 2.0 * t2 + 2.0 * t3 + t4);
        rho += h / 6.0 * (r1 + 2.0 * r2 + 2.0 * r3 + r4);
    }
    Ok(AngularJump { x: y, theta: wrap_angle(th), log_growth: rho })
}

/// Joint jump of `(x, theta, rho)`: closed form through the matrix
/// exponential for constant frames, the flow ODE otherwise.
pub fn angular_jump<S: PerturbedSystem + ?Sized>(
    system: &S,
    epsilon: f64,
    beta: f64,
    z: &[f64],
    x: Vec2,
    theta: f64,
    cfg: &StepperConfig,
) -> Result<AngularJump> {
    match system.constant_frame() {
        Some(coeffs) => {
            let t = PwTransform { epsilon, beta };
            let m = coeffs
                .fields
                .iter()
                .zip(z)
                .fold(Mat2::zeros(), |acc, (f, zk)| acc + t.conjugate(f) * (epsilon * zk));
            let w = expm2(&m) * Vec2::new(theta.cos(), theta.sin());
            let y = marcus_jump_map(system, epsilon, z, x, cfg)?;
            Ok(AngularJump { x: y, theta: wrap_angle(w.y.atan2(w.x)), log_growth: w.norm().ln() })
        }
        None => angular_flow_ode(system, epsilon, beta, z, x, theta, cfg),
    }
}

/// Settings for the nested quadratures of the jump terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JumpQuadrature {
    /// Gauss nodes per sign in `z`.
    pub z_nodes: usize,
    /// Gauss nodes in the inner flow parameter.
    pub b_nodes: usize,
    /// Recompute with doubled node counts and fail when the relative change
    /// exceeds `tolerance`.
    pub check: bool,
    pub tolerance: f64,
}

impl Default for JumpQuadrature {
    fn default() -> Self {
        Self { z_nodes: 32, b_nodes: 8, check: true, tolerance: 1e-4 }
    }
}

fn checked<F: FnMut(usize, usize) -> Result<f64>>(q: &JumpQuadrature, mut eval: F) -> Result<f64> {
    let coarse = eval(q.z_nodes, q.b_nodes)?;
    if !q.check {
        return Ok(coarse);
    }
    let fine = eval(2 * q.z_nodes, 2 * q.b_nodes)?;
    let scale = fine.abs().max(1e-12);
    if (fine - coarse).abs() > q.tolerance * scale {
        return Err(Error::QuadratureFailure(format!(
            "jump integral changed from {coarse:.10e} to {fine:.10e} when doubling nodes"
        )));
    }
    Ok(fine)
}

/// `int R0(z)(x, theta) nu(dz)` with
/// `R0(z) = int_0^1 int_0^a sum_{k,l} z_k z_l (Dtheta P1_k Q1_l)(xi(bz), zeta1(bz)) db da`
/// `     = int_0^1 (1 - b) (sum_k z_k D_k)^2 2 (1/2 cos^2 - sin^2 cos^2) db`,
/// evaluated along the joint jump flow of the rescaled system with
/// `beta = 2/3`.
pub fn compute_r0<S: PerturbedSystem + ?Sized>(
    system: &S,
    measure: Option<&JumpMeasureSpec>,
    x: Vec2,
    theta: f64,
    epsilon: f64,
    quad: &JumpQuadrature,
    cfg: &StepperConfig,
) -> Result<f64> {
    let Some(m) = measure else {
        return Ok(0.0);
    };
    let d = system.noise_dim();
    checked(quad, |nz, nb| {
        let rule = JumpRule::new(m, m.floor, m.cutoff, nz);
        let inner = GaussLegendre::new(nb);
        let mut total = 0.0;
        let mut zv: SmallVec<[f64; 2]> = SmallVec::from_elem(0.0, d);
        for k in 0..d {
            for &(r, w) in rule.nodes() {
                for s in [r, -r] {
                    let mut acc = 0.0;
                    for (b, wb) in inner.mapped(0.0, 1.0) {
                        zv[k] = b * s;
                        let j = angular_jump(system, epsilon, DEFAULT_BETA, &zv, x, theta, cfg)?;
                        let coeffs = frame_coefficients(system, j.x, cfg.tol_crit)?;
                        let dz = s * coeffs.fields[k].d;
                        acc += wb * (1.0 - b) * dz * dz * 2.0 * brownian_angular_profile(j.theta);
                    }
                    total += w * acc;
                }
            }
            zv[k] = 0.0;
        }
        Ok(total)
    })
}

/// `I_rho(x, theta) = int [zeta2(z)(x, theta) - sum_k z_k sigma2_k(x, theta)] nu(dz)`.
#[allow(clippy::too_many_arguments)]
pub fn compute_irho<S: PerturbedSystem + ?Sized>(
    system: &S,
    measure: Option<&JumpMeasureSpec>,
    x: Vec2,
    theta: f64,
    epsilon: f64,
    beta: f64,
    quad: &JumpQuadrature,
    cfg: &StepperConfig,
) -> Result<f64> {
    let Some(m) = measure else {
        return Ok(0.0);
    };
    let d = system.noise_dim();
    let coeffs = frame_coefficients(system, x, cfg.tol_crit)?;
    let grads = CoefficientGradients::zero(d);
    let fields: SmallVec<[Vec2; 2]> = (0..d).map(|k| system.field(k, x)).collect();
    let g = graded_terms(&coeffs, &grads, &fields, theta, epsilon, beta);
    checked(quad, |nz, _| {
        let rule = JumpRule::new(m, m.floor, m.cutoff, nz);
        let mut total = 0.0;
        let mut zv: SmallVec<[f64; 2]> = SmallVec::from_elem(0.0, d);
        for k in 0..d {
            let s2 = g.sigma2(k);
            for &(r, w) in rule.nodes() {
                for s in [r, -r] {
                    zv[k] = s;
                    let j = angular_jump(system, epsilon, beta, &zv, x, theta, cfg)?;
                    total += w * (j.log_growth - s * s2);
                }
            }
            zv[k] = 0.0;
        }
        Ok(total)
    })
}

/// Which jump contribution enters the leading-order integrand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpTerm {
    /// `int R0 nu(dz)`.
    R0,
    /// `eps^{-2/3} I_rho`, usable when the `R0` separation is not available.
    IrhoFallback,
}

/// Leading-order integrand
/// `Sigma0 = A sin cos + q sum_k D_k^2 (1/2 cos^2 - sin^2 cos^2) + jump term`,
/// where `q` is the Gaussian variance rate of the noise.
#[allow(clippy::too_many_arguments)]
pub fn sigma0<S: PerturbedSystem + ?Sized>(
    system: &S,
    noise: &NoiseModel,
    x: Vec2,
    theta: f64,
    epsilon: f64,
    term: JumpTerm,
    quad: &JumpQuadrature,
    cfg: &StepperConfig,
) -> Result<f64> {
    let coeffs = frame_coefficients(system, x, cfg.tol_crit)?;
    let (s, c) = theta.sin_cos();
    let d2: f64 = coeffs.fields.iter().map(|f| f.d * f.d).sum();
    let local = coeffs.a * s * c + noise.gaussian_rate() * d2 * brownian_angular_profile(theta);
    let jump = match term {
        JumpTerm::R0 => compute_r0(system, noise.jumps.as_ref(), x, theta, epsilon, quad, cfg)?,
        JumpTerm::IrhoFallback => {
            epsilon.powf(-2.0 / 3.0)
                * compute_irho(system, noise.jumps.as_ref(), x, theta, epsilon, DEFAULT_BETA, quad, cfg)?
        }
    };
    Ok(local + jump)
}
