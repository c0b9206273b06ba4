//! Ready-made example systems.

use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use crate::error::{Error, Result};
use crate::model::{FieldCoefficients, FrameCoefficients, HamiltonianModel, PerturbedSystem};
use crate::{Mat2, Vec2};

/// Linear nilpotent system `du = [[0, a], [0, 0]] u dt + eps [[0, 0], [sigma, 0]] u <> dL`,
/// i.e. `H(u) = a u2^2 / 2` perturbed by `V(u) = (0, sigma u1)`.
///
/// The system is already in nilpotent form, so its own coordinates serve as
/// the frame: `A = a`, `D = sigma`, `B = C = E = 0`. The critical line
/// `u2 = 0` of `H` plays no role for a linear system; only the origin is
/// excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NilpotentSystem {
    pub a: f64,
    pub sigma: f64,
}

impl NilpotentSystem {
    pub fn new(a: f64, sigma: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "nilpotent system needs a > 0 and sigma > 0, got a = {a}, sigma = {sigma}"
            )));
        }
        Ok(Self { a, sigma })
    }
}

impl HamiltonianModel for NilpotentSystem {
    fn hamiltonian(&self, u: Vec2) -> f64 {
        0.5 * self.a * u.y * u.y
    }
    fn gradient(&self, u: Vec2) -> Vec2 {
        Vec2::new(0.0, self.a * u.y)
    }
    fn hessian(&self, _u: Vec2) -> Mat2 {
        Mat2::new(0.0, 0.0, 0.0, self.a)
    }
    fn hamiltonian_field(&self, u: Vec2) -> Vec2 {
        Vec2::new(self.a * u.y, 0.0)
    }
    fn hamiltonian_field_jacobian(&self, _u: Vec2) -> Mat2 {
        Mat2::new(0.0, self.a, 0.0, 0.0)
    }
}

impl PerturbedSystem for NilpotentSystem {
    fn name(&self) -> &str {
        "nilpotent"
    }
    fn field(&self, _k: usize, u: Vec2) -> Vec2 {
        Vec2::new(0.0, self.sigma * u.x)
    }
    fn field_jacobian(&self, _k: usize, _u: Vec2) -> Mat2 {
        Mat2::new(0.0, 0.0, self.sigma, 0.0)
    }
    fn exact_jump_flow(&self, eps: f64, z: &[f64], u: Vec2) -> Option<(Vec2, Mat2)> {
        let k = eps * self.sigma * z[0];
        Some((Vec2::new(u.x, u.y + k * u.x), Mat2::new(1.0, 0.0, k, 1.0)))
    }
    fn marcus_matches_ito(&self) -> bool {
        true
    }
    fn constant_frame(&self) -> Option<FrameCoefficients> {
        Some(FrameCoefficients {
            a: self.a,
            fields: smallvec![FieldCoefficients { b: 0.0, c: 0.0, d: self.sigma, e: 0.0 }],
        })
    }
    fn is_linear(&self) -> bool {
        true
    }
    fn singular_distance(&self, u: Vec2) -> f64 {
        u.norm()
    }
}

/// Angle after the unipotent jump `w -> [[1, 0], [kz, 1]] w`, where `kz` is the
/// product of the jump scale and the mark (`eps sigma z` in plain coordinates).
/// Equal to `arctan(tan theta + kz)` on each chart, glued continuously across
/// `theta = pi/2, 3pi/2` and returned in `[0, 2 pi)`.
pub fn exact_theta_jump(theta: f64, kz: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    crate::frame::wrap_angle((s + kz * c).atan2(c))
}

/// Log-radius increment of the same jump,
/// `1/2 log((1 + (tan theta + kz)^2) / (1 + tan^2 theta))`, in a form that is
/// finite for every angle.
pub fn exact_rho_jump(theta: f64, kz: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    0.5 * (kz * c * (2.0 * s + kz * c)).ln_1p()
}

/// Duffing oscillator `H = x^2/2 + x^4/4 + y^2/2` perturbed by `V = (0, sigma x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuffingSystem {
    pub sigma: f64,
}

impl DuffingSystem {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("Duffing system needs sigma > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    /// `|grad H|^2 = (x + x^3)^2 + y^2`.
    fn grad_sq(p: Vec2) -> f64 {
        let f = p.x + p.x.powi(3);
        f * f + p.y * p.y
    }

    /// The `a^1` component as it appears with the noise scale folded in,
    /// `-eps sigma x (x + x^3) / ((x + x^3)^2 + y^2)`.
    pub fn scaled_a1(&self, eps: f64, p: Vec2) -> f64 {
        eps * self.frame_components(0, p)[0]
    }

    /// Closed-form frame coefficients `(A, B, C, D, E)`.
    pub fn closed_form_coefficients(&self, p: Vec2) -> [f64; 5] {
        let (x, y, s) = (p.x, p.y, self.sigma);
        let f = x + x.powi(3);
        let q = f * f + y * y;
        let a = 3.0 * x * x * (f * f - y * y) / (q * q);
        let b = -s * x * y * (x * x + 2.0) / q;
        let c = -s * x.powi(3) * f / (q * q);
        let d = -s * x * f + s * y * y;
        [a, b, c, d, -b]
    }
}

impl HamiltonianModel for DuffingSystem {
    fn hamiltonian(&self, p: Vec2) -> f64 {
        0.5 * p.x * p.x + 0.25 * p.x.powi(4) + 0.5 * p.y * p.y
    }
    fn gradient(&self, p: Vec2) -> Vec2 {
        Vec2::new(p.x + p.x.powi(3), p.y)
    }
    fn hessian(&self, p: Vec2) -> Mat2 {
        Mat2::new(1.0 + 3.0 * p.x * p.x, 0.0, 0.0, 1.0)
    }
}

impl PerturbedSystem for DuffingSystem {
    fn name(&self) -> &str {
        "duffing"
    }
    fn field(&self, _k: usize, p: Vec2) -> Vec2 {
        Vec2::new(0.0, self.sigma * p.x)
    }
    fn field_jacobian(&self, _k: usize, _p: Vec2) -> Mat2 {
        Mat2::new(0.0, 0.0, self.sigma, 0.0)
    }
    fn frame_components(&self, _k: usize, p: Vec2) -> [f64; 2] {
        let f = p.x + p.x.powi(3);
        [-self.sigma * p.x * f / Self::grad_sq(p), self.sigma * p.x * p.y]
    }
    fn frame_component_gradients(&self, _k: usize, p: Vec2) -> [Vec2; 2] {
        let (x, y, s) = (p.x, p.y, self.sigma);
        let f = x + x.powi(3);
        let n = x * f;
        let q = Self::grad_sq(p);
        let dn = 2.0 * x + 4.0 * x.powi(3);
        let dqx = 2.0 * f * (1.0 + 3.0 * x * x);
        let dqy = 2.0 * y;
        [
            Vec2::new(-s * (dn * q - n * dqx) / (q * q), s * n * dqy / (q * q)),
            Vec2::new(s * y, s * x),
        ]
    }
    fn exact_jump_flow(&self, eps: f64, z: &[f64], p: Vec2) -> Option<(Vec2, Mat2)> {
        let k = eps * self.sigma * z[0];
        Some((Vec2::new(p.x, p.y + k * p.x), Mat2::new(1.0, 0.0, k, 1.0)))
    }
    fn marcus_matches_ito(&self) -> bool {
        true
    }
}

/// One of the shipped systems, selectable by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum SystemSpec {
    Nilpotent { a: f64, sigma: f64 },
    Duffing { sigma: f64 },
}

impl SystemSpec {
    pub fn build(&self) -> Result<Box<dyn PerturbedSystem>> {
        Ok(match *self {
            SystemSpec::Nilpotent { a, sigma } => Box::new(NilpotentSystem::new(a, sigma)?),
            SystemSpec::Duffing { sigma } => Box::new(DuffingSystem::new(sigma)?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SystemSpec::Nilpotent { .. } => "nilpotent",
            SystemSpec::Duffing { .. } => "duffing",
        }
    }
}
