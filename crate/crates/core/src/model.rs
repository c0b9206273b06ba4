//! Hamiltonian models and their perturbation fields.

use smallvec::SmallVec;

use crate::{Mat2, Vec2};

/// A one-degree-of-freedom Hamiltonian `H : R^2 -> R`.
pub trait HamiltonianModel: Send + Sync {
    fn hamiltonian(&self, x: Vec2) -> f64;
    fn gradient(&self, x: Vec2) -> Vec2;
    fn hessian(&self, x: Vec2) -> Mat2;

    /// Hamiltonian vector field `U1 = (d2 H, -d1 H)`.
    fn hamiltonian_field(&self, x: Vec2) -> Vec2 {
        let g = self.gradient(x);
        Vec2::new(g.y, -g.x)
    }

    /// Jacobian of [`HamiltonianModel::hamiltonian_field`].
    fn hamiltonian_field_jacobian(&self, x: Vec2) -> Mat2 {
        let h = self.hessian(x);
        Mat2::new(h[(1, 0)], h[(1, 1)], -h[(0, 0)], -h[(0, 1)])
    }
}

/// Coefficients of the linearisation in a frame: the drift block `A` and the
/// noise blocks `[[B_k, C_k], [D_k, E_k]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCoefficients {
    pub a: f64,
    pub fields: SmallVec<[FieldCoefficients; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldCoefficients {
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
}

impl FieldCoefficients {
    pub fn matrix(&self) -> Mat2 {
        Mat2::new(self.b, self.c, self.d, self.e)
    }
}

impl FrameCoefficients {
    pub fn drift_matrix(&self) -> Mat2 {
        Mat2::new(0.0, self.a, 0.0, 0.0)
    }
}

/// Central finite-difference step used for derivative fallbacks.
pub fn fd_step(x: Vec2) -> f64 {
    1e-6 * (1.0 + x.norm())
}

/// A Hamiltonian system perturbed by `eps * sum_k V_k(x) <> dL^k`.
pub trait PerturbedSystem: HamiltonianModel {
    fn name(&self) -> &str;

    /// Number of driving noise components `d`.
    fn noise_dim(&self) -> usize {
        1
    }

    /// Perturbation field `V_k`.
    fn field(&self, k: usize, x: Vec2) -> Vec2;

    /// Jacobian `DV_k`; central differences unless overridden.
    fn field_jacobian(&self, k: usize, x: Vec2) -> Mat2 {
        let h = fd_step(x);
        let dx = (self.field(k, x + Vec2::new(h, 0.0)) - self.field(k, x - Vec2::new(h, 0.0))) / (2.0 * h);
        let dy = (self.field(k, x + Vec2::new(0.0, h)) - self.field(k, x - Vec2::new(0.0, h))) / (2.0 * h);
        Mat2::from_columns(&[dx, dy])
    }

    /// Frame components `(a_k^1, a_k^2)` with `V_k = a_k^1 U1 + a_k^2 U2`.
    fn frame_components(&self, k: usize, x: Vec2) -> [f64; 2] {
        let g = self.gradient(x);
        let v = self.field(k, x);
        let u1 = Vec2::new(g.y, -g.x);
        [v.dot(&u1) / g.norm_squared(), v.dot(&g)]
    }

    /// Gradients of the frame components; central differences unless overridden.
    fn frame_component_gradients(&self, k: usize, x: Vec2) -> [Vec2; 2] {
        let h = fd_step(x);
        let ex = Vec2::new(h, 0.0);
        let ey = Vec2::new(0.0, h);
        let px = self.frame_components(k, x + ex);
        let mx = self.frame_components(k, x - ex);
        let py = self.frame_components(k, x + ey);
        let my = self.frame_components(k, x - ey);
        [
            Vec2::new(px[0] - mx[0], py[0] - my[0]) / (2.0 * h),
            Vec2::new(px[1] - mx[1], py[1] - my[1]) / (2.0 * h),
        ]
    }

    /// Closed-form time-one jump flow `xi(z)(x)` of `eps * sum_k z_k V_k` and
    /// its Jacobian, when available.
    fn exact_jump_flow(&self, _eps: f64, _z: &[f64], _x: Vec2) -> Option<(Vec2, Mat2)> {
        None
    }

    /// True when the jump flow is linear in `z` along the field, so that the
    /// Marcus compensator vanishes identically.
    fn marcus_matches_ito(&self) -> bool {
        false
    }

    /// Constant frame coefficients for systems that are already linear and
    /// nilpotent in their own coordinates. The tangent is then used as the
    /// frame vector directly instead of going through the moving frame.
    fn constant_frame(&self) -> Option<FrameCoefficients> {
        None
    }

    /// True when the state equation is linear, so the state itself can be
    /// rescaled without changing the direction process.
    fn is_linear(&self) -> bool {
        false
    }

    /// Distance-like quantity that vanishes on the excluded singular set;
    /// `||grad H||` by default.
    fn singular_distance(&self, x: Vec2) -> f64 {
        self.gradient(x).norm()
    }
}
