//! Stationary Fokker–Planck equation on the circle for the perturbed
//! nilpotent system `du1 = a u2 dt`, `du2 = eps sigma u1 <> dL`.
//!
//! The angle `theta` of `(u1, u2)` is a Markov process on its own. Its
//! generator is discretised on a uniform periodic grid, the stationary
//! density is the normalised null vector of the transposed matrix, and the
//! exponent is the average of the radial drift `Q(theta)` against it.
//!
//! Two generators are available:
//! * `Plain`: the generator of `theta` itself,
//!   `-(a sin^2 + q eps^2 sigma^2 sin cos^3) f' + 1/2 q eps^2 sigma^2 cos^4 f''
//!   + int [f(zeta1(z)(theta)) - f(theta)] nu(dz)`, with `q` the Gaussian
//!   variance rate and `zeta1` the exact angle jump for `eps sigma z`;
//! * `Pw`: the leading-order generator after the rescaling
//!   `diag(eps^{2/3}, 1)` and the time change by `eps^{2/3}`,
//!   `-a sin^2 f' + sigma^2 K (-sin cos^3 f' + 1/2 cos^4 f'')` with
//!   `K = q + int z^2 nu(dz)`.
//!
//! The drift term uses third-order upwind-biased differences (which keep the
//! null space one-dimensional even without diffusion), the diffusion term
//! second-order central differences, and jump targets periodic cubic
//! interpolation.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::brownian_angular_profile;
use crate::noise::{JumpRule, NoiseModel};
use crate::output::{fmt_f64, SCHEMA_HEADER};
use crate::systems::{exact_rho_jump, exact_theta_jump};

/// Uniform periodic grid `theta_j = 2 pi j / n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircleGrid {
    n: usize,
}

impl CircleGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 16 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("grid size {n} must be even and at least 16")));
        }
        Ok(Self { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.n as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        TAU * j as f64 / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    fn wrap(&self, i: isize) -> usize {
        i.rem_euclid(self.n as isize) as usize
    }

    /// Periodic cubic Lagrange interpolation stencil at angle `phi`.
    pub fn interpolation_stencil(&self, phi: f64) -> [(usize, f64); 4] {
        let u = phi.rem_euclid(TAU) / self.spacing();
        let i = u.floor();
        let t = u - i;
        let i = i as isize;
        [
            (self.wrap(i - 1), -t * (t - 1.0) * (t - 2.0) / 6.0),
            (self.wrap(i), (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0),
            (self.wrap(i + 1), -(t + 1.0) * t * (t - 2.0) / 2.0),
            (self.wrap(i + 2), (t + 1.0) * t * (t - 1.0) / 6.0),
        ]
    }
}

/// Which angular generator to discretise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorVariant {
    Plain,
    Pw,
}

/// Dense discretised generator; row `j` maps grid values of `f` to
/// `(G f)(theta_j)`.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub matrix: DMatrix<f64>,
    pub variant: GeneratorVariant,
    pub grid: CircleGrid,
}

impl GeneratorMatrix {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(f)).as_slice().to_vec()
    }

    /// `max_j |(G 1)_j|`; zero up to rounding for a generator.
    pub fn constants_residual(&self) -> f64 {
        self.matrix.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max)
    }
}

/// Parameters of the nilpotent angle process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleProblem {
    pub a: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub noise: NoiseModel,
    /// Gauss nodes per sign of the jump-mark quadrature.
    pub z_nodes: usize,
}

impl CircleProblem {
    pub fn new(a: f64, sigma: f64, epsilon: f64, noise: NoiseModel) -> Result<Self> {
        let p = Self { a, sigma, epsilon, noise, z_nodes: 64 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need finite a, sigma >= 0 and epsilon >= 0 (a = {}, sigma = {}, epsilon = {})",
                self.a, self.sigma, self.epsilon
            )));
        }
        if self.z_nodes == 0 {
            return Err(Error::InvalidParameter("z_nodes must be at least 1".into()));
        }
        if let Some(m) = &self.noise.jumps {
            m.validate()?;
            if m.floor <= 0.0 {
                return Err(Error::InvalidMeasure("the circle solver needs a jump floor > 0".into()));
            }
        }
        Ok(())
    }

    fn rule(&self) -> Option<JumpRule> {
        self.noise
            .jumps
            .as_ref()
            .filter(|m| m.c_alpha > 0.0)
            .map(|m| JumpRule::new(m, m.floor, m.cutoff, self.z_nodes))
    }

    fn kappa(&self) -> f64 {
        self.epsilon * self.sigma
    }

    /// Effective diffusion factor `K = q + int z^2 nu(dz)` of the rescaled
    /// generator.
    pub fn pw_factor(&self) -> f64 {
        self.noise.gaussian_rate() + self.noise.jump_second_moment()
    }

    /// Drift and diffusion coefficients `(b, d)` of the local part at `theta`.
    pub fn local_coefficients(&self, variant: GeneratorVariant, theta: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        let k = match variant {
            GeneratorVariant::Plain => self.noise.gaussian_rate() * self.kappa() * self.kappa(),
            GeneratorVariant::Pw => self.sigma * self.sigma * self.pw_factor(),
        };
        (-self.a * s * s - k * s * c * c * c, 0.5 * k * c * c * c * c)
    }

    /// `int zeta2(z)(theta) nu(dz)` for the plain jump `eps sigma z`.
    pub fn zeta2_integral(&self, theta: f64) -> f64 {
        let k = self.kappa();
        self.rule().map_or(0.0, |r| r.integrate(|z| exact_rho_jump(theta, k * z)))
    }

    /// Radial drift `Q(theta)` whose stationary average is the exponent:
    /// `a sin cos + q eps^2 sigma^2 (1/2 cos^2 - sin^2 cos^2) + int zeta2 nu` for
    /// the plain variant, `a sin cos + sigma^2 K (1/2 cos^2 - sin^2 cos^2)` for
    /// the rescaled one.
    pub fn radial_drift(&self, variant: GeneratorVariant, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        let g = brownian_angular_profile(theta);
        match variant {
            GeneratorVariant::Plain => {
                let k = self.kappa();
                self.a * s * c + self.noise.gaussian_rate() * k * k * g + self.zeta2_integral(theta)
            }
            GeneratorVariant::Pw => self.a * s * c + self.sigma * self.sigma * self.pw_factor() * g,
        }
    }
}

/// Discretises the local operator `b(theta) f' + d(theta) f''`.
pub fn build_local_generator<F>(grid: CircleGrid, coefficients: F, variant: GeneratorVariant) -> GeneratorMatrix
where
    F: Fn(f64) -> (f64, f64) + Sync,
{
    let n = grid.len();
    let h = grid.spacing();
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let (b, d) = coefficients(grid.node(j));
            local_row(&grid, j as isize, b, d, h)
        })
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (j, row) in rows.iter().enumerate() {
        for &(i, v) in row {
            m[(j, i)] += v;
        }
    }
    GeneratorMatrix { matrix: m, variant, grid }
}

fn local_row(grid: &CircleGrid, j: isize, b: f64, d: f64, h: f64) -> Vec<(usize, f64)> {
    let mut row = Vec::with_capacity(7);
    // Third-order upwind-biased first derivative, leaning towards where the
    // drift carries the process.
    let w = b / (6.0 * h);
    if b > 0.0 {
        row.extend([
            (grid.wrap(j - 1), -2.0 * w),
            (grid.wrap(j), -3.0 * w),
            (grid.wrap(j + 1), 6.0 * w),
            (grid.wrap(j + 2), -w),
        ]);
    } else if b < 0.0 {
        row.extend([
            (grid.wrap(j - 2), w),
            (grid.wrap(j - 1), -6.0 * w),
            (grid.wrap(j), 3.0 * w),
            (grid.wrap(j + 1), 2.0 * w),
        ]);
    }
    if d != 0.0 {
        let w = d / (h * h);
        row.extend([(grid.wrap(j - 1), w), (grid.wrap(j), -2.0 * w), (grid.wrap(j + 1), w)]);
    }
    row
}

/// Discretised angle generator of the nilpotent system.
pub fn build_generator(problem: &CircleProblem, grid: CircleGrid, variant: GeneratorVariant) -> Result<GeneratorMatrix> {
    problem.validate()?;
    let mut gen = build_local_generator(grid, |t| problem.local_coefficients(variant, t), variant);
    if variant == GeneratorVariant::Plain {
        if let Some(rule) = problem.rule() {
            let k = problem.kappa();
            let n = grid.len();
            let rows: Vec<Vec<(usize, f64)>> = (0..n)
                .into_par_iter()
                .map(|j| {
                    let theta = grid.node(j);
                    let mut row = Vec::with_capacity(8 * rule.nodes().len() + 1);
                    let mut total = 0.0;
                    for &(z, w) in rule.nodes() {
                        for s in [z, -z] {
                            for (i, c) in grid.interpolation_stencil(exact_theta_jump(theta, k * s)) {
                                row.push((i, w * c));
                            }
                            total += w;
                        }
                    }
                    row.push((j, -total));
                    row
                })
                .collect();
            for (j, row) in rows.iter().enumerate() {
                for &(i, v) in row {
                    gen.matrix[(j, i)] += v;
                }
            }
        }
    }
    Ok(gen)
}

/// Stationary density on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleDensity {
    pub grid: CircleGrid,
    /// Density values `mu_j` with `h sum mu_j = 1`.
    pub values: Vec<f64>,
    /// Mass `h sum |mu_j|` of the negative values that were clipped to zero.
    pub clipped_mass: f64,
    /// `max_j |(G^T mu)_j|`.
    pub residual: f64,
    /// Ratio of the two smallest singular values of `G^T`.
    pub gap: f64,
}

/// Gap ratio below which the null space is not considered one-dimensional.
pub const NULLSPACE_GAP: f64 = 1e6;

/// Solves `G^T mu = 0`, `h sum mu = 1` through the singular value
/// decomposition of `G^T`.
pub fn solve_stationary(gen: &GeneratorMatrix) -> Result<CircleDensity> {
    let gt = gen.matrix.transpose();
    let svd = gt.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smin, snext) = (sv[order[0]], sv[order[1]]);
    let gap = if snext == 0.0 {
        1.0
    } else if smin > 0.0 {
        snext / smin
    } else {
        f64::INFINITY
    };
    if !(gap >= NULLSPACE_GAP) {
        return Err(Error::DegenerateNullspace { gap });
    }
    let mut mu: Vec<f64> = v_t.row(order[0]).iter().copied().collect();
    let h = gen.grid.spacing();
    let total: f64 = mu.iter().sum::<f64>() * h;
    if total == 0.0 {
        return Err(Error::DegenerateNullspace { gap });
    }
    mu.iter_mut().for_each(|m| *m /= total);
    let clipped_mass = h * mu.iter().filter(|m| **m < 0.0).map(|m| -m).sum::<f64>();
    if clipped_mass > 0.0 {
        mu.iter_mut().for_each(|m| *m = m.max(0.0));
        let total: f64 = mu.iter().sum::<f64>() * h;
        mu.iter_mut().for_each(|m| *m /= total);
    }
    let r = &gt * DVector::from_column_slice(&mu);
    let residual = r.amax();
    Ok(CircleDensity { grid: gen.grid, values: mu, clipped_mass, residual, gap })
}

/// Exponent by trapezoid quadrature of the radial drift against the density;
/// the rescaled variant returns `eps^{2/3} int Q~ mu~`.
pub fn lyapunov_quadrature(density: &CircleDensity, problem: &CircleProblem, variant: GeneratorVariant) -> f64 {
    let grid = density.grid;
    let h = grid.spacing();
    let q: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|j| problem.radial_drift(variant, grid.node(j)))
        .collect();
    let integral: f64 = h * q.iter().zip(&density.values).map(|(a, b)| a * b).sum::<f64>();
    match variant {
        GeneratorVariant::Plain => integral,
        GeneratorVariant::Pw => problem.epsilon.powf(2.0 / 3.0) * integral,
    }
}

/// Residual of the density in the tangent-chart form of the stationary
/// equation,
/// `a cos^2 (sin^2 mu)' + 1/2 q eps^2 sigma^2 cos^2 (cos^2 (cos^2 mu)')'
///  + int [cos^2(zeta1) mu(zeta1) - cos^2 mu] nu(dz) = 0`,
/// evaluated with central differences and cubic interpolation; returns the
/// maximum over the grid. This is an independent consistency check on the
/// plain-variant density, not part of the solve.
pub fn chart_form_residual(density: &CircleDensity, problem: &CircleProblem) -> f64 {
    let grid = density.grid;
    let n = grid.len();
    let h = grid.spacing();
    let mu = &density.values;
    let cos2: Vec<f64> = (0..n).map(|j| grid.node(j).cos().powi(2)).collect();
    let sin2: Vec<f64> = cos2.iter().map(|c| 1.0 - c).collect();
    let d1 = |f: &dyn Fn(usize) -> f64, j: usize| (f((j + 1) % n) - f((j + n - 1) % n)) / (2.0 * h);
    let k = problem.noise.gaussian_rate() * problem.kappa() * problem.kappa();
    let c2mu: Vec<f64> = (0..n).map(|j| cos2[j] * mu[j]).collect();
    let inner: Vec<f64> = (0..n).map(|j| cos2[j] * d1(&|i| c2mu[i], j)).collect();
    let rule = problem.rule();
    let interp = |phi: f64| -> f64 { grid.interpolation_stencil(phi).iter().map(|&(i, w)| w * c2mu[i]).sum() };
    (0..n)
        .map(|j| {
            let theta = grid.node(j);
            let drift = problem.a * cos2[j] * d1(&|i| sin2[i] * mu[i], j);
            let diff = 0.5 * k * cos2[j] * d1(&|i| inner[i], j);
            let jump = rule.as_ref().map_or(0.0, |r| {
                r.integrate(|z| interp(exact_theta_jump(theta, problem.kappa() * z)) - c2mu[j])
            });
            (drift + diff + jump).abs()
        })
        .fold(0.0, f64::max)
}

/// Writes `theta, mu` rows under the schema header.
pub fn write_density_csv<W: Write>(out: &mut W, density: &CircleDensity) -> Result<()> {
    writeln!(out, "{SCHEMA_HEADER}")?;
    writeln!(out, "theta,mu")?;
    for (j, m) in density.values.iter().enumerate() {
        writeln!(out, "{},{}", fmt_f64(density.grid.node(j)), fmt_f64(*m))?;
    }
    Ok(())
}

/// Result of the full circle computation.
#[derive(Debug, Clone)]
pub struct CircleSolution {
    pub density: CircleDensity,
    pub lambda: f64,
    pub chart_residual: Option<f64>,
}

/// Builds, solves and integrates in one go.
pub fn solve_circle(problem: &CircleProblem, n: usize, variant: GeneratorVariant) -> Result<CircleSolution> {
    let grid = CircleGrid::new(n)?;
    let gen = build_generator(problem, grid, variant)?;
    let density = solve_stationary(&gen)?;
    let lambda = lyapunov_quadrature(&density, problem, variant);
    let chart_residual = (variant == GeneratorVariant::Plain).then(|| chart_form_residual(&density, problem));
    Ok(CircleSolution { density, lambda, chart_residual })
}
