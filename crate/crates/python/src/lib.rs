use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use levyap::commands;
use levyap::config::RunConfig;
use levyap::estimators::{LyapunovEstimate, Method, SweepResult};
use levyap::fpcircle::solve_circle;
use levyap::frame::frame_coefficients as frame_coefficients_rs;
use levyap::noise::{jump_moment, JumpMeasureSpec};
use levyap::systems::{self, DuffingSystem, NilpotentSystem};
use levyap::{Error, Vec2};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidParameter(_)
        | Error::Config(_)
        | Error::InvalidMeasure(_)
        | Error::InvalidGrid(_)
        | Error::DivergentMoment { .. }
        | Error::CriticalPoint { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_method(method: Option<&str>, cfg: &RunConfig) -> PyResult<Method> {
    match method {
        Some(m) => m.parse().map_err(to_py_err),
        None => Ok(cfg.run.method),
    }
}

/// Run configuration; mirrors the TOML file read by the command-line tool.
#[pyclass(name = "RunConfig", module = "pylevyap", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Parses a TOML document; defaults when omitted.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => RunConfig::from_toml(text).map_err(to_py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Self::new(Some(&text))
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Sets a dotted key to a TOML value, e.g. `set("run.epsilon", "0.2")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner = self.inner.with_overrides(&[format!("{key}={value}")]).map_err(to_py_err)?;
        Ok(())
    }

    /// Copy with `key=value` overrides applied in order.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_overrides(&overrides).map_err(to_py_err)? })
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py_err)
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.run.epsilon
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.run.method.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.estimator.seed
    }

    /// Runs one estimator (`direct`, `khasminskii`, `theorem33`, `fpcircle`);
    /// the configured method when omitted.
    #[pyo3(signature = (method = None))]
    fn estimate(&self, py: Python<'_>, method: Option<&str>) -> PyResult<PyLyapunovEstimate> {
        let method = parse_method(method, &self.inner)?;
        let cfg = self.inner.clone();
        let est = py.detach(move || commands::estimate(&cfg, method)).map_err(to_py_err)?;
        Ok(est.into())
    }

    /// One trajectory as CSV text.
    fn simulate(&self, py: Python<'_>) -> PyResult<String> {
        let cfg = self.inner.clone();
        let buf = py
            .detach(move || {
                let mut buf = Vec::new();
                commands::simulate(&cfg, &mut buf).map(|_| buf)
            })
            .map_err(to_py_err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Stationary angular density of the nilpotent system.
    fn solve_circle(&self, py: Python<'_>) -> PyResult<PyCircleSolution> {
        let cfg = self.inner.clone();
        py.detach(move || {
            let problem = cfg.circle_problem()?;
            let sol = solve_circle(&problem, cfg.fpcircle.grid, cfg.fpcircle.variant)?;
            Ok(PyCircleSolution {
                theta: sol.density.grid.nodes(),
                density: sol.density.values,
                lyapunov: sol.lambda,
                residual: sol.density.residual,
                chart_residual: sol.chart_residual,
                clipped_mass: sol.density.clipped_mass,
            })
        })
        .map_err(to_py_err)
    }

    /// Estimates at each epsilon and fits the log-log slope.
    #[pyo3(signature = (epsilons, method = None))]
    fn sweep(&self, py: Python<'_>, epsilons: Vec<f64>, method: Option<&str>) -> PyResult<PySweepResult> {
        let method = parse_method(method, &self.inner)?;
        let cfg = self.inner.clone();
        let r = py.detach(move || commands::sweep(&cfg, method, &epsilons)).map_err(to_py_err)?;
        Ok(r.into())
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(system={:?}, epsilon={}, method={})",
            self.inner.system.name, self.inner.run.epsilon, self.inner.run.method
        )
    }
}

#[pyclass(name = "LyapunovEstimate", module = "pylevyap", frozen, get_all)]
struct PyLyapunovEstimate {
    value: f64,
    stderr: f64,
    method: String,
    epsilon: f64,
    beta: f64,
    horizon: f64,
    replicates: usize,
    restarts: usize,
    unreliable: bool,
    per_replicate: Vec<f64>,
    residual: Option<f64>,
    martingale_mean: Option<f64>,
    martingale_stderr: Option<f64>,
}

impl From<LyapunovEstimate> for PyLyapunovEstimate {
    fn from(e: LyapunovEstimate) -> Self {
        Self {
            value: e.value,
            stderr: e.stderr,
            method: e.method.to_string(),
            epsilon: e.epsilon,
            beta: e.beta,
            horizon: e.horizon,
            replicates: e.replicates,
            restarts: e.restarts,
            unreliable: e.unreliable,
            per_replicate: e.per_replicate,
            residual: e.residual,
            martingale_mean: e.martingale.map(|m| m.mean),
            martingale_stderr: e.martingale.map(|m| m.stderr),
        }
    }
}

#[pymethods]
impl PyLyapunovEstimate {
    fn __repr__(&self) -> String {
        format!("LyapunovEstimate(method={}, value={}, stderr={})", self.method, self.value, self.stderr)
    }
}

#[pyclass(name = "CircleSolution", module = "pylevyap", frozen, get_all)]
struct PyCircleSolution {
    theta: Vec<f64>,
    density: Vec<f64>,
    lyapunov: f64,
    residual: f64,
    chart_residual: Option<f64>,
    clipped_mass: f64,
}

#[pyclass(name = "SweepResult", module = "pylevyap", frozen, get_all)]
struct PySweepResult {
    epsilons: Vec<f64>,
    values: Vec<f64>,
    stderrs: Vec<f64>,
    included: Vec<bool>,
    slope: f64,
    intercept: f64,
    residual: f64,
}

impl From<SweepResult> for PySweepResult {
    fn from(r: SweepResult) -> Self {
        Self {
            values: r.estimates.iter().map(|e| e.value).collect(),
            stderrs: r.estimates.iter().map(|e| e.stderr).collect(),
            epsilons: r.epsilons,
            included: r.included,
            slope: r.slope,
            intercept: r.intercept,
            residual: r.residual,
        }
    }
}

/// Symmetric alpha-stable jump measure restricted to `floor <= |z| < cutoff`.
#[pyclass(name = "JumpMeasure", module = "pylevyap", frozen)]
struct PyJumpMeasure {
    inner: JumpMeasureSpec,
}

#[pymethods]
impl PyJumpMeasure {
    #[new]
    #[pyo3(signature = (alpha, c_alpha = 1.0, cutoff = 1.0, floor = 1e-3))]
    fn new(alpha: f64, c_alpha: f64, cutoff: f64, floor: f64) -> PyResult<Self> {
        Ok(Self { inner: JumpMeasureSpec::new(alpha, c_alpha, cutoff, floor, 1).map_err(to_py_err)? })
    }

    fn intensity(&self) -> f64 {
        self.inner.intensity()
    }

    fn second_moment(&self) -> f64 {
        self.inner.second_moment()
    }

    /// `int_{lo <= |z| < hi} |z|^p nu(dz)`.
    fn moment(&self, p: f64, lo: f64, hi: f64) -> PyResult<f64> {
        jump_moment(&self.inner, p, lo, hi).map_err(to_py_err)
    }
}

/// Frame coefficients `(A, B, C, D, E)` of a shipped system at `x`.
#[pyfunction]
#[pyo3(signature = (system, x, sigma = 1.0, a = 1.0))]
fn frame_coefficients(system: &str, x: (f64, f64), sigma: f64, a: f64) -> PyResult<(f64, f64, f64, f64, f64)> {
    let p = Vec2::new(x.0, x.1);
    let c = match system {
        "nilpotent" => frame_coefficients_rs(&NilpotentSystem::new(a, sigma).map_err(to_py_err)?, p, 1e-9),
        "duffing" => frame_coefficients_rs(&DuffingSystem::new(sigma).map_err(to_py_err)?, p, 1e-9),
        other => return Err(PyValueError::new_err(format!("unknown system `{other}`"))),
    }
    .map_err(to_py_err)?;
    let f = c.fields[0];
    Ok((c.a, f.b, f.c, f.d, f.e))
}

/// Angle after the unipotent jump with product `kz`.
#[pyfunction]
fn exact_theta_jump(theta: f64, kz: f64) -> f64 {
    systems::exact_theta_jump(theta, kz)
}

/// Log-radius increment of the same jump.
#[pyfunction]
fn exact_rho_jump(theta: f64, kz: f64) -> f64 {
    systems::exact_rho_jump(theta, kz)
}

#[pymodule]
fn pylevyap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyLyapunovEstimate>()?;
    m.add_class::<PyCircleSolution>()?;
    m.add_class::<PySweepResult>()?;
    m.add_class::<PyJumpMeasure>()?;
    m.add_function(wrap_pyfunction!(frame_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(exact_theta_jump, m)?)?;
    m.add_function(wrap_pyfunction!(exact_rho_jump, m)?)?;
    Ok(())
}
