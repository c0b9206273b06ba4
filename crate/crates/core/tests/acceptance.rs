//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p levyap --release --test acceptance`. Positional
//! arguments filter criteria by substring of their names (`c1_scaling`, ...),
//! as libtest filters do; without arguments every criterion runs. The scaling
//! sweeps of `c1_scaling` dominate the runtime.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use levyap::estimators::{lyapunov_direct, lyapunov_khasminskii, scaling_sweep, EstimatorConfig};
use levyap::fpcircle::{solve_circle, CircleProblem, GeneratorVariant};
use levyap::frame::{angular_flow_ode, decompose_tangent, frame_coefficients, recompose_tangent};
use levyap::marcus::{generic_jump_flow, integrate, marcus_jump_map, ExitFlag, MarcusSde, StepperConfig};
use levyap::model::{HamiltonianModel, PerturbedSystem};
use levyap::noise::{jump_moment, JumpMeasureSpec, JumpRule, NoiseModel};
use levyap::systems::{exact_rho_jump, exact_theta_jump, DuffingSystem, NilpotentSystem};
use levyap::{Error, Vec2};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

type Outcome = (bool, String);

struct Criterion {
    name: &'static str,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { name: "c1_scaling", run: c1_scaling },
    Criterion { name: "c2_triangle", run: c2_triangle },
    Criterion { name: "c3_jump_moment", run: c3_jump_moment },
    Criterion { name: "c4_marcus_flow", run: c4_marcus_flow },
    Criterion { name: "c5_frame_algebra", run: c5_frame_algebra },
    Criterion { name: "c6_conservation_exit", run: c6_conservation_exit },
    Criterion { name: "c7_taylor", run: c7_taylor },
    Criterion { name: "c8_determinism", run: c8_determinism },
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())))
        .collect();
    let mut failed = 0;
    for c in &selected {
        let start = Instant::now();
        let (ok, detail) = std::panic::catch_unwind(c.run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        if !ok {
            failed += 1;
        }
        println!(
            "{} {} ({:.1} s): {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            start.elapsed().as_secs_f64(),
            detail
        );
    }
    println!("acceptance: {} run, {} failed", selected.len(), failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn measure() -> JumpMeasureSpec {
    JumpMeasureSpec::new(1.5, 1.0, 1.0, 1e-3, 1).unwrap()
}

/// Nilpotent system, a = sigma = 1.
fn nilpotent() -> NilpotentSystem {
    NilpotentSystem::new(1.0, 1.0).unwrap()
}

// ---------------------------------------------------------------------------

fn c1_scaling() -> Outcome {
    let eps = [0.05, 0.08, 0.125, 0.2, 0.32];
    let cfg = EstimatorConfig {
        stepper: StepperConfig::with_dt(1e-3),
        horizon: 1e4,
        replicates: 16,
        seed: 1,
        ..EstimatorConfig::default()
    };
    let sys = nilpotent();
    let mut ok = true;
    let mut detail = Vec::new();
    for (label, noise, lo, hi) in [
        ("brownian", NoiseModel::brownian(), 0.57, 0.77),
        ("brownian+jumps", NoiseModel::levy(measure()), 0.52, 0.82),
    ] {
        match scaling_sweep(&sys, noise, &eps, &cfg) {
            Ok(r) => {
                let pass = (lo..=hi).contains(&r.slope);
                ok &= pass;
                let values: Vec<String> = r.estimates.iter().map(|e| format!("{:.4}", e.value)).collect();
                detail.push(format!(
                    "{label}: slope {:.4} in [{lo}, {hi}] {} (lambda = {})",
                    r.slope,
                    if pass { "yes" } else { "no" },
                    values.join(", ")
                ));
            }
            Err(e) => {
                ok = false;
                detail.push(format!("{label}: {e}"));
            }
        }
    }
    (ok, detail.join("; "))
}

fn c2_triangle() -> Outcome {
    let eps = 0.1;
    let noise = NoiseModel::levy(measure());
    let cfg = EstimatorConfig {
        stepper: StepperConfig::with_dt(1e-3),
        horizon: 1000.0,
        replicates: 16,
        seed: 7,
        ..EstimatorConfig::default()
    };
    let sys = nilpotent();
    let direct = lyapunov_direct(&sys, eps, noise, &cfg).unwrap();
    let khas = lyapunov_khasminskii(&sys, eps, noise, &cfg).unwrap().estimate;
    let problem = CircleProblem::new(1.0, 1.0, eps, noise).unwrap();
    let fp = solve_circle(&problem, 512, GeneratorVariant::Plain).unwrap();
    let vals = [("direct", direct.value, direct.stderr), ("khasminskii", khas.value, khas.stderr), ("fpcircle", fp.lambda, 0.0)];
    let mut ok = fp.density.residual < 1e-6;
    let mut pairs = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            let (na, a, sa) = vals[i];
            let (nb, b, sb) = vals[j];
            let z = (a - b).abs() / sa.hypot(sb);
            ok &= z <= 3.0;
            pairs.push(format!("{na}-{nb} {z:.2} se"));
        }
    }
    (
        ok,
        format!(
            "direct {:.5}±{:.5}, khasminskii {:.5}±{:.5}, fpcircle {:.5} (residual {:.1e}); {}",
            direct.value,
            direct.stderr,
            khas.value,
            khas.stderr,
            fp.lambda,
            fp.density.residual,
            pairs.join(", ")
        ),
    )
}

/// Adaptive Simpson quadrature of a smooth integrand.
fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 30)
}

/// `int_{|z| < c} z^2 nu(dz)` by adaptive Simpson on dyadic shells
/// `[c 2^{-k-1}, c 2^{-k}]`, on each of which the integrand is smooth.
fn oracle_second_moment(alpha: f64, c_alpha: f64, c: f64) -> f64 {
    // z^2 |z|^{-1-alpha}, written so that the deepest shells do not overflow.
    let f = |z: f64| 2.0 * c_alpha * z.powf(1.0 - alpha);
    (0..400)
        .map(|k| {
            let hi = c * 0.5f64.powi(k);
            let scale = 2.0 * c_alpha * hi.powf(2.0 - alpha);
            adaptive_simpson(&f, 0.5 * hi, hi, 1e-13 * scale)
        })
        .sum()
}

fn c3_jump_moment() -> Outcome {
    let mut worst: f64 = 0.0;
    for alpha in [1.2, 1.5, 1.8] {
        for c in [0.5, 1.0, 2.0] {
            let m = JumpMeasureSpec::new(alpha, 1.0, c, 0.0, 1).unwrap();
            let oracle = oracle_second_moment(alpha, 1.0, c);
            let closed = 2.0 * c.powf(2.0 - alpha) / (2.0 - alpha);
            let library = jump_moment(&m, 2.0, 0.0, c).unwrap();
            let numeric = JumpRule::new(&m, 0.0, c, 16).integrate(|z| z * z);
            for v in [oracle, library, numeric] {
                worst = worst.max((v - closed).abs() / closed);
            }
        }
    }
    let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 0.0, 1).unwrap();
    let four = jump_moment(&m, 2.0, 0.0, 1.0).unwrap();
    let ok = worst < 1e-8 && (four - 4.0).abs() < 1e-8 * 4.0;
    (ok, format!("max relative error {worst:.2e} over 9 (alpha, c) pairs; value at alpha = 1.5, c = 1: {four}"))
}

fn c4_marcus_flow() -> Outcome {
    let cfg = StepperConfig { flow_substeps: 256, ..StepperConfig::default() };
    let nil = nilpotent();
    let duff = DuffingSystem::new(1.0).unwrap();
    let mut r = rng(4);
    let (mut zero_err, mut rev_err, mut closed_err, mut zeta_err): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let x = Vec2::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let eps = r.random_range(0.01..1.0);
        let z = r.random_range(-1.0..1.0);
        for sys in [&nil as &dyn PerturbedSystem, &duff] {
            zero_err = zero_err.max((marcus_jump_map(sys, eps, &[0.0], x, &cfg).unwrap() - x).norm());
            for map in [
                |s: &dyn PerturbedSystem, e: f64, z: f64, x: Vec2, c: &StepperConfig| marcus_jump_map(s, e, &[z], x, c).unwrap(),
                |s: &dyn PerturbedSystem, e: f64, z: f64, x: Vec2, c: &StepperConfig| {
                    generic_jump_flow(s, e, &[z], x, c).unwrap().0
                },
            ] {
                let back = map(sys, eps, -z, map(sys, eps, z, x, &cfg), &cfg);
                rev_err = rev_err.max((back - x).norm() / (1.0 + x.norm()));
            }
        }
        let want = Vec2::new(x.x, eps * nil.sigma * z * x.x + x.y);
        closed_err = closed_err.max((marcus_jump_map(&nil, eps, &[z], x, &cfg).unwrap() - want).norm());
        let theta = r.random_range(0.0..std::f64::consts::TAU);
        for beta in [0.0, 2.0 / 3.0] {
            let k = eps.powf(1.0 - beta) * nil.sigma * z;
            let ode = angular_flow_ode(&nil, eps, beta, &[z], x, theta, &cfg).unwrap();
            let dth = (ode.theta - exact_theta_jump(theta, k) + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            zeta_err = zeta_err.max(dth.abs()).max((ode.log_growth - exact_rho_jump(theta, k)).abs());
        }
    }
    let ok = zero_err == 0.0 && rev_err < 1e-10 && closed_err == 0.0 && zeta_err < 1e-8;
    (
        ok,
        format!(
            "zero mark {zero_err:.1e}, reversal {rev_err:.1e}, nilpotent closed form {closed_err:.1e}, zeta vs flow ODE {zeta_err:.1e} (1000 points)"
        ),
    )
}

fn c5_frame_algebra() -> Outcome {
    let tol = 1e-9;
    let duff = DuffingSystem::new(0.7).unwrap();
    let nil = NilpotentSystem::new(1.3, 0.8).unwrap();
    let mut r = rng(5);
    let (mut round, mut nil_err, mut b_e, mut closed): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..1000 {
        let x = Vec2::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        if duff.gradient(x).norm() < 1e-3 {
            continue;
        }
        let v = Vec2::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let w = decompose_tangent(&duff, x, v, tol).unwrap();
        round = round.max((recompose_tangent(&duff, x, w, tol).unwrap() - v).norm() / v.norm().max(1e-300));
        let fc = frame_coefficients(&duff, x, tol).unwrap();
        let f = fc.fields[0];
        b_e = b_e.max((f.b + f.e).abs());
        let want = duff.closed_form_coefficients(x);
        let got = [fc.a, f.b, f.c, f.d, f.e];
        for (g, w) in got.iter().zip(want) {
            closed = closed.max((g - w).abs() / (1.0 + w.abs()));
        }
        let nc = frame_coefficients(&nil, x, tol).unwrap();
        let g = nc.fields[0];
        nil_err = nil_err
            .max((nc.a - 1.3).abs())
            .max((g.d - 0.8).abs())
            .max(g.b.abs())
            .max(g.c.abs())
            .max(g.e.abs());
    }
    let ok = round < 1e-12 && nil_err == 0.0 && b_e < 1e-8 && closed < 1e-8;
    (
        ok,
        format!(
            "round trip {round:.1e}, nilpotent (A, D, B, C, E) {nil_err:.1e}, B + E {b_e:.1e}, Duffing closed forms {closed:.1e}"
        ),
    )
}

fn c6_conservation_exit() -> Outcome {
    let duff = DuffingSystem::new(1.0).unwrap();
    let cfg = StepperConfig::with_dt(1e-3);
    let sde = MarcusSde::new(&duff, 0.0, NoiseModel::levy(measure())).unwrap();
    let x0 = Vec2::new(1.0, 0.5);
    let h0 = duff.hamiltonian(x0);
    let mut drift: f64 = 0.0;
    let end = integrate(&sde, x0, None, 100.0, &cfg, &mut rng(6), |s| {
        drift = drift.max((duff.hamiltonian(s.x) - h0).abs());
    })
    .unwrap();
    let mut exits = Vec::new();
    for sys in [&duff as &dyn PerturbedSystem, &nilpotent()] {
        let sde = MarcusSde::new(sys, 0.1, NoiseModel::brownian()).unwrap();
        let r = integrate(&sde, Vec2::zeros(), None, 1.0, &cfg, &mut rng(6), |_| {});
        exits.push(matches!(r, Err(Error::ExitDetected { t, flag: ExitFlag::CriticalPoint }) if t == 0.0));
    }
    let ok = drift < 1e-6 && (end.t - 100.0).abs() < 1e-9 && exits.iter().all(|e| *e);
    (ok, format!("max |H - H0| = {drift:.2e} over t in [0, {:.0}]; origin exits immediately: {exits:?}", end.t))
}

fn c7_taylor() -> Outcome {
    let sigma = 1.0;
    let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 1e-12, 1).unwrap();
    let m2 = jump_moment(&m, 2.0, 0.0, m.cutoff).unwrap();
    let thetas: Vec<f64> = (0..64).map(|j| std::f64::consts::TAU * j as f64 / 64.0).collect();
    let limit: Vec<f64> = thetas
        .iter()
        .map(|t| {
            let (s, c) = t.sin_cos();
            sigma * sigma * (0.5 * c * c - s * s * c * c) * m2
        })
        .collect();
    let scale = limit.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut ok = true;
    let mut detail = Vec::new();
    for eps in [1e-2, 1e-3] {
        let mut p = CircleProblem::new(1.0, sigma, eps, NoiseModel::pure_jump(m)).unwrap();
        p.z_nodes = 64;
        let err = thetas
            .iter()
            .zip(&limit)
            .map(|(t, l)| (p.zeta2_integral(*t) / (eps * eps) - l).abs())
            .fold(0.0, f64::max)
            / scale;
        ok &= err < 0.01;
        detail.push(format!("eps = {eps:e}: sup relative deviation {err:.2e}"));
    }
    (ok, detail.join(", "))
}

fn run_cli(args: &[&str], dir: &Path, outputs: &[&str]) -> Result<Vec<Vec<u8>>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_levyap"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    outputs
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--seed", "11", "--jumps", "--epsilon", "0.2"];
    let jobs: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["simulate", "--horizon", "5", "--angles", "--stride", "10", "-o", "sim.csv"], vec!["sim.csv"]),
        (
            vec!["lyapunov", "--method", "direct", "--horizon", "20", "--replicates", "8", "-o", "d.json", "--csv", "d.csv"],
            vec!["d.json", "d.csv"],
        ),
        (vec!["lyapunov", "--method", "khasminskii", "--horizon", "20", "--replicates", "8", "-o", "k.json"], vec!["k.json"]),
        (vec!["lyapunov", "--method", "theorem33", "--horizon", "10", "--replicates", "4", "-o", "t.json"], vec!["t.json"]),
        (
            vec!["sweep", "--epsilons", "0.1,0.2,0.3,0.4", "--horizon", "10", "--replicates", "4", "-o", "s.csv", "--fit", "s.json"],
            vec!["s.csv", "s.json"],
        ),
        (vec!["fp-solve", "--grid", "128", "-o", "fp.csv", "--summary", "fp.json"], vec!["fp.csv", "fp.json"]),
    ];
    let mut compared = 0;
    for (args, files) in &jobs {
        let mut reference: Option<Vec<Vec<u8>>> = None;
        for threads in ["1", "4", "8", "1"] {
            let mut full: Vec<&str> = args.clone();
            full.extend_from_slice(&common);
            full.extend_from_slice(&["--threads", threads]);
            let got = match run_cli(&full, dir.path(), files) {
                Ok(g) => g,
                Err(e) => return (false, e),
            };
            if got.iter().any(|b| b.is_empty()) {
                return (false, format!("{}: empty output", args[0]));
            }
            match &reference {
                None => reference = Some(got),
                Some(r) if *r != got => {
                    return (false, format!("{} output differs at {threads} threads", args.join(" ")));
                }
                Some(_) => compared += files.len(),
            }
        }
    }
    (true, format!("{compared} output files byte-identical across repeated runs and 1/4/8 threads"))
}
