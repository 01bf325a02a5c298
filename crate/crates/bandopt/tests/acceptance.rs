//! End-to-end acceptance suite.
//!
//! Each test exercises one externally checkable property of the solver,
//! certifier, or simulator, prints a single `ACCEPTANCE <n>: PASS/FAIL`
//! line, and enforces a wall-clock budget. The tests are serialized through
//! a mutex so the budgets measure the criterion alone, not scheduler noise
//! from sibling tests.

use std::sync::Mutex;
use std::time::Instant;

use bandopt::characteristic::characteristic_roots;
use bandopt::free_boundary::{solve_optimal, BandSolver, ControlBand, ToleranceSet};
use bandopt::gfunction::{GCoefficients, GEvaluator};
use bandopt::holding_cost::{make_linear, make_quadratic, HoldingCost, ModelParams};
use bandopt::policy_sim::{grid_search_band, simulate_policy, AxisSpec, BandGridSpec, SimConfig};
use bandopt::value_function::{GridSpec, ValueContext};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static GATE: Mutex<()> = Mutex::new(());

/// Runs one criterion under the gate, prints its outcome line, and panics
/// on failure or on a blown time budget.
fn criterion(id: u32, budget_s: f64, body: impl FnOnce() -> Result<String, String>) {
    let _lock = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = body();
    let elapsed = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) if elapsed <= budget_s => {
            println!("ACCEPTANCE {id}: PASS ({detail}; {elapsed:.2}s)");
        }
        Ok(detail) => {
            println!(
                "ACCEPTANCE {id}: FAIL (over budget: {elapsed:.2}s > {budget_s}s; {detail})"
            );
            panic!("criterion {id} exceeded its {budget_s}s budget ({elapsed:.2}s)");
        }
        Err(why) => {
            println!("ACCEPTANCE {id}: FAIL ({why}; {elapsed:.2}s)");
            panic!("criterion {id} failed: {why}");
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err(format!($($arg)+));
        }
    };
}

fn ok<T>(r: Result<T, bandopt::Error>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Symmetric quadratic instance: h(x) = x^2, mu = 0, sigma^2 = 2, beta = 1,
/// K = L = 1, k = l = 0.5.
fn quad_sym() -> (ModelParams, HoldingCost) {
    let m = ModelParams::new(0.0, 2.0, 1.0, 1.0, 0.5, 1.0, 0.5).unwrap();
    let h = make_quadratic(0.0, 1.0, 0.0, 1.0).unwrap();
    (m, h)
}

/// Symmetric linear instance: h(x) = |x|, same other parameters.
fn lin_sym() -> (ModelParams, HoldingCost) {
    let m = ModelParams::new(0.0, 2.0, 1.0, 1.0, 0.5, 1.0, 0.5).unwrap();
    let h = make_linear(1.0, 1.0).unwrap();
    (m, h)
}

fn instances() -> [(&'static str, ModelParams, HoldingCost); 2] {
    let (mq, hq) = quad_sym();
    let (ml, hl) = lin_sym();
    [("quadratic", mq, hq), ("linear", ml, hl)]
}

#[test]
fn acceptance_01_root_identities_hold_for_random_parameters() {
    criterion(1, 1.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        for i in 0..100 {
            let mu: f64 = rng.gen_range(-10.0..10.0);
            let sigma2: f64 = rng.gen_range(0.05..10.0);
            let beta: f64 = rng.gen_range(0.01..5.0);
            let m = ok(ModelParams::new(mu, sigma2, beta, 1.0, 0.5, 1.0, 0.5))?;
            let r = characteristic_roots(&m);
            ensure!(
                r.lambda1 > 0.0 && r.lambda2 > 0.0,
                "draw {i}: roots must be positive, got ({}, {})",
                r.lambda1,
                r.lambda2
            );
            let product = 2.0 * beta / sigma2;
            let rel_prod = (r.lambda1 * r.lambda2 - product).abs() / product;
            // lambda1 solves (sigma^2/2) r^2 + mu r - beta = 0 (decay rate of
            // the left-growing mode), lambda2 the same with -mu.
            let res1 = 0.5 * sigma2 * r.lambda1 * r.lambda1 + mu * r.lambda1 - beta;
            let scale1 = 0.5 * sigma2 * r.lambda1 * r.lambda1 + mu.abs() * r.lambda1 + beta;
            let res2 = 0.5 * sigma2 * r.lambda2 * r.lambda2 - mu * r.lambda2 - beta;
            let scale2 = 0.5 * sigma2 * r.lambda2 * r.lambda2 + mu.abs() * r.lambda2 + beta;
            let rel1 = res1.abs() / scale1;
            let rel2 = res2.abs() / scale2;
            worst = worst.max(rel_prod).max(rel1).max(rel2);
            ensure!(
                rel_prod <= 1e-12,
                "draw {i} (mu={mu}, sigma2={sigma2}, beta={beta}): product identity off by {rel_prod:e}"
            );
            ensure!(
                rel1 <= 1e-12 && rel2 <= 1e-12,
                "draw {i} (mu={mu}, sigma2={sigma2}, beta={beta}): quadratic residuals {rel1:e}, {rel2:e}"
            );
        }
        Ok(format!("100 draws, worst relative residual {worst:.2e}"))
    });
}

#[test]
fn acceptance_02_ode_residuals_vanish_to_fd_accuracy() {
    criterion(2, 10.0, || {
        let delta = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let mut worst = 0.0f64;
        for (name, m, h) in instances() {
            let report = ok(solve_optimal(&m, &h, &ToleranceSet::default()))?;
            let ctx = ValueContext::new(&m, &h);
            let pv = ok(ctx.policy_value(report.band))?;
            let ev = GEvaluator::new(&m, &h, ctx.roots());
            let [d, _, _, u] = report.band.points();

            // Central second difference of f around x.
            let ode = |fm: f64, f0: f64, fp: f64, source: f64| -> f64 {
                0.5 * m.sigma2 * (fp - 2.0 * f0 + fm) / (delta * delta)
                    + m.mu * (fp - fm) / (2.0 * delta)
                    - m.beta * f0
                    + source
            };
            let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> f64 {
                loop {
                    let x = rng.gen_range(lo..hi);
                    if (x - h.kink()).abs() > 0.02 {
                        return x;
                    }
                }
            };

            for i in 0..200 {
                // Particular solution: (sigma^2/2) f'' + mu f' - beta f + h = 0.
                let x = draw(&mut rng, -3.0, 3.0);
                let f0 = ok(ctx.v0(x))?;
                let r = ode(ok(ctx.v0(x - delta))?, f0, ok(ctx.v0(x + delta))?, h.eval(x));
                let rel = r.abs() / (1.0 + f0.abs());
                worst = worst.max(rel);
                ensure!(
                    rel <= 1e-4,
                    "{name} particular solution, point {i} at x={x}: residual {rel:e}"
                );

                // Derivative family member at the solved coefficients:
                // (sigma^2/2) g'' + mu g' - beta g + h' = 0.
                let x = draw(&mut rng, -3.0, 3.0);
                let g0 = ok(ev.g(report.coeffs, x))?;
                let r = ode(
                    ok(ev.g(report.coeffs, x - delta))?,
                    g0,
                    ok(ev.g(report.coeffs, x + delta))?,
                    h.deriv(x),
                );
                let rel = r.abs() / (1.0 + g0.abs());
                worst = worst.max(rel);
                ensure!(
                    rel <= 1e-4,
                    "{name} derivative family, point {i} at x={x}: residual {rel:e}"
                );

                // In-band policy value solves the same equation as v0.
                let x = draw(&mut rng, d + 0.02, u - 0.02);
                let f0 = ok(ctx.v(&pv, x))?;
                let r = ode(ok(ctx.v(&pv, x - delta))?, f0, ok(ctx.v(&pv, x + delta))?, h.eval(x));
                let rel = r.abs() / (1.0 + f0.abs());
                worst = worst.max(rel);
                ensure!(
                    rel <= 1e-4,
                    "{name} in-band value, point {i} at x={x}: residual {rel:e}"
                );
            }
        }
        Ok(format!(
            "600 finite-difference checks per instance, worst scaled residual {worst:.2e}"
        ))
    });
}

#[test]
fn acceptance_03_band_conditions_are_satisfied_at_the_optimum() {
    criterion(3, 12.0, || {
        let keys = [
            "g_d_plus_k",
            "g_D_plus_k",
            "g_U_minus_l",
            "g_u_minus_l",
            "lower_area_plus_K",
            "upper_area_minus_L",
        ];
        let mut worst = 0.0f64;
        for (name, m, h) in instances() {
            let start = Instant::now();
            let report = ok(solve_optimal(&m, &h, &ToleranceSet::default()))?;
            let secs = start.elapsed().as_secs_f64();
            ensure!(secs < 5.0, "{name}: solve took {secs:.2}s, budget is 5s per instance");
            for key in keys {
                let r = report
                    .residuals
                    .get(key)
                    .ok_or_else(|| format!("{name}: missing residual {key}"))?;
                worst = worst.max(r.abs());
                ensure!(r.abs() <= 1e-7, "{name}: residual {key} = {r:e} exceeds 1e-7");
            }
            let [d, big_d, big_u, u] = report.band.points();
            let (x1, x2) = (report.critical.x1, report.critical.x2);
            ensure!(
                d < x1 && x1 < big_d && big_d < big_u && big_u < x2 && x2 < u,
                "{name}: ordering d<x1<D<U<x2<u violated: \
                 {d} / {x1} / {big_d} / {big_u} / {x2} / {u}"
            );
        }
        Ok(format!("both instances solved, worst residual {worst:.2e}"))
    });
}

#[test]
fn acceptance_04_symmetric_instances_give_symmetric_bands() {
    criterion(4, 12.0, || {
        let mut worst = 0.0f64;
        for (name, m, h) in instances() {
            let report = ok(solve_optimal(&m, &h, &ToleranceSet::default()))?;
            let [d, big_d, big_u, u] = report.band.points();
            let pairs = [
                ("A + B", report.coeffs.a + report.coeffs.b),
                ("d + u", d + u),
                ("D + U", big_d + big_u),
            ];
            for (label, v) in pairs {
                worst = worst.max(v.abs());
                ensure!(
                    v.abs() <= 1e-6,
                    "{name}: mirror symmetry broken, {label} = {v:e}"
                );
            }
        }
        Ok(format!("both instances mirror-symmetric, worst asymmetry {worst:.2e}"))
    });
}

#[test]
fn acceptance_05_certification_accepts_the_optimum_and_flags_a_perturbation() {
    criterion(5, 30.0, || {
        let (m, h) = quad_sym();
        let report = ok(solve_optimal(&m, &h, &ToleranceSet::default()))?;
        let ctx = ValueContext::new(&m, &h);
        let [d, big_d, big_u, u] = report.band.points();

        let pv = ok(ctx.policy_value(report.band))?;
        let grid = GridSpec { lo: d - 6.0, hi: u + 6.0, points: 4001 };
        let ver = ok(ctx.verify_qvi(&pv, &grid, 1e-6))?;
        ensure!(
            ver.pass,
            "solver band rejected: min generator residual {}, jump violations {} / {}, \
             pasting {:?}",
            ver.min_qvi_residual,
            ver.max_k_violation,
            ver.max_l_violation,
            ver.pasting_residuals
        );

        let shifted = ok(ControlBand::new(d + 0.1, big_d, big_u, u))?;
        let pv2 = ok(ctx.policy_value(shifted))?;
        let grid2 = GridSpec { lo: d + 0.1 - 6.0, hi: u + 6.0, points: 4001 };
        let ver2 = ok(ctx.verify_qvi(&pv2, &grid2, 1e-6))?;
        ensure!(!ver2.pass, "a band with its lower trigger moved by 0.1 must fail the check");
        ensure!(
            ver2.pasting_residuals[0].abs() > 1e-6,
            "expected the broken derivative match at the lower trigger to be reported, got {:?}",
            ver2.pasting_residuals
        );
        Ok(format!(
            "optimal band certified (min residual {:.2e}); shifted band rejected \
             (derivative mismatch {:.3} at the lower trigger)",
            ver.min_qvi_residual, ver2.pasting_residuals[0]
        ))
    });
}

#[test]
fn acceptance_06_lattice_search_confirms_dominance() {
    criterion(6, 120.0, || {
        let (m, h) = quad_sym();
        let report = ok(solve_optimal(&m, &h, &ToleranceSet::default()))?;
        let ctx = ValueContext::new(&m, &h);
        let pv = ok(ctx.policy_value(report.band))?;
        let solver_value = ok(ctx.value_bar(&pv, 0.0))?;

        let grid = BandGridSpec::Symmetric {
            upper_target: AxisSpec { lo: 0.10, hi: 1.00, step: 0.02 },
            upper_trigger: AxisSpec { lo: 1.60, hi: 3.20, step: 0.02 },
        };
        let (best, best_value, table) = ok(grid_search_band(&m, &h, 0.0, &grid))?;
        ensure!(
            best_value >= solver_value - 0.01,
            "lattice candidate {:?} costs {best_value}, undercutting the solver's \
             {solver_value} by more than 0.01",
            best.points()
        );
        let sb = report.band.points();
        let bb = best.points();
        for i in 0..4 {
            ensure!(
                (sb[i] - bb[i]).abs() <= 0.1,
                "lattice minimizer {:?} is farther than 0.1 from the solver band {:?}",
                bb,
                sb
            );
        }
        Ok(format!(
            "{} candidates priced; best lattice cost {best_value:.6} vs solver {solver_value:.6}",
            table.len()
        ))
    });
}

#[test]
fn acceptance_07_monte_carlo_matches_the_closed_form_value() {
    criterion(7, 300.0, || {
        let (m, h) = quad_sym();
        let report = ok(solve_optimal(&m, &h, &ToleranceSet::default()))?;
        let ctx = ValueContext::new(&m, &h);
        let pv = ok(ctx.policy_value(report.band))?;
        let target = ok(ctx.value_bar(&pv, 0.0))?;

        let cfg = SimConfig {
            dt: 1e-4,
            horizon: 18.0,
            paths: 50_000,
            seed: 2207,
            antithetic: false,
        };
        let est = ok(simulate_policy(&report.band, &m, &h, 0.0, &cfg))?;
        let margin = (3.0 * est.std_error).max(0.02 * target);
        let gap = (est.mean - target).abs();
        ensure!(
            gap <= margin,
            "simulated mean {} vs closed form {target}: gap {gap:.4} exceeds margin {margin:.4} \
             (SE {:.4})",
            est.mean,
            est.std_error
        );
        Ok(format!(
            "50,000 paths at dt=1e-4: mean {:.4} vs closed form {target:.4} \
             (gap {gap:.4}, margin {margin:.4})",
            est.mean
        ))
    });
}

#[test]
fn acceptance_08_wide_band_simulation_recovers_the_uncontrolled_cost() {
    criterion(8, 120.0, || {
        let (m, h) = quad_sym();
        // Triggers forty units out are unreachable over an 18-unit horizon
        // with sigma^2 = 2, so the policy never acts and the discounted cost
        // is the uncontrolled integral x0^2 + sigma^2/beta^2 = 2 at x0 = 0.
        let band = ok(ControlBand::new(-40.0, -39.0, 39.0, 40.0))?;
        let cfg = SimConfig {
            dt: 1e-3,
            horizon: 18.0,
            paths: 20_000,
            seed: 7,
            antithetic: false,
        };
        let est = ok(simulate_policy(&band, &m, &h, 0.0, &cfg))?;
        ensure!(
            est.upward_adjustments == 0 && est.downward_adjustments == 0,
            "wide band was hit: {} up / {} down adjustments",
            est.upward_adjustments,
            est.downward_adjustments
        );
        let gap = (est.mean - 2.0).abs();
        let margin = 3.0 * est.std_error;
        ensure!(
            gap <= margin,
            "simulated mean {} vs uncontrolled cost 2.0: gap {gap:.4} exceeds 3 SE = {margin:.4}",
            est.mean
        );
        Ok(format!(
            "20,000 untouched paths: mean {:.4} vs 2.0 (gap {gap:.4}, 3 SE = {margin:.4})",
            est.mean
        ))
    });
}

#[test]
fn acceptance_09_boundary_curves_are_monotone() {
    criterion(9, 30.0, || {
        let (m, h) = quad_sym();
        let solver = ok(BandSolver::new(&m, &h, &ToleranceSet::default()))?;
        let (a_int, _) = ok(solver.intersection())?;
        let a_bar_1 = ok(solver.a_bar_1(a_int))?;
        let report = ok(solver.solve())?;

        let strictly_decreasing = |label: &str, pairs: &[(f64, f64)]| -> Result<(), String> {
            for w in pairs.windows(2) {
                ensure!(
                    w[1].1 < w[0].1,
                    "{label} is not strictly decreasing: {label}({}) = {} vs {label}({}) = {}",
                    w[0].0,
                    w[0].1,
                    w[1].0,
                    w[1].1
                );
            }
            Ok(())
        };

        // Upper boundary of the feasible region, B as a function of A.
        let mut curve = Vec::new();
        for i in 0..5 {
            let a = a_int + (a_bar_1 - a_int) * (0.1 + 0.2 * i as f64);
            curve.push((a, ok(solver.overline_b(a))?));
        }
        strictly_decreasing("overline_B", &curve)?;

        // Lower boundary, A as a function of B (defined for B < l*beta = 0.5).
        let mut curve = Vec::new();
        for b in [-1.0, -0.6, -0.2, 0.2, 0.4] {
            curve.push((b, ok(solver.underline_a(b))?));
        }
        strictly_decreasing("underline_A", &curve)?;

        // The equal-area locus A*(B) scanned by the outer solve.
        let mut curve = Vec::new();
        for b in [-1.4, -1.1, -0.9, -0.8] {
            curve.push((b, ok(solver.a_star(b, a_bar_1))?));
        }
        strictly_decreasing("A_star", &curve)?;

        // Stationary points of g: x1 moves left and x2 moves right as A grows
        // at fixed B.
        let ev = solver.evaluator();
        let b = report.coeffs.b;
        let mut x1s = Vec::new();
        let mut x2s = Vec::new();
        for i in 0..5 {
            let a = report.coeffs.a + 0.02 * (i as f64 - 2.0);
            let cp = ok(ev.critical_points(GCoefficients { a, b }, 1e-11))?;
            x1s.push((a, cp.x1));
            x2s.push((a, -cp.x2));
        }
        strictly_decreasing("x1", &x1s)?;
        strictly_decreasing("-x2", &x2s)?;

        Ok("all three boundary curves strictly decreasing; x1 falls and x2 rises in A".into())
    });
}

#[test]
fn acceptance_10_pipeline_runs_are_byte_identical() {
    criterion(10, 300.0, || {
        let config = r#"
[model]
mu = 0.0
sigma2 = 2.0
beta = 1.0
fixed_cost_up = 1.0
var_cost_up = 0.5
fixed_cost_down = 1.0
var_cost_down = 0.5

[cost]
kind = "quadratic"
up1 = 0.0
up2 = 1.0
down1 = 0.0
down2 = 1.0

[sim]
dt = 5e-4
horizon = 12.0
paths = 3000
seed = 4242

[search]
mode = "symmetric"
upper_target = { lo = 0.2, hi = 0.8, step = 0.05 }
upper_trigger = { lo = 1.8, hi = 3.0, step = 0.05 }
"#;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg_path = dir.path().join("config.toml");
        std::fs::write(&cfg_path, config).map_err(|e| e.to_string())?;
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");

        for out in [&out1, &out2] {
            let code = bandopt::cli::run([
                std::ffi::OsString::from("bandopt"),
                "pipeline".into(),
                "--config".into(),
                cfg_path.as_os_str().to_owned(),
                "--out".into(),
                out.as_os_str().to_owned(),
            ]);
            ensure!(code == 0, "pipeline exited with code {code}");
        }

        for name in ["solve.json", "sim.jsonl", "verify.json", "curves.csv", "search.csv"] {
            let a = std::fs::read(out1.join(name)).map_err(|e| format!("{name}: {e}"))?;
            let b = std::fs::read(out2.join(name)).map_err(|e| format!("{name}: {e}"))?;
            ensure!(!a.is_empty(), "{name} is empty");
            ensure!(a == b, "{name} differs between identical pipeline runs");
        }
        Ok("two pipeline runs wrote byte-identical solve.json, sim.jsonl, verify.json, \
            curves.csv, and search.csv"
            .into())
    });
}
