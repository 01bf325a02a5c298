//! Config-driven batch front end.
//!
//! Usage: `bandopt <command> --config <path> [--out <dir>] [--override-validation]`
//!
//! Commands and the files they write into the output directory:
//!
//! | command    | outputs                                             |
//! |------------|------------------------------------------------------|
//! | `solve`    | `solve.json`, `curves.csv`                           |
//! | `verify`   | `verify.json` (solves first, then checks the band)   |
//! | `simulate` | `sim.jsonl`                                          |
//! | `search`   | `search.csv`                                         |
//! | `pipeline` | all five, plus cross-checks between the stages       |
//!
//! The problem description is a TOML file with sections `[model]`, `[cost]`,
//! and optionally `[solve]`, `[run]`, `[verify]`, `[sim]`, `[search]`;
//! unknown keys are rejected so typos surface as errors instead of silently
//! falling back to defaults.
//!
//! Exit codes: 0 success; 1 a requested check ran and failed its tolerance;
//! 2 configuration or usage error; 3 the holding cost failed validation;
//! 4 numerical failure; 5 I/O failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::free_boundary::{
    solve_optimal_unvalidated, ControlBand, SolveReport, ToleranceSet,
};
use crate::holding_cost::{
    default_probe_grid, make_linear, make_piecewise_poly, make_quadratic, validate, HoldingCost,
    ModelParams,
};
use crate::policy_sim::{
    grid_search_band, simulate_policy, AxisSpec, BandGridSpec, SimConfig, SimEstimate,
};
use crate::value_function::{GridSpec, ValueContext, VerificationReport};
use crate::{Error, Result};

/// Parses arguments, runs the requested command, and returns the process
/// exit code. The binary is a thin wrapper around this.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            exit_code(&e)
        }
    }
}

fn report_error(e: &Error) {
    eprintln!("error: {e}");
    if let Error::Validation(rep) = e {
        for v in &rep.violations {
            eprintln!("  validation violation [{}]: {}", v.check, v.detail);
        }
        eprintln!("  (rerun with --override-validation to proceed anyway)");
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::CheckFailed(_) => 1,
        Error::Config(_) | Error::InvalidParams(_) | Error::InvalidCost(_) => 2,
        Error::Validation(_) => 3,
        Error::Infeasible { .. }
        | Error::Numerics { .. }
        | Error::DegenerateBand(_)
        | Error::NonFinite(_) => 4,
        Error::Io(_) => 5,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "bandopt",
    version,
    about = "Optimal control band policies for a Brownian inventory model"
)]
struct Cli {
    #[command(subcommand)]
    command: CommandKind,
}

#[derive(Debug, Subcommand)]
enum CommandKind {
    /// Solve for the optimal band; writes solve.json and curves.csv.
    Solve(CommonArgs),
    /// Solve, then check the optimality inequalities; writes verify.json.
    Verify(CommonArgs),
    /// Estimate a band's cost by simulation; writes sim.jsonl.
    Simulate(CommonArgs),
    /// Price every band on a lattice; writes search.csv.
    Search(CommonArgs),
    /// Run solve, verify, simulate, and search, then cross-check them.
    Pipeline(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Path to the TOML problem description.
    #[arg(long)]
    config: PathBuf,
    /// Directory for report files (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Proceed even when the holding cost fails validation.
    #[arg(long)]
    override_validation: bool,
}

fn execute(cli: &Cli) -> Result<()> {
    let (args, stage) = match &cli.command {
        CommandKind::Solve(a) => (a, Stage::Solve),
        CommandKind::Verify(a) => (a, Stage::Verify),
        CommandKind::Simulate(a) => (a, Stage::Simulate),
        CommandKind::Search(a) => (a, Stage::Search),
        CommandKind::Pipeline(a) => (a, Stage::Pipeline),
    };
    let session = Session::new(args)?;
    match stage {
        Stage::Solve => {
            session.solve_outputs()?;
        }
        Stage::Verify => {
            let report = session.solve()?;
            let ver = session.verify_outputs(&report)?;
            if !ver.pass {
                return Err(Error::CheckFailed(format!(
                    "optimality check failed at tol {}: min generator residual {}, \
                     jump violations {} / {}, pasting residuals {:?}",
                    ver.tol,
                    ver.min_qvi_residual,
                    ver.max_k_violation,
                    ver.max_l_violation,
                    ver.pasting_residuals
                )));
            }
        }
        Stage::Simulate => {
            let band = session.sim_band(None)?;
            session.sim_outputs(band)?;
        }
        Stage::Search => {
            session.search_outputs()?;
        }
        Stage::Pipeline => pipeline(&session)?,
    }
    Ok(())
}

enum Stage {
    Solve,
    Verify,
    Simulate,
    Search,
    Pipeline,
}

fn pipeline(s: &Session) -> Result<()> {
    let report = s.solve_outputs()?;
    let ver = s.verify_outputs(&report)?;
    let sim_band = s.sim_band(Some(&report))?;
    let est = s.sim_outputs(sim_band)?;
    let (_, best_value) = s.search_outputs()?;

    let ctx = ValueContext::new(&s.m, &s.h);
    let solver_pv = ctx.policy_value(report.band)?;
    let solver_value = ctx.value_bar(&solver_pv, s.cfg.run.x0)?;
    let sim_pv = ctx.policy_value(sim_band)?;
    let sim_target = ctx.value_bar(&sim_pv, s.cfg.run.x0)?;

    let mut failures = Vec::new();
    if !ver.pass {
        failures.push(format!(
            "optimality check failed: min generator residual {}, jump violations {} / {}, \
             pasting residuals {:?}",
            ver.min_qvi_residual, ver.max_k_violation, ver.max_l_violation, ver.pasting_residuals
        ));
    }
    let sim_margin = (3.0 * est.std_error).max(0.02 * sim_target.abs());
    if (est.mean - sim_target).abs() > sim_margin {
        failures.push(format!(
            "simulation mean {} disagrees with closed-form cost {} beyond margin {}",
            est.mean, sim_target, sim_margin
        ));
    }
    let dominance_tol = s.cfg.search.as_ref().map_or(0.01, |sec| sec.dominance_tol);
    if best_value < solver_value - dominance_tol {
        failures.push(format!(
            "lattice search found cost {best_value}, undercutting the solver's {solver_value} \
             by more than {dominance_tol}"
        ));
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failures.join("; ")))
    }
}

struct Session {
    cfg: RunConfig,
    m: ModelParams,
    h: HoldingCost,
    tol: ToleranceSet,
    out: PathBuf,
}

impl Session {
    fn new(args: &CommonArgs) -> Result<Self> {
        let text = fs::read_to_string(&args.config)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
        let cfg = load_config(&text)?;
        let m = cfg.model.build()?;
        let h = cfg.cost.build()?;
        let tol = cfg.solve.to_tolerances();
        if !args.override_validation {
            let rep = validate(&h, &m, &default_probe_grid(&h, &m))?;
            if !rep.is_ok() {
                return Err(Error::Validation(rep));
            }
        }
        fs::create_dir_all(&args.out)?;
        Ok(Session { cfg, m, h, tol, out: args.out.clone() })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    fn solve(&self) -> Result<SolveReport> {
        // Validation already ran (or was overridden) in Session::new.
        solve_optimal_unvalidated(&self.m, &self.h, &self.tol)
    }

    fn solve_outputs(&self) -> Result<SolveReport> {
        let report = self.solve()?;
        self.write("solve.json", &to_json(&report)?)?;
        self.write("curves.csv", &self.curves_csv(&report)?)?;
        Ok(report)
    }

    /// Sampled (x, g(x), V_bar(x)) rows across the band and two diffusion
    /// length scales on each side, band thresholds included.
    fn curves_csv(&self, report: &SolveReport) -> Result<String> {
        let ctx = ValueContext::new(&self.m, &self.h);
        let pv = ctx.policy_value(report.band)?;
        let [d, _, _, u] = report.band.points();
        let s = (self.m.sigma2.sqrt() / self.m.beta.sqrt()).max(1.0);
        let lo = d - 2.0 * s;
        let hi = u + 2.0 * s;
        let n = self.cfg.run.curve_points.max(2);
        let mut xs: Vec<f64> =
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
        for t in report.band.points() {
            if t > lo && t < hi {
                xs.push(t);
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        let mut out = String::from("x,g,V_bar\n");
        for &x in &xs {
            let g = ctx.gbar(&pv, x)?;
            let v = ctx.value_bar(&pv, x)?;
            writeln!(out, "{x},{g},{v}").expect("writing to String cannot fail");
        }
        Ok(out)
    }

    fn verify_outputs(&self, report: &SolveReport) -> Result<VerificationReport> {
        let ctx = ValueContext::new(&self.m, &self.h);
        let pv = ctx.policy_value(report.band)?;
        let base = GridSpec::default_for(&report.band, &self.m);
        let grid = GridSpec {
            lo: self.cfg.verify.grid_lo.unwrap_or(base.lo),
            hi: self.cfg.verify.grid_hi.unwrap_or(base.hi),
            points: self.cfg.verify.grid_points,
        };
        let ver = ctx.verify_qvi(&pv, &grid, self.cfg.verify.tol)?;
        self.write("verify.json", &to_json(&ver)?)?;
        Ok(ver)
    }

    /// The band to simulate: the `[sim] band` override when present, else
    /// the solver's band (reusing `solved` when the caller already has it).
    fn sim_band(&self, solved: Option<&SolveReport>) -> Result<ControlBand> {
        let sim = self.sim_section()?;
        match sim.band {
            Some([d, big_d, big_u, u]) => ControlBand::new(d, big_d, big_u, u),
            None => match solved {
                Some(r) => Ok(r.band),
                None => Ok(self.solve()?.band),
            },
        }
    }

    fn sim_section(&self) -> Result<&SimSection> {
        self.cfg
            .sim
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [sim] section".into()))
    }

    fn sim_outputs(&self, band: ControlBand) -> Result<SimEstimate> {
        let sim = self.sim_section()?;
        let cfg = SimConfig {
            dt: sim.dt,
            horizon: sim.horizon.unwrap_or(18.0 / self.m.beta),
            paths: sim.paths,
            seed: sim.seed,
            antithetic: sim.antithetic,
        };
        let est = simulate_policy(&band, &self.m, &self.h, self.cfg.run.x0, &cfg)?;
        let record = SimRecord {
            band: band.points(),
            x0: self.cfg.run.x0,
            dt: cfg.dt,
            horizon: cfg.horizon,
            seed: cfg.seed,
            antithetic: cfg.antithetic,
            estimate: &est,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::numerics("serialize_report", e.to_string()))?;
        self.write("sim.jsonl", &(line + "\n"))?;
        Ok(est)
    }

    fn search_outputs(&self) -> Result<(ControlBand, f64)> {
        let sec = self
            .cfg
            .search
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [search] section".into()))?;
        let grid = sec.to_grid()?;
        let (best, best_value, table) =
            grid_search_band(&self.m, &self.h, self.cfg.run.x0, &grid)?;
        let mut csv = String::from("d,D,U,u,value\n");
        for row in &table {
            let [d, big_d, big_u, u] = row.band.points();
            writeln!(csv, "{d},{big_d},{big_u},{u},{}", row.value)
                .expect("writing to String cannot fail");
        }
        self.write("search.csv", &csv)?;
        Ok((best, best_value))
    }
}

/// One JSON-lines record: the simulated band, the run settings, and the
/// estimate fields flattened alongside them.
#[derive(Serialize)]
struct SimRecord<'a> {
    band: [f64; 4],
    x0: f64,
    dt: f64,
    horizon: f64,
    seed: u64,
    antithetic: bool,
    #[serde(flatten)]
    estimate: &'a SimEstimate,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::numerics("serialize_report", e.to_string()))
}

fn load_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelSection,
    cost: CostSection,
    #[serde(default)]
    solve: SolveSection,
    #[serde(default)]
    run: RunSection,
    #[serde(default)]
    verify: VerifySection,
    #[serde(default)]
    sim: Option<SimSection>,
    #[serde(default)]
    search: Option<SearchSection>,
}

/// Mirrors [`ModelParams`]; kept separate so TOML input always passes
/// through the constructor's parameter checks.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    mu: f64,
    sigma2: f64,
    beta: f64,
    fixed_cost_up: f64,
    var_cost_up: f64,
    fixed_cost_down: f64,
    var_cost_down: f64,
}

impl ModelSection {
    fn build(&self) -> Result<ModelParams> {
        ModelParams::new(
            self.mu,
            self.sigma2,
            self.beta,
            self.fixed_cost_up,
            self.var_cost_up,
            self.fixed_cost_down,
            self.var_cost_down,
        )
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CostSection {
    /// h(x) = up * x for x >= 0, down * |x| for x < 0.
    Linear { up: f64, down: f64 },
    /// h(x) = up1 * x + up2 * x^2 for x >= 0, down1 * |x| + down2 * x^2 below.
    Quadratic { up1: f64, up2: f64, down1: f64, down2: f64 },
    /// Piecewise polynomial: `segments[i]` holds the coefficients (constant
    /// first) on the interval between `knots[i]` and `knots[i+1]`, with the
    /// outer segments extending to the infinities.
    Piecewise { knots: Vec<f64>, segments: Vec<Vec<f64>> },
}

impl CostSection {
    fn build(&self) -> Result<HoldingCost> {
        match self {
            CostSection::Linear { up, down } => make_linear(*up, *down),
            CostSection::Quadratic { up1, up2, down1, down2 } => {
                make_quadratic(*up1, *up2, *down1, *down2)
            }
            CostSection::Piecewise { knots, segments } => make_piecewise_poly(knots, segments),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveSection {
    quad_reltol: Option<f64>,
    x_root_tol: Option<f64>,
    band_ftol: Option<f64>,
    coeff_xtol: Option<f64>,
    outer_xtol: Option<f64>,
    outer_ftol: Option<f64>,
    report_tol: Option<f64>,
    endpoint_margin: Option<f64>,
}

impl SolveSection {
    fn to_tolerances(&self) -> ToleranceSet {
        let mut t = ToleranceSet::default();
        if let Some(v) = self.quad_reltol {
            t.quad_reltol = v;
        }
        if let Some(v) = self.x_root_tol {
            t.x_root_tol = v;
        }
        if let Some(v) = self.band_ftol {
            t.band_ftol = v;
        }
        if let Some(v) = self.coeff_xtol {
            t.coeff_xtol = v;
        }
        if let Some(v) = self.outer_xtol {
            t.outer_xtol = v;
        }
        if let Some(v) = self.outer_ftol {
            t.outer_ftol = v;
        }
        if let Some(v) = self.report_tol {
            t.report_tol = v;
        }
        if let Some(v) = self.endpoint_margin {
            t.endpoint_margin = v;
        }
        t
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunSection {
    /// Starting inventory level for simulation, search, and reported values.
    x0: f64,
    /// Number of uniformly spaced rows in curves.csv.
    curve_points: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { x0: 0.0, curve_points: 401 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct VerifySection {
    tol: f64,
    grid_points: usize,
    grid_lo: Option<f64>,
    grid_hi: Option<f64>,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { tol: 1e-6, grid_points: 4001, grid_lo: None, grid_hi: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    dt: f64,
    paths: usize,
    seed: u64,
    /// Defaults to 18 / beta, making the truncated tail about 1.5e-8.
    horizon: Option<f64>,
    #[serde(default)]
    antithetic: bool,
    /// Simulate this band `[d, D, U, u]` instead of the solver's.
    band: Option<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchSection {
    mode: SearchMode,
    /// Pipeline check: the lattice may undercut the solver by at most this
    /// much (lattice resolution slack).
    #[serde(default = "default_dominance_tol")]
    dominance_tol: f64,
    lower_trigger: Option<AxisSpec>,
    lower_target: Option<AxisSpec>,
    upper_target: AxisSpec,
    upper_trigger: AxisSpec,
}

fn default_dominance_tol() -> f64 {
    0.01
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SearchMode {
    Full,
    Symmetric,
}

impl SearchSection {
    fn to_grid(&self) -> Result<BandGridSpec> {
        match self.mode {
            SearchMode::Symmetric => {
                if self.lower_trigger.is_some() || self.lower_target.is_some() {
                    return Err(Error::Config(
                        "symmetric search derives the lower axes by mirroring; remove \
                         lower_trigger/lower_target"
                            .into(),
                    ));
                }
                Ok(BandGridSpec::Symmetric {
                    upper_target: self.upper_target,
                    upper_trigger: self.upper_trigger,
                })
            }
            SearchMode::Full => {
                let lower_trigger = self.lower_trigger.ok_or_else(|| {
                    Error::Config("full search needs a lower_trigger axis".into())
                })?;
                let lower_target = self.lower_target.ok_or_else(|| {
                    Error::Config("full search needs a lower_target axis".into())
                })?;
                Ok(BandGridSpec::Full {
                    lower_trigger,
                    lower_target,
                    upper_target: self.upper_target,
                    upper_trigger: self.upper_trigger,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
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
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = load_config(BASE).unwrap();
        let m = cfg.model.build().unwrap();
        assert_eq!(m.beta, 1.0);
        cfg.cost.build().unwrap();
        assert_eq!(cfg.run.x0, 0.0);
        assert_eq!(cfg.run.curve_points, 401);
        assert_eq!(cfg.verify.grid_points, 4001);
        assert!(cfg.sim.is_none() && cfg.search.is_none());
        let t = cfg.solve.to_tolerances();
        assert_eq!(t.report_tol, ToleranceSet::default().report_tol);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{BASE}\n[run]\nx_start = 1.0\n");
        let err = load_config(&bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("x_start"), "{err}");
    }

    #[test]
    fn cost_kinds_build() {
        let linear = r#"
            kind = "linear"
            up = 1.0
            down = 2.0
        "#;
        let cost: CostSection = toml::from_str(linear).unwrap();
        let h = cost.build().unwrap();
        assert_eq!(h.eval(-2.0), 4.0);

        let piecewise = r#"
            kind = "piecewise"
            knots = [0.0]
            segments = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]
        "#;
        let cost: CostSection = toml::from_str(piecewise).unwrap();
        let h = cost.build().unwrap();
        assert_eq!(h.eval(3.0), 9.0);
    }

    #[test]
    fn solve_overrides_apply() {
        let text = format!("{BASE}\n[solve]\nreport_tol = 1e-5\n");
        let cfg = load_config(&text).unwrap();
        let t = cfg.solve.to_tolerances();
        assert_eq!(t.report_tol, 1e-5);
        assert_eq!(t.quad_reltol, ToleranceSet::default().quad_reltol);
    }

    #[test]
    fn symmetric_search_rejects_lower_axes() {
        let text = format!(
            "{BASE}\n[search]\nmode = \"symmetric\"\n\
             lower_trigger = {{ lo = -2.0, hi = -1.0, step = 0.5 }}\n\
             upper_target = {{ lo = 0.1, hi = 1.0, step = 0.1 }}\n\
             upper_trigger = {{ lo = 1.5, hi = 3.0, step = 0.1 }}\n"
        );
        let cfg = load_config(&text).unwrap();
        assert!(matches!(cfg.search.unwrap().to_grid(), Err(Error::Config(_))));
    }

    #[test]
    fn full_search_requires_lower_axes() {
        let text = format!(
            "{BASE}\n[search]\nmode = \"full\"\n\
             upper_target = {{ lo = 0.1, hi = 1.0, step = 0.1 }}\n\
             upper_trigger = {{ lo = 1.5, hi = 3.0, step = 0.1 }}\n"
        );
        let cfg = load_config(&text).unwrap();
        assert!(matches!(cfg.search.unwrap().to_grid(), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_partition_the_error_families() {
        assert_eq!(exit_code(&Error::CheckFailed("x".into())), 1);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::InvalidParams("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Validation(crate::holding_cost::ValidationReport::default())),
            3
        );
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::numerics("s", "d")), 4);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::new(std::io::ErrorKind::Other, "x"))),
            5
        );
    }

    #[test]
    fn usage_errors_exit_with_code_two() {
        assert_eq!(run(["bandopt", "frobnicate"]), 2);
        assert_eq!(run(["bandopt", "solve"]), 2); // missing --config
    }
}
