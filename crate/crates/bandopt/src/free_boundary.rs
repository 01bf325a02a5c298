//! Free-boundary solver for the optimal control band.
//!
//! The optimal policy is a band {d, D, U, u}: below d jump up to D, above u
//! jump down to U. Optimality pins the band and the derivative-family
//! coefficients (A, B) through six conditions on g = V':
//!
//!   g(d) = g(D) = -k,    g(U) = g(u) = l          (smooth pasting)
//!   integral over [d, D] of [g + k] dx = -K        (lower area)
//!   integral over [U, u] of [g - l] dx =  L        (upper area)
//!
//! Since g is decreasing-increasing-decreasing with interior critical points
//! x1 < kink < x2, a coefficient pair in the feasible region G (where the dip
//! at x1 goes below -k and the hump at x2 above l) yields all four pasting
//! roots by bisection. The two area conditions then select (A, B) through a
//! nested scan:
//!
//!   1. Corner coefficients: A_bar (above which the hump never turns over)
//!      and B_low (below which the dip never turns over).
//!   2. Boundary curves of G: underline_A(B) where the hump peak exactly
//!      touches l, and overline_B(A) where the dip exactly touches -k, and
//!      their intersection (A_int, B_int), the corner of G.
//!   3. The point (A_bar_1, B_bar_1) on the overline_B curve where the upper
//!      area equals L.
//!   4. For each B, the unique A_star(B) >= A_bar_1 matching the upper area;
//!      the outer scan moves B until the lower area matches -K.
//!
//! Every root is found by bisection on brackets with proven sign changes;
//! monotonicity of each map in its argument makes each root unique. Open
//! interval endpoints (corners where the maps degenerate or blow up) are
//! approached to within a relative margin but never evaluated.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::Serialize;

use crate::characteristic::characteristic_roots;
use crate::gfunction::{CriticalPoints, GCoefficients, GEvaluator};
use crate::holding_cost::{default_probe_grid, validate, HoldingCost, ModelParams};
use crate::numerics::{bisect, integrate};
use crate::{Error, Result};

/// Maximum geometric marching steps when repairing a bracket endpoint.
const MAX_MARCH: u32 = 60;

/// A four-threshold control band d < D < U < u.
///
/// The controlled process is kept inside [d, u]: on reaching the lower
/// trigger d it is pushed up to the lower target D, on reaching the upper
/// trigger u it is pushed down to the upper target U.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlBand {
    /// d: jump up when the level falls to this trigger.
    #[serde(rename = "d")]
    pub lower_trigger: f64,
    /// D: the level restored after an upward jump.
    #[serde(rename = "D")]
    pub lower_target: f64,
    /// U: the level restored after a downward jump.
    #[serde(rename = "U")]
    pub upper_target: f64,
    /// u: jump down when the level rises to this trigger.
    #[serde(rename = "u")]
    pub upper_trigger: f64,
}

impl ControlBand {
    /// Builds a band, rejecting non-finite or unordered thresholds.
    pub fn new(
        lower_trigger: f64,
        lower_target: f64,
        upper_target: f64,
        upper_trigger: f64,
    ) -> Result<Self> {
        let b = ControlBand { lower_trigger, lower_target, upper_target, upper_trigger };
        let pts = [lower_trigger, lower_target, upper_target, upper_trigger];
        if pts.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBand(format!("non-finite threshold in {pts:?}")));
        }
        if !(lower_trigger < lower_target && lower_target < upper_target && upper_target < upper_trigger)
        {
            return Err(Error::DegenerateBand(format!(
                "thresholds must satisfy d < D < U < u, got {pts:?}"
            )));
        }
        Ok(b)
    }

    /// Thresholds in increasing order [d, D, U, u].
    pub fn points(&self) -> [f64; 4] {
        [self.lower_trigger, self.lower_target, self.upper_target, self.upper_trigger]
    }

    /// True when x lies strictly between the triggers.
    pub fn contains(&self, x: f64) -> bool {
        self.lower_trigger < x && x < self.upper_trigger
    }
}

/// Tolerances for the nested solver, from innermost to outermost.
///
/// The cascade must stay ordered: quadrature and x-roots tighter than the
/// coefficient bisections, which are tighter than the outer band scan, which
/// is tighter than the final report gate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ToleranceSet {
    /// Relative tolerance for all quadrature.
    pub quad_reltol: f64,
    /// Absolute bracket width for roots in x (critical points, band roots).
    pub x_root_tol: f64,
    /// Residual target for g-level roots and the inner area bisections.
    pub band_ftol: f64,
    /// Bracket width (relative to scale) for bisections in the A coefficient.
    pub coeff_xtol: f64,
    /// Bracket width for the outer bisection in B.
    pub outer_xtol: f64,
    /// Residual target for the outer area condition.
    pub outer_ftol: f64,
    /// Maximum final residual accepted in the solve report.
    pub report_tol: f64,
    /// Relative margin for approaching open interval endpoints.
    pub endpoint_margin: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        ToleranceSet {
            quad_reltol: 1e-10,
            x_root_tol: 1e-11,
            band_ftol: 1e-10,
            coeff_xtol: 1e-10,
            outer_xtol: 1e-9,
            outer_ftol: 1e-9,
            report_tol: 1e-7,
            endpoint_margin: 1e-6,
        }
    }
}

/// Landmarks of the feasible coefficient region G.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FeasibleCorners {
    /// A_bar: supremum of A for which the hump of g turns over.
    #[serde(rename = "A_bar")]
    pub a_bar: f64,
    /// B_low: infimum of B for which the dip of g turns over.
    #[serde(rename = "B_low")]
    pub b_low: f64,
    /// A coordinate of the corner of G, where its two boundary curves meet.
    #[serde(rename = "A_int")]
    pub a_int: f64,
    /// B coordinate of the corner of G.
    #[serde(rename = "B_int")]
    pub b_int: f64,
    /// A_bar_1: A on the lower boundary curve where the upper area equals L.
    #[serde(rename = "A_bar_1")]
    pub a_bar_1: f64,
    /// B_bar_1 = overline_B(A_bar_1), the upper limit of the outer B scan.
    #[serde(rename = "B_bar_1")]
    pub b_bar_1: f64,
}

/// Everything the solver establishes about one instance.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    /// The optimal coefficients (A*, B*).
    pub coeffs: GCoefficients,
    /// The optimal band {d*, D*, U*, u*}.
    pub band: ControlBand,
    /// Critical points of g at the optimum, d* < x1 < D* < U* < x2 < u*.
    pub critical: CriticalPoints,
    /// Landmarks of the feasible region traversed on the way.
    pub corners: FeasibleCorners,
    /// Final residuals, recomputed independently of the solve path.
    pub residuals: BTreeMap<String, f64>,
    /// The tolerances the solve ran with.
    pub tolerances: ToleranceSet,
}

/// Interior extrema of g for one coefficient pair, with the g values there.
#[derive(Debug, Clone, Copy)]
struct Hump {
    x1: f64,
    g1: f64,
    x2: f64,
    g2: f64,
}

/// Reusable solver state for one (model, holding cost) instance.
///
/// Construction computes the corner coefficients; the curve and area methods
/// can then be called in any order. All evaluations share one g evaluator,
/// so the quadrature prefix caches warm up across the whole nested scan.
pub struct BandSolver {
    ev: GEvaluator,
    tol: ToleranceSet,
    a_bar: f64,
    b_low: f64,
}

impl BandSolver {
    /// Prepares a solver and computes the corner coefficients A_bar, B_low.
    pub fn new(m: &ModelParams, h: &HoldingCost, tol: &ToleranceSet) -> Result<Self> {
        m.check()?;
        let roots = characteristic_roots(m);
        let ev = GEvaluator::with_reltol(m, h, &roots, tol.quad_reltol);
        let (a_bar, b_low) = corner_coefficients(&ev)?;
        Ok(BandSolver { ev, tol: *tol, a_bar, b_low })
    }

    /// The corner coefficients (A_bar, B_low).
    pub fn corners(&self) -> (f64, f64) {
        (self.a_bar, self.b_low)
    }

    /// The shared g evaluator.
    pub fn evaluator(&self) -> &GEvaluator {
        &self.ev
    }

    fn lambda1(&self) -> f64 {
        self.ev.roots().lambda1
    }

    fn lambda2(&self) -> f64 {
        self.ev.roots().lambda2
    }

    /// Margin for approaching the open endpoint at `x`.
    fn margin(&self, x: f64) -> f64 {
        self.tol.endpoint_margin * x.abs().max(1.0)
    }

    fn hump(&self, c: GCoefficients) -> Result<Hump> {
        let cp = self.ev.critical_points(c, self.tol.x_root_tol)?;
        Ok(Hump {
            x1: cp.x1,
            g1: self.ev.g(c, cp.x1)?,
            x2: cp.x2,
            g2: self.ev.g(c, cp.x2)?,
        })
    }

    /// underline_A(B): the A at which the hump peak of g exactly touches l.
    ///
    /// Defined for B < min(A_bar, l*beta); strictly decreasing in B. Pairs
    /// (A, B) with A above this curve have g exceeding l somewhere.
    pub fn underline_a(&self, b: f64) -> Result<f64> {
        let l = self.ev.model().var_cost_down;
        let beta = self.ev.model().beta;
        let cap = self.a_bar.min(l * beta);
        if !(b < cap) {
            return Err(Error::infeasible(
                "underline_A",
                format!("needs B < min(A_bar, l*beta) = {cap}, got B = {b}"),
            ));
        }
        let lo0 = b.max(self.ev.holding_cost().deriv_minus());
        let hi0 = self.a_bar;
        let rho = |a: f64| -> Result<f64> {
            let c = GCoefficients { a, b };
            let x2 = self.ev.find_x2(c, self.tol.x_root_tol)?;
            Ok(self.ev.g(c, x2)? - l)
        };
        let (lo, flo) = march_from(&rho, lo0, lo0 + self.margin(lo0), false, "underline_A")?;
        let (hi, fhi) = march_from(&rho, hi0, hi0 - self.margin(hi0), true, "underline_A")?;
        let r = bisect(
            rho,
            lo,
            hi,
            flo,
            fhi,
            self.tol.coeff_xtol * hi0.abs().max(1.0),
            self.tol.band_ftol,
            "underline_A",
        )?;
        Ok(r.root)
    }

    /// overline_B(A): the B at which the dip of g exactly touches -k.
    ///
    /// Defined for A > max(B_low, -k*beta); strictly decreasing in A. Pairs
    /// (A, B) with B below this curve have g dipping under -k somewhere.
    pub fn overline_b(&self, a: f64) -> Result<f64> {
        let k = self.ev.model().var_cost_up;
        let beta = self.ev.model().beta;
        let floor = self.b_low.max(-k * beta);
        if !(a > floor) {
            return Err(Error::infeasible(
                "overline_B",
                format!("needs A > max(B_low, -k*beta) = {floor}, got A = {a}"),
            ));
        }
        let lo0 = self.b_low;
        let hi0 = a.min(self.ev.holding_cost().deriv_plus());
        let sig = |b: f64| -> Result<f64> {
            let c = GCoefficients { a, b };
            let x1 = self.ev.find_x1(c, self.tol.x_root_tol)?;
            Ok(self.ev.g(c, x1)? + k)
        };
        let (lo, flo) = march_from(&sig, lo0, lo0 + self.margin(lo0), false, "overline_B")?;
        let (hi, fhi) = march_from(&sig, hi0, hi0 - self.margin(hi0), true, "overline_B")?;
        let r = bisect(
            sig,
            lo,
            hi,
            flo,
            fhi,
            self.tol.coeff_xtol * lo0.abs().max(1.0),
            self.tol.band_ftol,
            "overline_B",
        )?;
        Ok(r.root)
    }

    /// The corner (A_int, B_int) where the two boundary curves of G meet.
    ///
    /// Solves the fixed point underline_A(overline_B(A)) = A by bisection on
    /// [underline_A(0), underline_A(B_low+)]; the composite map crosses the
    /// identity exactly once there because both curves are decreasing.
    pub fn intersection(&self) -> Result<(f64, f64)> {
        let lo = self.underline_a(0.0)?;
        let t = |a: f64| -> Result<f64> { Ok(self.underline_a(self.overline_b(a)?)? - a) };
        let flo = t(lo)?;
        if flo <= 0.0 {
            return Err(Error::numerics(
                "intersection",
                format!("composite map not above identity at A = {lo} (T = {flo})"),
            ));
        }
        let mut eps = self.margin(self.b_low);
        let mut hi = self.underline_a(self.b_low + eps)?;
        let mut fhi = t(hi)?;
        let mut tries = 0;
        while fhi >= 0.0 {
            tries += 1;
            if tries > 6 {
                return Err(Error::numerics(
                    "intersection",
                    format!("composite map not below identity near A = {hi} (T = {fhi})"),
                ));
            }
            eps /= 4.0;
            hi = self.underline_a(self.b_low + eps)?;
            fhi = t(hi)?;
        }
        let r = bisect(
            t,
            lo,
            hi,
            flo,
            fhi,
            self.tol.coeff_xtol * hi.abs().max(1.0),
            f64::INFINITY,
            "intersection",
        )?;
        let a_int = r.root;
        let b_int = self.overline_b(a_int)?;
        Ok((a_int, b_int))
    }

    fn lower_roots_from(&self, c: GCoefficients, hump: Hump) -> Result<(f64, f64)> {
        let k = self.ev.model().var_cost_up;
        if !(hump.g1 < -k) {
            return Err(Error::infeasible(
                "band_roots",
                format!("not in region G: min g = {} does not dip below -k = {}", hump.g1, -k),
            ));
        }
        if !(hump.g2 > -k) {
            return Err(Error::infeasible(
                "band_roots",
                format!("not in region G: max g = {} stays below -k = {}", hump.g2, -k),
            ));
        }
        let f = |x: f64| -> Result<f64> { Ok(self.ev.g(c, x)? + k) };
        let r = bisect(
            f,
            hump.x1,
            hump.x2,
            hump.g1 + k,
            hump.g2 + k,
            self.tol.x_root_tol,
            self.tol.band_ftol,
            "band_roots",
        )?;
        let big_d = r.root;
        // d lies left of x1 where g climbs back to -k; expand geometrically.
        let (xl, fl) = self.expand_left(&f, hump.x1, hump.g1 + k)?;
        let r = bisect(
            f,
            xl,
            hump.x1,
            fl,
            hump.g1 + k,
            self.tol.x_root_tol,
            self.tol.band_ftol,
            "band_roots",
        )?;
        Ok((r.root, big_d))
    }

    fn upper_roots_from(&self, c: GCoefficients, hump: Hump) -> Result<(f64, f64)> {
        let l = self.ev.model().var_cost_down;
        if !(hump.g2 > l) {
            return Err(Error::infeasible(
                "band_roots",
                format!("not in region G: max g = {} does not rise above l = {}", hump.g2, l),
            ));
        }
        if !(hump.g1 < l) {
            return Err(Error::infeasible(
                "band_roots",
                format!("not in region G: min g = {} stays above l = {}", hump.g1, l),
            ));
        }
        let f = |x: f64| -> Result<f64> { Ok(self.ev.g(c, x)? - l) };
        let r = bisect(
            f,
            hump.x1,
            hump.x2,
            hump.g1 - l,
            hump.g2 - l,
            self.tol.x_root_tol,
            self.tol.band_ftol,
            "band_roots",
        )?;
        let big_u = r.root;
        // u lies right of x2 where g falls back to l; expand geometrically.
        let (xr, fr) = self.expand_right(&f, hump.x2, hump.g2 - l)?;
        let r = bisect(
            f,
            hump.x2,
            xr,
            hump.g2 - l,
            fr,
            self.tol.x_root_tol,
            self.tol.band_ftol,
            "band_roots",
        )?;
        Ok((big_u, r.root))
    }

    /// Expands left from `start` until `f` changes sign from `fstart`.
    fn expand_left(
        &self,
        f: &dyn Fn(f64) -> Result<f64>,
        start: f64,
        fstart: f64,
    ) -> Result<(f64, f64)> {
        let mut w = 1.0 / self.lambda2();
        for _ in 0..MAX_MARCH {
            let x = start - w;
            let fx = f(x)?;
            if (fx < 0.0) != (fstart < 0.0) || fx == 0.0 {
                return Ok((x, fx));
            }
            w *= 2.0;
        }
        Err(Error::numerics("band_roots", "left band root not bracketed"))
    }

    /// Expands right from `start` until `f` changes sign from `fstart`.
    fn expand_right(
        &self,
        f: &dyn Fn(f64) -> Result<f64>,
        start: f64,
        fstart: f64,
    ) -> Result<(f64, f64)> {
        let mut w = 1.0 / self.lambda1();
        for _ in 0..MAX_MARCH {
            let x = start + w;
            let fx = f(x)?;
            if (fx < 0.0) != (fstart < 0.0) || fx == 0.0 {
                return Ok((x, fx));
            }
            w *= 2.0;
        }
        Err(Error::numerics("band_roots", "right band root not bracketed"))
    }

    /// The lower pasting roots (d, D) with g(d) = g(D) = -k.
    pub fn lower_roots(&self, c: GCoefficients) -> Result<(f64, f64)> {
        let hump = self.hump(c)?;
        self.lower_roots_from(c, hump)
    }

    /// The upper pasting roots (U, u) with g(U) = g(u) = l.
    pub fn upper_roots(&self, c: GCoefficients) -> Result<(f64, f64)> {
        let hump = self.hump(c)?;
        self.upper_roots_from(c, hump)
    }

    /// All four pasting roots for coefficients in region G, with the
    /// critical points interleaved: d < x1 < D < U < x2 < u.
    pub fn band_roots(&self, c: GCoefficients) -> Result<(ControlBand, CriticalPoints)> {
        let hump = self.hump(c)?;
        let (d, big_d) = self.lower_roots_from(c, hump)?;
        let (big_u, u) = self.upper_roots_from(c, hump)?;
        let band = ControlBand::new(d, big_d, big_u, u)?;
        let ordered = d < hump.x1 && hump.x1 < big_d && big_u < hump.x2 && hump.x2 < u;
        if !ordered {
            return Err(Error::numerics(
                "band_roots",
                format!(
                    "critical points not interleaved: d={d}, x1={}, D={big_d}, U={big_u}, x2={}, u={u}",
                    hump.x1, hump.x2
                ),
            ));
        }
        Ok((band, CriticalPoints { x1: hump.x1, x2: hump.x2 }))
    }

    /// Signed area between g and -k over the lower excursion [d, D].
    ///
    /// Negative in region G. Returns 0 when the dip never reaches -k (no
    /// lower excursion at all) and negative infinity when even the hump max
    /// stays below -k, so the scan in B sees a monotone, sign-consistent map.
    pub fn area_lower(&self, c: GCoefficients) -> Result<f64> {
        let k = self.ev.model().var_cost_up;
        let hump = self.hump(c)?;
        if hump.g1 >= -k {
            return Ok(0.0);
        }
        if hump.g2 <= -k {
            return Ok(f64::NEG_INFINITY);
        }
        let (d, big_d) = self.lower_roots_from(c, hump)?;
        self.integrate_g_offset(c, d, big_d, k)
    }

    /// Signed area between g and l over the upper excursion [U, u].
    ///
    /// Positive in region G. Returns 0 when the hump never reaches l and
    /// positive infinity when even the dip stays above l.
    pub fn area_upper(&self, c: GCoefficients) -> Result<f64> {
        let l = self.ev.model().var_cost_down;
        let hump = self.hump(c)?;
        if hump.g2 <= l {
            return Ok(0.0);
        }
        if hump.g1 >= l {
            return Ok(f64::INFINITY);
        }
        let (big_u, u) = self.upper_roots_from(c, hump)?;
        self.integrate_g_offset(c, big_u, u, -l)
    }

    /// integral over [lo, hi] of [g + offset] dx, through the shared caches.
    fn integrate_g_offset(&self, c: GCoefficients, lo: f64, hi: f64, offset: f64) -> Result<f64> {
        integrate_with(&self.ev, c, lo, hi, offset, self.tol.quad_reltol)
    }

    /// A_bar_1: the A on the lower boundary curve of G where the upper area
    /// reaches L, found by bisection on (A_int, A_bar).
    ///
    /// Along B = overline_B(A) the upper area grows monotonically from 0 at
    /// the corner of G and diverges at A_bar, so the root is unique.
    pub fn a_bar_1(&self, a_int: f64) -> Result<f64> {
        let big_l = self.ev.model().fixed_cost_down;
        let phi = |a: f64| -> Result<f64> {
            let b = self.overline_b(a)?;
            Ok(self.area_upper(GCoefficients { a, b })? - big_l)
        };
        let (lo, flo) = march_from(&phi, a_int, a_int + self.margin(a_int), false, "A_bar_1")?;
        let (hi, fhi) = self.march_up_in_a(&phi, lo, "A_bar_1")?;
        let r = bisect(
            phi,
            lo,
            hi,
            flo,
            fhi,
            self.tol.coeff_xtol * self.a_bar.abs().max(1.0),
            self.tol.band_ftol,
            "A_bar_1",
        )?;
        Ok(r.root)
    }

    /// A_star(B): the unique A in [A_bar_1, A_bar) with upper area L at
    /// fixed B. Defined for B in (B_low, B_bar_1]; decreasing in B.
    pub fn a_star(&self, b: f64, a_bar_1: f64) -> Result<f64> {
        let big_l = self.ev.model().fixed_cost_down;
        let phi = |a: f64| -> Result<f64> { Ok(self.area_upper(GCoefficients { a, b })? - big_l) };
        let flo = phi(a_bar_1)?;
        if flo >= 0.0 {
            // At B = B_bar_1 the root sits exactly at the closed endpoint;
            // accept residual-level overshoot, reject anything larger.
            if flo <= 1e-6 * big_l.max(1.0) {
                return Ok(a_bar_1);
            }
            return Err(Error::infeasible(
                "A_star",
                format!("upper area already exceeds L at A_bar_1 for B = {b} (excess {flo})"),
            ));
        }
        let (hi, fhi) = self.march_up_in_a(&phi, a_bar_1, "A_star")?;
        let r = bisect(
            phi,
            a_bar_1,
            hi,
            flo,
            fhi,
            self.tol.coeff_xtol * self.a_bar.abs().max(1.0),
            self.tol.band_ftol,
            "A_star",
        )?;
        Ok(r.root)
    }

    /// Marches A upward from `lo` toward A_bar until `phi` turns positive.
    ///
    /// The upper area diverges as A approaches A_bar, so a sign change always
    /// appears; once the area overshoots its target the bracket is accepted
    /// immediately rather than refined further.
    fn march_up_in_a(
        &self,
        phi: &dyn Fn(f64) -> Result<f64>,
        lo: f64,
        stage: &str,
    ) -> Result<(f64, f64)> {
        let gap0 = self.a_bar - lo;
        if !(gap0 > 0.0) {
            return Err(Error::numerics(stage, "empty bracket for the A scan"));
        }
        let mut gap = gap0 * 0.5;
        for _ in 0..MAX_MARCH {
            let a = self.a_bar - gap;
            if a <= lo {
                break;
            }
            let f = phi(a)?;
            if f > 0.0 {
                return Ok((a, f));
            }
            gap *= 0.5;
        }
        Err(Error::numerics(stage, "upper area never exceeded its target below A_bar"))
    }

    /// Runs the full nested scan and assembles the report.
    pub fn solve(&self) -> Result<SolveReport> {
        let m = *self.ev.model();
        let (a_int, b_int) = self.intersection()?;
        let a_bar_1 = self.a_bar_1(a_int)?;
        let b_bar_1 = self.overline_b(a_bar_1)?;

        // Outer scan: move B until the lower area matches -K.
        let psi = |b: f64| -> Result<f64> {
            let a = self.a_star(b, a_bar_1)?;
            Ok(self.area_lower(GCoefficients { a, b })? + m.fixed_cost_up)
        };
        let hi0 = b_bar_1;
        let (hi, fhi) = march_from(&psi, hi0, hi0 - self.margin(hi0), true, "outer_band")?;
        let (lo, flo) = self.march_down_in_b(&psi, hi)?;
        let outer = bisect(
            psi,
            lo,
            hi,
            flo,
            fhi,
            self.tol.outer_xtol * hi0.abs().max(1.0),
            self.tol.outer_ftol,
            "outer_band",
        )?;
        let b_star = outer.root;
        let a_star = self.a_star(b_star, a_bar_1)?;
        let coeffs = GCoefficients { a: a_star, b: b_star };
        let (band, critical) = self.band_roots(coeffs)?;

        let corners = FeasibleCorners {
            a_bar: self.a_bar,
            b_low: self.b_low,
            a_int,
            b_int,
            a_bar_1,
            b_bar_1,
        };
        let mut residuals = final_residuals(&m, self.ev.holding_cost(), &self.tol, coeffs, band)?;
        residuals.insert("outer_bracket_width".to_string(), outer.width);
        for (name, r) in &residuals {
            if name.ends_with("bracket_width") {
                continue;
            }
            if !(r.abs() <= self.tol.report_tol) {
                return Err(Error::numerics(
                    "solve_optimal",
                    format!("final residual {name} = {r} exceeds report tolerance {}", self.tol.report_tol),
                ));
            }
        }
        Ok(SolveReport { coeffs, band, critical, corners, residuals, tolerances: self.tol })
    }

    /// Marches B downward from `hi` toward B_low until `psi` turns negative.
    fn march_down_in_b(
        &self,
        psi: &dyn Fn(f64) -> Result<f64>,
        hi: f64,
    ) -> Result<(f64, f64)> {
        let gap0 = hi - self.b_low;
        if !(gap0 > 0.0) {
            return Err(Error::numerics("outer_band", "empty bracket for the B scan"));
        }
        let mut gap = gap0 * 0.5;
        for _ in 0..MAX_MARCH {
            let b = self.b_low + gap;
            if b >= hi {
                gap *= 0.5;
                continue;
            }
            let f = psi(b)?;
            if f < 0.0 {
                return Ok((b, f));
            }
            gap *= 0.5;
        }
        Err(Error::numerics("outer_band", "lower area never exceeded its target above B_low"))
    }
}

/// Corner coefficients: A_bar from the right tail of h'', B_low from the
/// left tail, each discounted at the matching exponential rate.
fn corner_coefficients(ev: &GEvaluator) -> Result<(f64, f64)> {
    let h = ev.holding_cost();
    let roots = ev.roots();
    let a = h.kink();
    let hpp = |y: f64| h.second_deriv(y);
    let right = crate::numerics::exp_weighted_shifted(
        &hpp,
        -roots.lambda1,
        a,
        a,
        f64::INFINITY,
        h.breakpoints(),
        1e-12,
    )
    .map_err(|e| {
        Error::infeasible(
            "region_corners",
            format!("right tail of h'' is not integrable against exp(-lambda1 x): {e}"),
        )
    })?;
    let left = crate::numerics::exp_weighted_shifted(
        &hpp,
        roots.lambda2,
        a,
        f64::NEG_INFINITY,
        a,
        h.breakpoints(),
        1e-12,
    )
    .map_err(|e| {
        Error::infeasible(
            "region_corners",
            format!("left tail of h'' is not integrable against exp(lambda2 x): {e}"),
        )
    })?;
    let a_bar = h.deriv_plus() + right;
    let b_low = h.deriv_minus() - left;
    if !(a_bar > h.deriv_minus() && b_low < h.deriv_plus()) {
        return Err(Error::infeasible(
            "region_corners",
            format!("degenerate corners A_bar = {a_bar}, B_low = {b_low}"),
        ));
    }
    Ok((a_bar, b_low))
}

/// integral over [lo, hi] of [g + offset] dx for a fixed coefficient pair,
/// capturing evaluation errors raised inside the quadrature callback.
fn integrate_with(
    ev: &GEvaluator,
    c: GCoefficients,
    lo: f64,
    hi: f64,
    offset: f64,
    reltol: f64,
) -> Result<f64> {
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let f = |x: f64| match ev.g(c, x) {
        Ok(v) => v + offset,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            f64::NAN
        }
    };
    let out = integrate(&f, lo, hi, ev.holding_cost().breakpoints(), reltol);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    out
}

/// Repairs a bracket endpoint: starting from `probe` (already strictly
/// inside the domain, adjacent to the open endpoint `anchor`), halves the
/// gap to `anchor` until `f` has the requested sign.
fn march_from(
    f: &dyn Fn(f64) -> Result<f64>,
    anchor: f64,
    probe: f64,
    want_positive: bool,
    stage: &str,
) -> Result<(f64, f64)> {
    let mut x = probe;
    for _ in 0..MAX_MARCH {
        let fx = f(x)?;
        if (fx > 0.0) == want_positive && fx != 0.0 {
            return Ok((x, fx));
        }
        if fx == 0.0 {
            return Ok((x, fx));
        }
        x = anchor + (x - anchor) * 0.5;
        if x == anchor {
            break;
        }
    }
    Err(Error::numerics(
        stage,
        format!("no sign change approaching the interval endpoint at {anchor}"),
    ))
}

/// Recomputes the six optimality residuals from scratch: a fresh evaluator
/// with empty caches, so reported residuals are independent of the path the
/// solver took to the answer.
fn final_residuals(
    m: &ModelParams,
    h: &HoldingCost,
    tol: &ToleranceSet,
    coeffs: GCoefficients,
    band: ControlBand,
) -> Result<BTreeMap<String, f64>> {
    let roots = characteristic_roots(m);
    let fresh = GEvaluator::with_reltol(m, h, &roots, tol.quad_reltol);
    let k = m.var_cost_up;
    let l = m.var_cost_down;
    let mut out = BTreeMap::new();
    out.insert("g_d_plus_k".to_string(), fresh.g(coeffs, band.lower_trigger)? + k);
    out.insert("g_D_plus_k".to_string(), fresh.g(coeffs, band.lower_target)? + k);
    out.insert("g_U_minus_l".to_string(), fresh.g(coeffs, band.upper_target)? - l);
    out.insert("g_u_minus_l".to_string(), fresh.g(coeffs, band.upper_trigger)? - l);
    let lower = integrate_with(
        &fresh,
        coeffs,
        band.lower_trigger,
        band.lower_target,
        k,
        tol.quad_reltol,
    )?;
    let upper = integrate_with(
        &fresh,
        coeffs,
        band.upper_target,
        band.upper_trigger,
        -l,
        tol.quad_reltol,
    )?;
    out.insert("lower_area_plus_K".to_string(), lower + m.fixed_cost_up);
    out.insert("upper_area_minus_L".to_string(), upper - m.fixed_cost_down);
    Ok(out)
}

/// Corner coefficients (A_bar, B_low) for one instance.
pub fn region_corners(m: &ModelParams, h: &HoldingCost) -> Result<(f64, f64)> {
    Ok(BandSolver::new(m, h, &ToleranceSet::default())?.corners())
}

/// The boundary curve underline_A(B) of the feasible region.
pub fn underline_a(m: &ModelParams, h: &HoldingCost, b: f64) -> Result<f64> {
    BandSolver::new(m, h, &ToleranceSet::default())?.underline_a(b)
}

/// The boundary curve overline_B(A) of the feasible region.
pub fn overline_b(m: &ModelParams, h: &HoldingCost, a: f64) -> Result<f64> {
    BandSolver::new(m, h, &ToleranceSet::default())?.overline_b(a)
}

/// The corner (A_int, B_int) where the two boundary curves meet.
pub fn intersection(m: &ModelParams, h: &HoldingCost) -> Result<(f64, f64)> {
    BandSolver::new(m, h, &ToleranceSet::default())?.intersection()
}

/// All four pasting roots and the critical points for coefficients in G.
pub fn band_roots(
    m: &ModelParams,
    h: &HoldingCost,
    coeffs: GCoefficients,
) -> Result<(ControlBand, CriticalPoints)> {
    BandSolver::new(m, h, &ToleranceSet::default())?.band_roots(coeffs)
}

/// Signed area between g and -k over the lower excursion.
pub fn area_lambda1(m: &ModelParams, h: &HoldingCost, coeffs: GCoefficients) -> Result<f64> {
    BandSolver::new(m, h, &ToleranceSet::default())?.area_lower(coeffs)
}

/// Signed area between g and l over the upper excursion.
pub fn area_lambda2(m: &ModelParams, h: &HoldingCost, coeffs: GCoefficients) -> Result<f64> {
    BandSolver::new(m, h, &ToleranceSet::default())?.area_upper(coeffs)
}

/// Computes the optimal band and coefficients for one instance.
///
/// The holding cost is validated against the model first (minimum at the
/// kink, convexity, tail growth beating the discounted variable costs); a
/// failed validation aborts the solve and carries the full report. Use
/// [`solve_optimal_unvalidated`] to skip the gate deliberately.
pub fn solve_optimal(m: &ModelParams, h: &HoldingCost, tol: &ToleranceSet) -> Result<SolveReport> {
    let grid = default_probe_grid(h, m);
    let report = validate(h, m, &grid)?;
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    solve_optimal_unvalidated(m, h, tol)
}

/// [`solve_optimal`] without the validation gate.
pub fn solve_optimal_unvalidated(
    m: &ModelParams,
    h: &HoldingCost,
    tol: &ToleranceSet,
) -> Result<SolveReport> {
    BandSolver::new(m, h, tol)?.solve()
}
