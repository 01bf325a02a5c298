//! Convex holding-cost functions and the model parameters they are paired
//! with.
//!
//! A holding cost h is a continuous convex function with minimum value 0 at a
//! single kink point; it is twice differentiable away from the kink, and its
//! second derivative may jump at finitely many declared breakpoints. The cost
//! charges h(z) per unit time for carrying inventory level z, so the left
//! branch prices backlog and the right branch prices stock on hand.
//!
//! Built-in families cover the linear, quadratic, and piecewise-polynomial
//! shapes used in practice; [`HoldingCost::from_parts`] accepts arbitrary
//! closures for anything else. [`validate`] checks a cost against a model:
//! shape conditions by sampling, and the tail conditions that make a finite
//! control band exist at all (holding cost must eventually beat the
//! proportional adjustment cost, and the curvature tails must be integrable
//! against the characteristic exponential weights).

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::characteristic::characteristic_roots;
use crate::numerics;
use crate::{Error, Result};

/// Economic and dynamic constants of the inventory model.
///
/// The controlled net inventory follows a Brownian motion with drift `mu` and
/// variance `sigma2`; costs are discounted at rate `beta`. Each upward
/// adjustment of size q costs `fixed_cost_up + var_cost_up * q`, each
/// downward adjustment `fixed_cost_down + var_cost_down * q`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelParams {
    pub mu: f64,
    pub sigma2: f64,
    pub beta: f64,
    /// K: fixed cost per upward adjustment.
    pub fixed_cost_up: f64,
    /// k: variable cost per unit adjusted upward.
    pub var_cost_up: f64,
    /// L: fixed cost per downward adjustment.
    pub fixed_cost_down: f64,
    /// l: variable cost per unit adjusted downward.
    pub var_cost_down: f64,
}

impl ModelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mu: f64,
        sigma2: f64,
        beta: f64,
        fixed_cost_up: f64,
        var_cost_up: f64,
        fixed_cost_down: f64,
        var_cost_down: f64,
    ) -> Result<Self> {
        let m = ModelParams {
            mu,
            sigma2,
            beta,
            fixed_cost_up,
            var_cost_up,
            fixed_cost_down,
            var_cost_down,
        };
        m.check()?;
        Ok(m)
    }

    /// Structural requirements: finite drift, positive variance and discount
    /// rate, strictly positive adjustment costs (both fixed and variable).
    pub fn check(&self) -> Result<()> {
        let fields = [
            ("mu", self.mu),
            ("sigma2", self.sigma2),
            ("beta", self.beta),
            ("fixed_cost_up", self.fixed_cost_up),
            ("var_cost_up", self.var_cost_up),
            ("fixed_cost_down", self.fixed_cost_down),
            ("var_cost_down", self.var_cost_down),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidParams(format!("{name} must be finite, got {v}")));
            }
        }
        for (name, v) in &fields[1..] {
            if *v <= 0.0 {
                return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Closed-form families plus an escape hatch for user-supplied closures.
#[derive(Clone)]
enum CostForm {
    /// up * x for x >= 0, down * (-x) for x < 0.
    Linear { up: f64, down: f64 },
    /// up1 * x + up2 * x^2 on the right, down1 * (-x) + down2 * x^2 on the left.
    Quadratic { up1: f64, up2: f64, down1: f64, down2: f64 },
    /// Polynomial pieces between sorted knots; segs[i] covers
    /// (knots[i-1], knots[i]) with unbounded first and last pieces.
    /// Coefficients are in ascending powers of x.
    PiecewisePoly { knots: Vec<f64>, segs: Vec<Vec<f64>> },
    Custom {
        eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        deriv: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        second: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
}

/// A validated-shape holding cost: convex, zero at its kink, with declared
/// tail slopes and second-derivative breakpoints.
///
/// Values are immutable after construction and safe to share across threads.
/// Derivative queries exactly at the kink return the right-hand limit; the
/// stored one-sided slopes are available via [`HoldingCost::deriv_minus`] and
/// [`HoldingCost::deriv_plus`]. Likewise `second_deriv` at a breakpoint
/// returns the right-hand limit; quadrature avoids the ambiguity entirely by
/// splitting at breakpoints and sampling interior points only.
#[derive(Clone)]
pub struct HoldingCost {
    kink: f64,
    form: CostForm,
    deriv_minus: f64,
    deriv_plus: f64,
    tail_slope_pos: f64,
    tail_slope_neg: f64,
    breakpoints: Vec<f64>,
}

impl fmt::Debug for HoldingCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match &self.form {
            CostForm::Linear { .. } => "linear",
            CostForm::Quadratic { .. } => "quadratic",
            CostForm::PiecewisePoly { .. } => "piecewise_poly",
            CostForm::Custom { .. } => "custom",
        };
        f.debug_struct("HoldingCost")
            .field("family", &family)
            .field("kink", &self.kink)
            .field("deriv_minus", &self.deriv_minus)
            .field("deriv_plus", &self.deriv_plus)
            .field("tail_slope_pos", &self.tail_slope_pos)
            .field("tail_slope_neg", &self.tail_slope_neg)
            .finish()
    }
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

fn poly_deriv(c: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for i in (1..c.len()).rev() {
        acc = acc * x + c[i] * i as f64;
    }
    acc
}

fn poly_second(c: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for i in (2..c.len()).rev() {
        acc = acc * x + c[i] * (i * (i - 1)) as f64;
    }
    acc
}

/// Index of the piece containing x; a point exactly on a knot belongs to the
/// right piece.
fn seg_index(knots: &[f64], x: f64) -> usize {
    knots.partition_point(|&k| k <= x)
}

impl HoldingCost {
    /// Location of the kink (the minimizer, where h = 0).
    pub fn kink(&self) -> f64 {
        self.kink
    }

    /// h(x).
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match &self.form {
            CostForm::Linear { up, down } => {
                if x >= 0.0 {
                    up * x
                } else {
                    -down * x
                }
            }
            CostForm::Quadratic { up1, up2, down1, down2 } => {
                if x >= 0.0 {
                    (up1 + up2 * x) * x
                } else {
                    (-down1 + down2 * x) * x
                }
            }
            CostForm::PiecewisePoly { knots, segs } => poly_eval(&segs[seg_index(knots, x)], x),
            CostForm::Custom { eval, .. } => eval(x),
        }
    }

    /// h'(x); at the kink itself the right-hand limit is returned.
    #[inline]
    pub fn deriv(&self, x: f64) -> f64 {
        match &self.form {
            CostForm::Linear { up, down } => {
                if x >= 0.0 {
                    *up
                } else {
                    -down
                }
            }
            CostForm::Quadratic { up1, up2, down1, down2 } => {
                if x >= 0.0 {
                    up1 + 2.0 * up2 * x
                } else {
                    -down1 + 2.0 * down2 * x
                }
            }
            CostForm::PiecewisePoly { knots, segs } => poly_deriv(&segs[seg_index(knots, x)], x),
            CostForm::Custom { deriv, .. } => deriv(x),
        }
    }

    /// h''(x); at a breakpoint the right-hand limit is returned.
    #[inline]
    pub fn second_deriv(&self, x: f64) -> f64 {
        match &self.form {
            CostForm::Linear { .. } => 0.0,
            CostForm::Quadratic { up2, down2, .. } => {
                if x >= 0.0 {
                    2.0 * up2
                } else {
                    2.0 * down2
                }
            }
            CostForm::PiecewisePoly { knots, segs } => poly_second(&segs[seg_index(knots, x)], x),
            CostForm::Custom { second, .. } => second(x),
        }
    }

    /// h'(kink-), the left slope limit at the kink (nonpositive).
    pub fn deriv_minus(&self) -> f64 {
        self.deriv_minus
    }

    /// h'(kink+), the right slope limit at the kink (nonnegative).
    pub fn deriv_plus(&self) -> f64 {
        self.deriv_plus
    }

    /// Limit of h'(x) as x -> +infinity (may be +infinity).
    pub fn tail_slope_pos(&self) -> f64 {
        self.tail_slope_pos
    }

    /// Limit of h'(x) as x -> -infinity (may be -infinity).
    pub fn tail_slope_neg(&self) -> f64 {
        self.tail_slope_neg
    }

    /// Sorted points where the second derivative may be discontinuous,
    /// including the kink. Quadrature must split at each of these.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Build a cost from explicit closures.
    ///
    /// The shape conditions are the caller's responsibility and are only
    /// checked by [`validate`]; construction verifies just the structural
    /// facts: h(kink) must be exactly zero, the one-sided slopes must
    /// bracket zero, and all declared numbers must be finite (tail slopes
    /// may be infinite).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kink: f64,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        second_deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        deriv_minus: f64,
        deriv_plus: f64,
        tail_slope_pos: f64,
        tail_slope_neg: f64,
        extra_breakpoints: &[f64],
    ) -> Result<HoldingCost> {
        if !kink.is_finite() {
            return Err(Error::InvalidCost("kink must be finite".into()));
        }
        let at_kink = eval(kink);
        if at_kink != 0.0 {
            return Err(Error::InvalidCost(format!(
                "h(kink) must be exactly 0, got {at_kink}"
            )));
        }
        if !(deriv_minus.is_finite() && deriv_plus.is_finite()) {
            return Err(Error::InvalidCost("one-sided slopes must be finite".into()));
        }
        if !(deriv_minus <= 0.0 && 0.0 <= deriv_plus) {
            return Err(Error::InvalidCost(format!(
                "one-sided slopes must satisfy h'(kink-) <= 0 <= h'(kink+), got ({deriv_minus}, {deriv_plus})"
            )));
        }
        if tail_slope_pos.is_nan() || tail_slope_neg.is_nan() {
            return Err(Error::InvalidCost("tail slopes must not be NaN".into()));
        }
        let mut breakpoints = vec![kink];
        breakpoints.extend(extra_breakpoints.iter().copied().filter(|b| b.is_finite()));
        breakpoints.sort_by(|p, q| p.partial_cmp(q).unwrap());
        breakpoints.dedup();
        Ok(HoldingCost {
            kink,
            form: CostForm::Custom {
                eval: Arc::new(eval),
                deriv: Arc::new(deriv),
                second: Arc::new(second_deriv),
            },
            deriv_minus,
            deriv_plus,
            tail_slope_pos,
            tail_slope_neg,
            breakpoints,
        })
    }
}

/// Piecewise-linear cost `up * x` for x >= 0 and `down * |x|` for x < 0.
/// Both slopes must be strictly positive.
pub fn make_linear(up: f64, down: f64) -> Result<HoldingCost> {
    if !(up.is_finite() && down.is_finite() && up > 0.0 && down > 0.0) {
        return Err(Error::InvalidCost(format!(
            "linear slopes must be positive and finite, got ({up}, {down})"
        )));
    }
    Ok(HoldingCost {
        kink: 0.0,
        form: CostForm::Linear { up, down },
        deriv_minus: -down,
        deriv_plus: up,
        tail_slope_pos: up,
        tail_slope_neg: -down,
        breakpoints: vec![0.0],
    })
}

/// Piecewise-quadratic cost `up1 * x + up2 * x^2` for x >= 0 and
/// `down1 * |x| + down2 * x^2` for x < 0. Coefficients must be nonnegative.
pub fn make_quadratic(up1: f64, up2: f64, down1: f64, down2: f64) -> Result<HoldingCost> {
    for (name, v) in [("up1", up1), ("up2", up2), ("down1", down1), ("down2", down2)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidCost(format!(
                "quadratic coefficient {name} must be nonnegative and finite, got {v}"
            )));
        }
    }
    Ok(HoldingCost {
        kink: 0.0,
        form: CostForm::Quadratic { up1, up2, down1, down2 },
        deriv_minus: -down1,
        deriv_plus: up1,
        tail_slope_pos: if up2 > 0.0 { f64::INFINITY } else { up1 },
        tail_slope_neg: if down2 > 0.0 { f64::NEG_INFINITY } else { -down1 },
        breakpoints: vec![0.0],
    })
}

/// Strip trailing zero coefficients (within exact equality).
fn trimmed(c: &[f64]) -> &[f64] {
    let mut n = c.len();
    while n > 0 && c[n - 1] == 0.0 {
        n -= 1;
    }
    &c[..n]
}

/// Slope limit of a polynomial piece toward +/- infinity, given convexity.
fn tail_slope(c: &[f64], toward_pos: f64) -> f64 {
    let c = trimmed(c);
    match c.len() {
        0 | 1 => 0.0,
        2 => c[1],
        // Degree >= 2 and convex on an unbounded piece: |h'| -> infinity.
        _ => {
            if toward_pos > 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Limit sign of the second derivative of a polynomial piece at +/- infinity.
fn second_limit_sign(c: &[f64], toward_pos: bool) -> f64 {
    let c = trimmed(c);
    if c.len() < 3 {
        return 0.0; // h'' identically 0 in the tail
    }
    let deg = c.len() - 1;
    let lead = c[deg] * (deg * (deg - 1)) as f64;
    let parity = if !toward_pos && (deg - 2) % 2 == 1 { -1.0 } else { 1.0 };
    lead * parity
}

/// Piecewise-polynomial cost.
///
/// `knots` are the strictly increasing interior cut points; `segments` has
/// one coefficient list (ascending powers) per piece, so
/// `segments.len() == knots.len() + 1`: the first piece covers everything
/// left of the first knot, the last everything right of the last knot. The
/// kink is fixed at 0, which must satisfy h(0) = 0, and the whole function
/// must be continuous, continuously differentiable away from 0, and convex;
/// violations are rejected here rather than deferred to [`validate`].
pub fn make_piecewise_poly(knots: &[f64], segments: &[Vec<f64>]) -> Result<HoldingCost> {
    if segments.len() != knots.len() + 1 {
        return Err(Error::InvalidCost(format!(
            "need {} segments for {} knots, got {}",
            knots.len() + 1,
            knots.len(),
            segments.len()
        )));
    }
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidCost("empty coefficient list".into()));
    }
    for s in segments {
        for &c in s {
            if !c.is_finite() {
                return Err(Error::InvalidCost(format!("non-finite coefficient {c}")));
            }
        }
    }
    for w in knots.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::InvalidCost("knots must be strictly increasing".into()));
        }
    }
    if knots.iter().any(|k| !k.is_finite()) {
        return Err(Error::InvalidCost("knots must be finite".into()));
    }

    let scale = 1.0
        + segments
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, &c| m.max(c.abs()));
    let tol = 1e-9 * scale;

    // Continuity at every knot; slope jumps are allowed only at 0 (the kink).
    for (i, &kn) in knots.iter().enumerate() {
        let (l, r) = (&segments[i], &segments[i + 1]);
        let jump = poly_eval(r, kn) - poly_eval(l, kn);
        if jump.abs() > tol {
            return Err(Error::InvalidCost(format!(
                "discontinuous at knot {kn}: jump {jump}"
            )));
        }
        if kn != 0.0 {
            let slope_jump = poly_deriv(r, kn) - poly_deriv(l, kn);
            if slope_jump.abs() > tol {
                return Err(Error::InvalidCost(format!(
                    "slope jump {slope_jump} at knot {kn}; slopes may jump only at 0"
                )));
            }
        }
    }

    // The kink: h(0) = 0 exactly, one-sided slopes bracketing zero. With a
    // knot at 0 the sides come from different pieces, otherwise the same one.
    let i0 = seg_index(knots, 0.0);
    let at0 = poly_eval(&segments[i0], 0.0);
    if at0 != 0.0 {
        return Err(Error::InvalidCost(format!("h(0) must be exactly 0, got {at0}")));
    }
    let kink_is_knot = knots.contains(&0.0);
    if kink_is_knot && poly_eval(&segments[i0 - 1], 0.0) != 0.0 {
        return Err(Error::InvalidCost(format!(
            "h(0) must be exactly 0 from the left too, got {}",
            poly_eval(&segments[i0 - 1], 0.0)
        )));
    }
    let d_plus = poly_deriv(&segments[i0], 0.0);
    let d_minus = if kink_is_knot {
        poly_deriv(&segments[i0 - 1], 0.0)
    } else {
        d_plus
    };
    if d_minus > tol || d_plus < -tol {
        return Err(Error::InvalidCost(format!(
            "slopes at 0 must satisfy h'(0-) <= 0 <= h'(0+), got ({d_minus}, {d_plus})"
        )));
    }

    // Convexity: nonnegative curvature inside pieces (sampled, with wide
    // margins on the unbounded pieces, plus the analytic tail sign) and a
    // nonnegative slope jump at the kink.
    for (i, seg) in segments.iter().enumerate() {
        let lo = if i == 0 {
            knots.first().copied().unwrap_or(0.0) - 30.0
        } else {
            knots[i - 1]
        };
        let hi = if i == knots.len() {
            knots.last().copied().unwrap_or(0.0) + 30.0
        } else {
            knots[i]
        };
        for j in 0..=128 {
            let x = lo + (hi - lo) * j as f64 / 128.0;
            if poly_second(seg, x) < -tol {
                return Err(Error::InvalidCost(format!(
                    "negative curvature {} at x = {x}",
                    poly_second(seg, x)
                )));
            }
        }
    }
    if second_limit_sign(&segments[segments.len() - 1], true) < 0.0 {
        return Err(Error::InvalidCost("curvature turns negative toward +infinity".into()));
    }
    if second_limit_sign(&segments[0], false) < 0.0 {
        return Err(Error::InvalidCost("curvature turns negative toward -infinity".into()));
    }

    // Slope signs on each side of the kink (sampled at knots and the edges).
    let mut check_pts: Vec<f64> = knots.to_vec();
    check_pts.push(knots.first().copied().unwrap_or(0.0) - 30.0);
    check_pts.push(knots.last().copied().unwrap_or(0.0) + 30.0);
    check_pts.push(-1e-6);
    check_pts.push(1e-6);
    for &x in &check_pts {
        let d = poly_deriv(&segments[seg_index(knots, x)], x);
        if x < 0.0 && d > tol {
            return Err(Error::InvalidCost(format!("positive slope {d} left of the kink at {x}")));
        }
        if x > 0.0 && d < -tol {
            return Err(Error::InvalidCost(format!("negative slope {d} right of the kink at {x}")));
        }
    }

    let tail_pos = tail_slope(&segments[segments.len() - 1], 1.0);
    let tail_neg = tail_slope(&segments[0], -1.0);
    let mut breakpoints = vec![0.0];
    breakpoints.extend_from_slice(knots);
    breakpoints.sort_by(|p, q| p.partial_cmp(q).unwrap());
    breakpoints.dedup();

    Ok(HoldingCost {
        kink: 0.0,
        form: CostForm::PiecewisePoly {
            knots: knots.to_vec(),
            segs: segments.to_vec(),
        },
        deriv_minus: d_minus.min(0.0),
        deriv_plus: d_plus.max(0.0),
        tail_slope_pos: tail_pos,
        tail_slope_neg: tail_neg,
        breakpoints,
    })
}

/// One named shape-condition failure found by [`validate`].
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    /// Stable identifier of the failed check (e.g. "tail_slope_pos").
    pub check: String,
    /// Human-readable explanation with the offending values.
    pub detail: String,
}

/// Outcome of [`validate`]: the list of violations found (empty = accepted).
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, check: &str, detail: String) {
        self.violations.push(Violation {
            check: check.to_string(),
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{}: {}", v.check, v.detail)?;
        }
        Ok(())
    }
}

/// Check a holding cost against a model by sampling the probe grid.
///
/// Pointwise checks: finiteness, nonnegativity, zero at the kink, slope
/// signs on each side, nonnegative curvature, nondecreasing slope between
/// consecutive probes, and finite-difference consistency of the declared
/// derivative. Model-dependent checks: the declared tail slopes must beat
/// the discounted variable costs (`tail_slope_pos > var_cost_down * beta`
/// and `tail_slope_neg < -var_cost_up * beta`), the weighted curvature
/// `h''(x) e^{-lambda1 (x-kink)}` (and its mirror) must die out past the
/// probe range, and the corresponding tail integrals must converge.
///
/// Returns every violation found; an empty report means accepted. Non-finite
/// h values on the grid are a hard error, not a violation.
pub fn validate(h: &HoldingCost, m: &ModelParams, probe_grid: &[f64]) -> Result<ValidationReport> {
    m.check()?;
    if probe_grid.is_empty() {
        return Err(Error::InvalidParams("probe grid must be nonempty".into()));
    }
    if probe_grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParams("probe grid must be finite".into()));
    }
    let mut grid: Vec<f64> = probe_grid.to_vec();
    grid.sort_by(|p, q| p.partial_cmp(q).unwrap());
    grid.dedup();
    if !(grid[0] < h.kink() && h.kink() < grid[grid.len() - 1]) {
        return Err(Error::InvalidParams(
            "probe grid must span both sides of the kink".into(),
        ));
    }

    let mut report = ValidationReport::default();
    let kink = h.kink();

    // Hard finiteness gate; everything after can assume finite samples.
    for &x in &grid {
        let v = h.eval(x);
        if !v.is_finite() {
            return Err(Error::InvalidCost(format!("h({x}) = {v} is not finite")));
        }
        if x != kink && (!h.deriv(x).is_finite() || !h.second_deriv(x).is_finite()) {
            return Err(Error::InvalidCost(format!("derivatives not finite at {x}")));
        }
    }

    if h.eval(kink) != 0.0 {
        report.push("min_zero", format!("h(kink) = {}, must be exactly 0", h.eval(kink)));
    }
    if !(h.deriv_minus() <= 0.0 && 0.0 <= h.deriv_plus()) {
        report.push(
            "one_sided_slopes",
            format!(
                "need h'(kink-) <= 0 <= h'(kink+), got ({}, {})",
                h.deriv_minus(),
                h.deriv_plus()
            ),
        );
    }

    for &x in &grid {
        if h.eval(x) < 0.0 {
            report.push("nonneg", format!("h({x}) = {} < 0", h.eval(x)));
        }
        if x == kink {
            continue;
        }
        let d = h.deriv(x);
        if x < kink && d > 0.0 {
            report.push("slope_sign", format!("h'({x}) = {d} > 0 left of the kink"));
        }
        if x > kink && d < 0.0 {
            report.push("slope_sign", format!("h'({x}) = {d} < 0 right of the kink"));
        }
        if h.second_deriv(x) < 0.0 {
            report.push(
                "second_deriv_sign",
                format!("h''({x}) = {} < 0", h.second_deriv(x)),
            );
        }
    }

    // Nondecreasing slope between consecutive smooth probes. A refinement of
    // the grid can only split a failing pair into pairs at least one of which
    // still fails, so enlarging the grid never clears this check.
    let smooth: Vec<f64> = grid.iter().copied().filter(|&x| x != kink).collect();
    for w in smooth.windows(2) {
        let (dl, dr) = (h.deriv(w[0]), h.deriv(w[1]));
        if dl > dr {
            report.push(
                "convexity",
                format!("h' decreases from {dl} to {dr} between {} and {}", w[0], w[1]),
            );
        }
    }

    // Declared derivative vs central finite difference, away from breakpoints.
    let delta = 1e-5;
    for &x in &grid {
        if h.breakpoints().iter().any(|&b| (x - b).abs() < 1e-3) {
            continue;
        }
        let fd = (h.eval(x + delta) - h.eval(x - delta)) / (2.0 * delta);
        let d = h.deriv(x);
        if (fd - d).abs() > 1e-6 * (1.0 + d.abs()) {
            report.push(
                "fd_consistency",
                format!("h'({x}) = {d} but finite difference gives {fd}"),
            );
        }
    }

    // Tail slopes against the discounted variable adjustment costs: if the
    // marginal holding cost never exceeds beta * variable cost, it is cheaper
    // to hold forever than to adjust, and no finite band is optimal.
    let need_pos = m.var_cost_down * m.beta;
    if !(h.tail_slope_pos() > need_pos) {
        report.push(
            "tail_slope_pos",
            format!(
                "tail_slope_pos <= var_cost_down * beta ({} <= {need_pos})",
                h.tail_slope_pos()
            ),
        );
    }
    let need_neg = -m.var_cost_up * m.beta;
    if !(h.tail_slope_neg() < need_neg) {
        report.push(
            "tail_slope_neg",
            format!(
                "tail_slope_neg >= -var_cost_up * beta ({} >= {need_neg})",
                h.tail_slope_neg()
            ),
        );
    }

    // Curvature tails: the weighted curvature must die out far beyond the
    // probe range, and the weighted tail integrals must converge. Spacing the
    // far samples by ten decay lengths makes the exponential dominate any
    // polynomially bounded curvature, so valid costs are not misflagged.
    let roots = characteristic_roots(m);
    let far_base = grid[grid.len() - 1]
        .max(kink)
        .max(h.breakpoints().last().copied().unwrap_or(kink));
    let step = 10.0 / roots.lambda1;
    let w_pos: Vec<f64> = (1..=4)
        .map(|j| {
            let x = far_base + step * j as f64;
            h.second_deriv(x) * (-roots.lambda1 * (x - kink)).exp()
        })
        .collect();
    if w_pos.windows(2).any(|w| w[1] > w[0]) || *w_pos.last().unwrap() > 1e-6 * (1.0 + w_pos[0]) {
        report.push(
            "tail_decay_pos",
            format!("h''(x) e^(-lambda1 (x-kink)) is not dying out: {w_pos:?}"),
        );
    }
    let near_base = grid[0]
        .min(kink)
        .min(h.breakpoints().first().copied().unwrap_or(kink));
    let step2 = 10.0 / roots.lambda2;
    let w_neg: Vec<f64> = (1..=4)
        .map(|j| {
            let x = near_base - step2 * j as f64;
            h.second_deriv(x) * (roots.lambda2 * (x - kink)).exp()
        })
        .collect();
    if w_neg.windows(2).any(|w| w[1] > w[0]) || *w_neg.last().unwrap() > 1e-6 * (1.0 + w_neg[0]) {
        report.push(
            "tail_decay_neg",
            format!("h''(x) e^(lambda2 (x-kink)) is not dying out: {w_neg:?}"),
        );
    }

    let sd = |y: f64| h.second_deriv(y);
    match numerics::exp_weighted_shifted(
        &sd,
        -roots.lambda1,
        kink,
        kink,
        f64::INFINITY,
        h.breakpoints(),
        1e-6,
    ) {
        Ok(v) if v.is_finite() => {}
        Ok(v) => report.push("tail_integral_pos", format!("non-finite tail integral {v}")),
        Err(e) => report.push("tail_integral_pos", format!("{e}")),
    }
    match numerics::exp_weighted_shifted(
        &sd,
        roots.lambda2,
        kink,
        f64::NEG_INFINITY,
        kink,
        h.breakpoints(),
        1e-6,
    ) {
        Ok(v) if v.is_finite() => {}
        Ok(v) => report.push("tail_integral_neg", format!("non-finite tail integral {v}")),
        Err(e) => report.push("tail_integral_neg", format!("{e}")),
    }

    Ok(report)
}

/// Probe grid used when the caller does not supply one: dense around the
/// kink at the model's diffusion scale, plus points hugging the kink and
/// every breakpoint.
pub fn default_probe_grid(h: &HoldingCost, m: &ModelParams) -> Vec<f64> {
    let s = (m.sigma2.sqrt() / m.beta.sqrt()).max(1.0);
    let kink = h.kink();
    let span = 12.0 * s;
    let mut grid: Vec<f64> = (0..=240)
        .map(|i| kink - span + 2.0 * span * i as f64 / 240.0)
        .collect();
    for &off in &[1e-3, 1e-2, 0.1] {
        grid.push(kink - off);
        grid.push(kink + off);
    }
    for &b in h.breakpoints() {
        grid.push(b - 1e-3);
        grid.push(b + 1e-3);
    }
    grid.sort_by(|p, q| p.partial_cmp(q).unwrap());
    grid.dedup();
    grid
}
