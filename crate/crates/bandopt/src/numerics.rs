//! Quadrature and root-finding primitives shared by the solver modules.
//!
//! Everything here is deterministic: adaptive Gauss-Legendre refinement with
//! breakpoint-aware segmentation, plain bisection (the monotonicity facts the
//! solver relies on justify bisection and nothing stronger), and a prefix
//! cache for integrals that accumulate from a fixed anchor point.
//!
//! Gauss-Legendre nodes are strictly interior, so integrands are never
//! sampled exactly at a segment endpoint. Splitting at declared breakpoints
//! therefore yields samples that always sit on a single smooth piece, even
//! when a piecewise second derivative jumps at the cut.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::{Error, Result};

/// Recursion limit for one adaptive segment. Integrands here are analytic
/// between declared breakpoints and converge in a handful of levels; hitting
/// the cap means an undeclared discontinuity or a hostile integrand.
const MAX_DEPTH: u32 = 60;

/// Hard cap on window doublings for semi-infinite integrals.
const MAX_DOUBLINGS: u32 = 60;

/// Bisection iteration cap. 200 halvings exhaust f64 resolution on any
/// practical bracket, so reaching it indicates a sign-stability problem.
const MAX_BISECT_ITER: u32 = 200;

/// 7-point Gauss-Legendre abscissae (nonnegative half) and weights on [-1,1].
const GL_X: [f64; 4] = [
    0.0,
    0.405_845_151_377_397_166_9,
    0.741_531_185_599_394_439_9,
    0.949_107_912_342_758_524_5,
];
const GL_W: [f64; 4] = [
    0.417_959_183_673_469_387_8,
    0.381_830_050_505_118_944_9,
    0.279_705_391_489_276_667_9,
    0.129_484_966_168_869_693_3,
];

fn eval_checked(f: &dyn Fn(f64) -> f64, x: f64) -> Result<f64> {
    let v = f(x);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("integrand at x = {x}")))
    }
}

/// One 7-point Gauss-Legendre panel over [lo, hi]. Exact through degree 13.
fn gl7(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> Result<f64> {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let mut s = GL_W[0] * eval_checked(f, c)?;
    for i in 1..4 {
        let d = h * GL_X[i];
        s += GL_W[i] * (eval_checked(f, c - d)? + eval_checked(f, c + d)?);
    }
    Ok(s * h)
}

fn adapt(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let mid = 0.5 * (lo + hi);
    let left = gl7(f, lo, mid)?;
    let right = gl7(f, mid, hi)?;
    let refined = left + right;
    if (refined - whole).abs() <= tol
        || hi - lo <= f64::EPSILON * (lo.abs() + hi.abs()) + 1e-30
    {
        return Ok(refined);
    }
    if depth == 0 {
        return Err(Error::numerics(
            "quadrature",
            format!("refinement limit reached on [{lo}, {hi}]; undeclared discontinuity?"),
        ));
    }
    let a = adapt(f, lo, mid, left, 0.5 * tol, depth - 1)?;
    let b = adapt(f, mid, hi, right, 0.5 * tol, depth - 1)?;
    Ok(a + b)
}

/// Integrate one smooth segment to the given relative tolerance.
///
/// The tolerance is anchored to the unsigned mass of a coarse panel pass,
/// which keeps cancellation inside the segment from demanding impossible
/// absolute accuracy.
fn integrate_segment(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, reltol: f64) -> Result<f64> {
    debug_assert!(lo < hi);
    const PANELS: usize = 8;
    let w = (hi - lo) / PANELS as f64;
    let mut coarse = [0.0f64; PANELS];
    let mut mass = 0.0;
    let mut sum = 0.0;
    for (p, c) in coarse.iter_mut().enumerate() {
        *c = gl7(f, lo + w * p as f64, lo + w * (p + 1) as f64)?;
        mass += c.abs();
        sum += *c;
    }
    let tol = reltol * mass.max(sum.abs()).max(1e-300) / PANELS as f64;
    let mut total = 0.0;
    for (p, c) in coarse.iter().enumerate() {
        total += adapt(f, lo + w * p as f64, lo + w * (p + 1) as f64, *c, tol, MAX_DEPTH)?;
    }
    Ok(total)
}

/// Integrate `f` over a finite range, splitting at the listed breakpoints.
///
/// `lo > hi` is allowed and returns the negated integral, so callers can pass
/// signed ranges directly. Breakpoints outside the range are ignored.
pub(crate) fn integrate(
    f: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    breakpoints: &[f64],
    reltol: f64,
) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::numerics("quadrature", "finite range required"));
    }
    if lo == hi {
        return Ok(0.0);
    }
    let (a, b, sign) = if lo < hi { (lo, hi, 1.0) } else { (hi, lo, -1.0) };
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&x| x > a && x < b)
        .collect();
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.dedup();
    let mut total = 0.0;
    let mut left = a;
    for c in cuts {
        total += integrate_segment(f, left, c, reltol)?;
        left = c;
    }
    total += integrate_segment(f, left, b, reltol)?;
    Ok(sign * total)
}

/// Integrate `exp(rate * (y - shift)) * f(y)` over a possibly semi-infinite
/// range. Infinite ends are handled by window doubling: the window keeps
/// doubling until successive truncations agree to `reltol`, and failure to
/// settle is reported as divergence rather than silently truncated.
pub(crate) fn exp_weighted_shifted(
    f: &dyn Fn(f64) -> f64,
    rate: f64,
    shift: f64,
    lo: f64,
    hi: f64,
    breakpoints: &[f64],
    reltol: f64,
) -> Result<f64> {
    let w = move |y: f64| (rate * (y - shift)).exp() * f(y);
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => integrate(&w, lo, hi, breakpoints, reltol),
        (true, false) => extend_infinite(&w, lo, rate, breakpoints, reltol, 1.0),
        (false, true) => extend_infinite(&w, hi, rate, breakpoints, reltol, -1.0),
        (false, false) => {
            let right = extend_infinite(&w, shift, rate, breakpoints, reltol, 1.0)?;
            let left = extend_infinite(&w, shift, rate, breakpoints, reltol, -1.0)?;
            Ok(left + right)
        }
    }
}

/// Accumulate windows [start, start +/- 2^j W] until the increments vanish
/// relative to the running estimate.
fn extend_infinite(
    w: &dyn Fn(f64) -> f64,
    start: f64,
    rate: f64,
    breakpoints: &[f64],
    reltol: f64,
    direction: f64,
) -> Result<f64> {
    // Initial window sized to the weight's decay length when it decays.
    let decaying = rate * direction < 0.0;
    let span0 = if decaying { (10.0 / rate.abs()).max(1.0) } else { 1.0 };
    let mut edge = start + direction * span0;
    // `integrate` negates descending ranges; scale by `direction` so each
    // window enters with its left-to-right orientation regardless of side.
    let mut total = direction * integrate(w, start, edge, breakpoints, reltol)?;
    let mut prev_inc = f64::INFINITY;
    let mut growing = 0u32;
    for _ in 0..MAX_DOUBLINGS {
        let next = start + 2.0 * (edge - start);
        let inc = direction * integrate(w, edge, next, breakpoints, reltol)?;
        total += inc;
        edge = next;
        if inc.abs() <= reltol * total.abs().max(1e-300) {
            return Ok(total);
        }
        if inc.abs() >= prev_inc {
            growing += 1;
            if growing >= 4 {
                return Err(Error::numerics(
                    "quadrature",
                    "semi-infinite integral diverges: window increments are not shrinking",
                ));
            }
        } else {
            growing = 0;
        }
        prev_inc = inc.abs();
    }
    Err(Error::numerics(
        "quadrature",
        "semi-infinite integral did not settle within the doubling budget",
    ))
}

/// Map finite f64 to u64 preserving order, for use as a BTreeMap key.
fn total_order_key(x: f64) -> u64 {
    debug_assert!(x.is_finite());
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | 0x8000_0000_0000_0000
    }
}

/// Cache of signed prefix integrals from a fixed anchor:
/// `value(x) = integral from anchor to x of exp(rate*(y-anchor)) f(y) dy`.
///
/// New points are integrated from the nearest previously cached point, so a
/// root-finder probing thousands of nearby points pays only for short fresh
/// segments. Neighboring evaluations share their common prefix exactly, which
/// also keeps finite-difference combinations of cached values clean.
pub(crate) struct PrefixCache {
    anchor: f64,
    rate: f64,
    map: RefCell<BTreeMap<u64, (f64, f64)>>,
}

impl PrefixCache {
    pub(crate) fn new(anchor: f64, rate: f64) -> Self {
        PrefixCache {
            anchor,
            rate,
            map: RefCell::new(BTreeMap::new()),
        }
    }

    pub(crate) fn eval(
        &self,
        x: f64,
        f: &dyn Fn(f64) -> f64,
        breakpoints: &[f64],
        reltol: f64,
    ) -> Result<f64> {
        if x == self.anchor {
            return Ok(0.0);
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("prefix integral endpoint".into()));
        }
        let key = total_order_key(x);
        // Closest known point: the cached neighbors of x, or the anchor.
        let (mut base_x, mut base_v) = (self.anchor, 0.0);
        {
            let map = self.map.borrow();
            if let Some((_, &(px, pv))) = map.range(..=key).next_back() {
                if px == x {
                    return Ok(pv);
                }
                if (x - px).abs() < (x - base_x).abs() {
                    (base_x, base_v) = (px, pv);
                }
            }
            if let Some((_, &(sx, sv))) = map.range(key..).next() {
                if (x - sx).abs() < (x - base_x).abs() {
                    (base_x, base_v) = (sx, sv);
                }
            }
        }
        let anchor = self.anchor;
        let rate = self.rate;
        let w = move |y: f64| (rate * (y - anchor)).exp() * f(y);
        let seg = integrate(&w, base_x, x, breakpoints, reltol)?;
        let v = base_v + seg;
        self.map.borrow_mut().insert(key, (x, v));
        Ok(v)
    }
}

/// Outcome of a bisection run: the best point seen and the final bracket
/// width (reported by the solver as achieved accuracy).
#[derive(Debug, Clone, Copy)]
pub(crate) struct RootResult {
    pub root: f64,
    pub width: f64,
}

/// Bisect a sign change of `f` on [lo, hi].
///
/// Stops once the bracket is narrower than `xtol` and the best residual seen
/// is within `ftol`; if the residual target is unreachable (evaluation noise),
/// halving continues down to floating-point resolution and the best point is
/// returned anyway. Pass `ftol = f64::INFINITY` for pure width-driven roots.
pub(crate) fn bisect(
    mut f: impl FnMut(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
    flo: f64,
    fhi: f64,
    xtol: f64,
    ftol: f64,
    stage: &str,
) -> Result<RootResult> {
    if flo == 0.0 {
        return Ok(RootResult { root: lo, width: 0.0 });
    }
    if fhi == 0.0 {
        return Ok(RootResult { root: hi, width: 0.0 });
    }
    if (flo < 0.0) == (fhi < 0.0) {
        return Err(Error::numerics(
            stage,
            format!("no sign change on bracket [{lo}, {hi}]: f = ({flo}, {fhi})"),
        ));
    }
    let sign = if flo < 0.0 { 1.0 } else { -1.0 };
    let (mut best, mut fbest) = if flo.abs() <= fhi.abs() { (lo, flo) } else { (hi, fhi) };
    for _ in 0..MAX_BISECT_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // bracket exhausted at f64 resolution
        }
        let fm = f(mid)?;
        if fm.abs() < fbest.abs() {
            (best, fbest) = (mid, fm);
        }
        if sign * fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= xtol && fbest.abs() <= ftol {
            break;
        }
    }
    Ok(RootResult { root: best, width: hi - lo })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_matches_closed_forms() {
        let f = |x: f64| x * x;
        let v = integrate(&f, 0.0, 1.0, &[], 1e-12).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-14);

        let g = |x: f64| x.exp();
        let v = integrate(&g, -1.0, 2.0, &[], 1e-12).unwrap();
        assert!((v - (2f64.exp() - (-1f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn reversed_range_negates() {
        let f = |x: f64| x.cos();
        let a = integrate(&f, 0.0, 1.5, &[], 1e-12).unwrap();
        let b = integrate(&f, 1.5, 0.0, &[], 1e-12).unwrap();
        assert_eq!(a, -b);
    }

    #[test]
    fn breakpoint_splits_kinked_integrand() {
        // |x| over [-1, 2]: exact 0.5 + 2 = 2.5; the kink is declared.
        let f = |x: f64| x.abs();
        let v = integrate(&f, -1.0, 2.0, &[0.0], 1e-12).unwrap();
        assert!((v - 2.5).abs() < 1e-13);
    }

    #[test]
    fn step_discontinuity_with_breakpoint() {
        // Nodes are interior, so each side samples its own branch only.
        let f = |x: f64| if x < 0.0 { 1.0 } else { 3.0 };
        let v = integrate(&f, -1.0, 1.0, &[0.0], 1e-12).unwrap();
        assert!((v - 4.0).abs() < 1e-13);
    }

    #[test]
    fn semi_infinite_decay() {
        // integral of 2 e^{-y} over [0, inf) = 2
        let v = exp_weighted_shifted(&|_| 2.0, -1.0, 0.0, 0.0, f64::INFINITY, &[], 1e-11).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn left_tail_keeps_orientation() {
        // integral of 2 e^{y} over (-inf, 0] = 2, same sign as the right tail.
        let v =
            exp_weighted_shifted(&|_| 2.0, 1.0, 0.0, f64::NEG_INFINITY, 0.0, &[], 1e-11).unwrap();
        assert!((v - 2.0).abs() < 1e-9, "got {v}");
        // Doubly infinite: e^{-|y|}-style split, 2 + 2.
        let f = |y: f64| if y >= 0.0 { (-2.0 * y).exp() } else { (2.0 * y).exp() };
        let v = exp_weighted_shifted(
            &f,
            1.0,
            0.0,
            f64::NEG_INFINITY,
            f64::INFINITY,
            &[0.0],
            1e-11,
        )
        .unwrap();
        // integral of e^{y} e^{-2y} over [0,inf) + e^{y} e^{2y} over (-inf,0]
        // = 1 + 1/3.
        assert!((v - (1.0 + 1.0 / 3.0)).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn semi_infinite_divergence_detected() {
        // e^{0.5 y} against weight e^{-0.2 y} grows without bound
        let r = exp_weighted_shifted(
            &|y: f64| (0.5 * y).exp(),
            -0.2,
            0.0,
            0.0,
            f64::INFINITY,
            &[],
            1e-10,
        );
        assert!(r.is_err());
    }

    #[test]
    fn prefix_cache_matches_direct_integration() {
        let cache = PrefixCache::new(0.0, -1.0);
        let f = |y: f64| y * y;
        let direct = |x: f64| integrate(&|y: f64| (-y).exp() * y * y, 0.0, x, &[], 1e-13).unwrap();
        // Probe out of order to exercise nearest-neighbor extension.
        for &x in &[1.0, 0.5, 2.0, 1.75, -1.0, -0.25, 1.0001] {
            let c = cache.eval(x, &f, &[], 1e-13).unwrap();
            assert!((c - direct(x)).abs() < 1e-12, "x={x}: {c} vs {}", direct(x));
        }
    }

    #[test]
    fn prefix_cache_is_additive_across_probes() {
        // value(b) - value(a) must equal the direct integral over [a, b]
        // even when the two were extended from different bases.
        let cache = PrefixCache::new(0.0, 0.5);
        let f = |y: f64| 1.0 / (1.0 + y * y);
        let va = cache.eval(-2.0, &f, &[], 1e-13).unwrap();
        let vb = cache.eval(3.0, &f, &[], 1e-13).unwrap();
        let direct =
            integrate(&|y: f64| (0.5 * y).exp() / (1.0 + y * y), -2.0, 3.0, &[], 1e-13).unwrap();
        assert!((vb - va - direct).abs() < 1e-12);
    }

    #[test]
    fn bisect_finds_root_and_reports_width() {
        let r = bisect(
            |x| Ok(x * x - 2.0),
            0.0,
            2.0,
            -2.0,
            2.0,
            1e-12,
            f64::INFINITY,
            "test",
        )
        .unwrap();
        assert!((r.root - 2f64.sqrt()).abs() < 1e-11);
        assert!(r.width <= 1e-11);
    }

    #[test]
    fn bisect_rejects_missing_sign_change() {
        assert!(bisect(|x| Ok(x), 1.0, 2.0, 1.0, 2.0, 1e-9, 1e-9, "test").is_err());
    }

    #[test]
    fn total_order_key_is_monotone() {
        let xs = [-1e300, -2.5, -1e-12, 0.0, 1e-12, 1.0, 3.5e200];
        for w in xs.windows(2) {
            assert!(total_order_key(w[0]) < total_order_key(w[1]));
        }
    }
}
