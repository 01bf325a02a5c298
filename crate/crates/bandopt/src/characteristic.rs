//! Characteristic roots of the discounted diffusion operator, the particular
//! solution of the inhomogeneous value ODE, and the public exponential-weight
//! quadrature everything else builds on.
//!
//! The homogeneous equation (sigma^2/2) V'' + mu V' - beta V = 0 has the two
//! exponents lambda1 > 0 and -lambda2 < 0, where lambda1 and lambda2 solve
//! (sigma^2/2) z^2 +/- mu z - beta = 0. The particular solution V0 anchors
//! the value function family: every solution on an interval is
//! A1 e^{lambda1 x} + B1 e^{-lambda2 x} + V0(x).

use serde::Serialize;

use crate::holding_cost::{HoldingCost, ModelParams};
use crate::numerics;
use crate::Result;

/// The positive roots lambda1, lambda2 of the characteristic quadratics.
///
/// lambda1 = [sqrt(mu^2 + 2 beta sigma^2) - mu] / sigma^2 and lambda2 the
/// same with +mu; the product identity lambda1 * lambda2 = 2 beta / sigma^2
/// holds by construction because the smaller root is computed from the
/// larger one through it, avoiding subtractive cancellation at large |mu|.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CharacteristicRoots {
    pub lambda1: f64,
    pub lambda2: f64,
}

pub fn characteristic_roots(m: &ModelParams) -> CharacteristicRoots {
    let s = (m.mu * m.mu + 2.0 * m.beta * m.sigma2).sqrt();
    if m.mu >= 0.0 {
        let lambda2 = (s + m.mu) / m.sigma2;
        let lambda1 = 2.0 * m.beta / (m.sigma2 * lambda2);
        CharacteristicRoots { lambda1, lambda2 }
    } else {
        let lambda1 = (s - m.mu) / m.sigma2;
        let lambda2 = 2.0 * m.beta / (m.sigma2 * lambda1);
        CharacteristicRoots { lambda1, lambda2 }
    }
}

/// Integral of e^{rate * y} f(y) over [lo, hi] to relative tolerance
/// `reltol`, with subdivision at each listed breakpoint.
///
/// Either end may be infinite: the range is then extended by window doubling
/// until successive truncations agree to `reltol`, and an integrand that
/// keeps growing is reported as divergent instead of silently truncated.
/// A reversed finite range integrates with a sign flip.
pub fn exp_weighted_integral<F: Fn(f64) -> f64>(
    f: F,
    rate: f64,
    lo: f64,
    hi: f64,
    breakpoints: &[f64],
    reltol: f64,
) -> Result<f64> {
    numerics::exp_weighted_shifted(&f, rate, 0.0, lo, hi, breakpoints, reltol)
}

/// The particular solution V0 of
/// (sigma^2/2) V'' + mu V' - beta V + h = 0, anchored so V0(kink) = 0:
///
/// V0(x) = c [ e^{-lambda2 (x-a)} Q2(x) - e^{lambda1 (x-a)} Q1(x) ]
///
/// with a the kink, c = (2/sigma^2) / (lambda1 + lambda2), and the signed
/// prefix integrals Q2(x) = int_a^x e^{lambda2 (y-a)} h(y) dy and
/// Q1(x) = int_a^x e^{-lambda1 (y-a)} h(y) dy.
pub fn particular_solution_v0(
    m: &ModelParams,
    h: &HoldingCost,
    roots: &CharacteristicRoots,
    x: f64,
    reltol: f64,
) -> Result<f64> {
    let a = h.kink();
    if x == a {
        return Ok(0.0);
    }
    let c = (2.0 / m.sigma2) / (roots.lambda1 + roots.lambda2);
    let f = |y: f64| h.eval(y);
    let q2 = numerics::exp_weighted_shifted(&f, roots.lambda2, a, a, x, h.breakpoints(), reltol)?;
    let q1 = numerics::exp_weighted_shifted(&f, -roots.lambda1, a, a, x, h.breakpoints(), reltol)?;
    let d = x - a;
    Ok(c * ((-roots.lambda2 * d).exp() * q2 - (roots.lambda1 * d).exp() * q1))
}
