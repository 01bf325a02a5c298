//! The derivative family g and its critical points.
//!
//! For a coefficient pair (A, B), g_{A,B} is the derivative of a candidate
//! value function, and the band thresholds are characterized entirely by
//! where g crosses the variable adjustment costs -k and l. Writing a for the
//! kink, d = x - a, c = (2/sigma^2)/(lambda1 + lambda2), and the signed
//! prefix integrals
//!
//!   P1(x) = int_a^x e^{-lambda1 (y-a)} h''(y) dy
//!   P2(x) = int_a^x e^{ lambda2 (y-a)} h''(y) dy
//!
//! with h'_a the one-sided slope of h at the kink on the side containing x:
//!
//!   g(x)   = c [ (A - h'_a - P1(x)) e^{lambda1 d} / lambda1
//!              + (B - h'_a - P2(x)) e^{-lambda2 d} / lambda2 ] + h'(x)/beta
//!   g'(x)  = c [ (A - h'_a - P1(x)) e^{lambda1 d}
//!              - (B - h'_a - P2(x)) e^{-lambda2 d} ]
//!   g''(x) = c [ lambda1 (A - h'_a - P1(x)) e^{lambda1 d}
//!              + lambda2 (B - h'_a - P2(x)) e^{-lambda2 d} ]
//!
//! g and g' are continuous across the kink: the one-sided slope terms cancel
//! because c (1/lambda1 + 1/lambda2) = 1/beta. g'' jumps where h' does.
//!
//! When the coefficients lie strictly inside their feasible region, g' has
//! exactly one zero x1 below the kink and one zero x2 above it, g falls on
//! (-inf, x1), rises on (x1, x2), and falls again on (x2, inf). That shape
//! is what makes every root bracket in the band solver a true sign change.

use serde::Serialize;

use crate::characteristic::CharacteristicRoots;
use crate::holding_cost::{HoldingCost, ModelParams};
use crate::numerics::{bisect, PrefixCache};
use crate::{Error, Result};

/// The free constants (A, B) selecting one member of the derivative family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GCoefficients {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

/// The two stationary points of g: x1 < kink < x2.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CriticalPoints {
    pub x1: f64,
    pub x2: f64,
}

/// Evaluator for one (model, holding cost) pair, reusable across many
/// coefficient pairs. The prefix integrals P1, P2 are cached and extended
/// incrementally, so nested root-finding that probes thousands of points
/// pays quadrature cost only for short fresh segments.
pub struct GEvaluator {
    m: ModelParams,
    h: HoldingCost,
    roots: CharacteristicRoots,
    c_factor: f64,
    quad_reltol: f64,
    p1: PrefixCache,
    p2: PrefixCache,
}

impl GEvaluator {
    pub fn new(m: &ModelParams, h: &HoldingCost, roots: &CharacteristicRoots) -> Self {
        Self::with_reltol(m, h, roots, 1e-11)
    }

    pub fn with_reltol(
        m: &ModelParams,
        h: &HoldingCost,
        roots: &CharacteristicRoots,
        quad_reltol: f64,
    ) -> Self {
        let kink = h.kink();
        GEvaluator {
            m: *m,
            h: h.clone(),
            roots: *roots,
            c_factor: (2.0 / m.sigma2) / (roots.lambda1 + roots.lambda2),
            quad_reltol,
            p1: PrefixCache::new(kink, -roots.lambda1),
            p2: PrefixCache::new(kink, roots.lambda2),
        }
    }

    pub fn kink(&self) -> f64 {
        self.h.kink()
    }

    pub fn roots(&self) -> &CharacteristicRoots {
        &self.roots
    }

    pub fn holding_cost(&self) -> &HoldingCost {
        &self.h
    }

    pub fn model(&self) -> &ModelParams {
        &self.m
    }

    fn prefix1(&self, x: f64) -> Result<f64> {
        let h = &self.h;
        self.p1
            .eval(x, &|y| h.second_deriv(y), h.breakpoints(), self.quad_reltol)
    }

    fn prefix2(&self, x: f64) -> Result<f64> {
        let h = &self.h;
        self.p2
            .eval(x, &|y| h.second_deriv(y), h.breakpoints(), self.quad_reltol)
    }

    /// The two exponential terms shared by g, g', g'':
    /// t1 = (A - h'_a - P1) e^{lambda1 d} and t2 = (B - h'_a - P2) e^{-lambda2 d}.
    fn terms(&self, c: GCoefficients, x: f64) -> Result<(f64, f64)> {
        let kink = self.h.kink();
        let hp = if x >= kink {
            self.h.deriv_plus()
        } else {
            self.h.deriv_minus()
        };
        let d = x - kink;
        let t1 = (c.a - hp - self.prefix1(x)?) * (self.roots.lambda1 * d).exp();
        let t2 = (c.b - hp - self.prefix2(x)?) * (-self.roots.lambda2 * d).exp();
        Ok((t1, t2))
    }

    /// g_{A,B}(x).
    pub fn g(&self, c: GCoefficients, x: f64) -> Result<f64> {
        let (t1, t2) = self.terms(c, x)?;
        Ok(self.c_factor * (t1 / self.roots.lambda1 + t2 / self.roots.lambda2)
            + self.h.deriv(x) / self.m.beta)
    }

    /// g'_{A,B}(x).
    pub fn g_prime(&self, c: GCoefficients, x: f64) -> Result<f64> {
        let (t1, t2) = self.terms(c, x)?;
        Ok(self.c_factor * (t1 - t2))
    }

    /// g''_{A,B}(x); at the kink the right-hand limit is returned.
    pub fn g_second(&self, c: GCoefficients, x: f64) -> Result<f64> {
        let (t1, t2) = self.terms(c, x)?;
        Ok(self.c_factor * (self.roots.lambda1 * t1 + self.roots.lambda2 * t2))
    }

    /// Slope of g at the kink, c (A - B): positive exactly when the family
    /// member is increasing through the kink, a precondition for both
    /// critical points to exist.
    pub fn slope_at_kink(&self, c: GCoefficients) -> f64 {
        self.c_factor * (c.a - c.b)
    }

    /// The stationary point x2 > kink where g stops rising, located by
    /// doubling expansion and bisection of g'. Requires g'(kink) > 0; fails
    /// with a diagnosis when g' never turns negative (A at or above its
    /// upper corner).
    pub fn find_x2(&self, c: GCoefficients, xtol: f64) -> Result<f64> {
        let kink = self.h.kink();
        let slope = self.slope_at_kink(c);
        if !(slope > 0.0) {
            return Err(Error::infeasible(
                "find_x2",
                format!("g'(kink) = c(A - B) = {slope} must be positive (A = {}, B = {})", c.a, c.b),
            ));
        }
        let mut lo = kink;
        let mut flo = slope;
        let mut w = 1.0 / self.roots.lambda1;
        loop {
            if self.roots.lambda1 * w > 600.0 {
                return Err(Error::infeasible(
                    "find_x2",
                    "g' stays positive right of the kink as far as representable: A is at or above its upper corner",
                ));
            }
            let x = kink + w;
            let fx = self.g_prime(c, x)?;
            if !fx.is_finite() {
                return Err(Error::NonFinite(format!("g'({x}) during x2 bracket expansion")));
            }
            if fx < 0.0 {
                let r = bisect(
                    |t| self.g_prime(c, t),
                    lo,
                    x,
                    flo,
                    fx,
                    xtol,
                    f64::INFINITY,
                    "find_x2",
                )?;
                return Ok(r.root);
            }
            lo = x;
            flo = fx;
            w *= 2.0;
        }
    }

    /// The stationary point x1 < kink, mirror image of [`GEvaluator::find_x2`].
    /// Fails with a diagnosis when g' never turns negative to the left
    /// (B at or below its lower corner).
    pub fn find_x1(&self, c: GCoefficients, xtol: f64) -> Result<f64> {
        let kink = self.h.kink();
        let slope = self.slope_at_kink(c);
        if !(slope > 0.0) {
            return Err(Error::infeasible(
                "find_x1",
                format!("g'(kink) = c(A - B) = {slope} must be positive (A = {}, B = {})", c.a, c.b),
            ));
        }
        let mut hi = kink;
        let mut fhi = slope;
        let mut w = 1.0 / self.roots.lambda2;
        loop {
            if self.roots.lambda2 * w > 600.0 {
                return Err(Error::infeasible(
                    "find_x1",
                    "g' stays positive left of the kink as far as representable: B is at or below its lower corner",
                ));
            }
            let x = kink - w;
            let fx = self.g_prime(c, x)?;
            if !fx.is_finite() {
                return Err(Error::NonFinite(format!("g'({x}) during x1 bracket expansion")));
            }
            if fx < 0.0 {
                let r = bisect(
                    |t| self.g_prime(c, t),
                    x,
                    hi,
                    fx,
                    fhi,
                    xtol,
                    f64::INFINITY,
                    "find_x1",
                )?;
                return Ok(r.root);
            }
            hi = x;
            fhi = fx;
            w *= 2.0;
        }
    }

    /// Both stationary points.
    pub fn critical_points(&self, c: GCoefficients, xtol: f64) -> Result<CriticalPoints> {
        Ok(CriticalPoints {
            x1: self.find_x1(c, xtol)?,
            x2: self.find_x2(c, xtol)?,
        })
    }
}

/// Change of basis from (A, B) to the homogeneous value-function
/// coefficients (A1, B1) with V'(x) = g(x):
/// A1 = c e^{-lambda1 a} A / lambda1^2, B1 = -c e^{lambda2 a} B / lambda2^2.
#[cfg(test)]
pub(crate) fn value_coefficients(
    c: GCoefficients,
    m: &ModelParams,
    roots: &CharacteristicRoots,
    kink: f64,
) -> (f64, f64) {
    let cf = (2.0 / m.sigma2) / (roots.lambda1 + roots.lambda2);
    let a1 = cf * (-roots.lambda1 * kink).exp() * c.a / (roots.lambda1 * roots.lambda1);
    let b1 = -cf * (roots.lambda2 * kink).exp() * c.b / (roots.lambda2 * roots.lambda2);
    (a1, b1)
}
