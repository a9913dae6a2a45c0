//! Chernoff-bound conversions between observed counts and expected values.
//!
//! Four directions are supported:
//!
//! * [`expected_lower`] / [`expected_upper`]: bound the expectation `E` of a
//!   sum of independent Bernoulli trials given its observed value `X`.
//! * [`observed_lower`] / [`observed_upper`]: bound the value a sum will take
//!   given its expectation `Y`.
//!
//! Each bound is `X / (1 ± δ)` or `(1 ± δ) Y` where `δ` solves a transcendental
//! equation of the form `rate(δ) = ln(1/ξ)`. All four equations reduce to the
//! Cramér function `A(t) = (1 + t) ln(1 + t) - t`, evaluated here without
//! cancellation so that the root reproduces `ξ` to ~1e-13 relative even for
//! counts around 1e12.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A failure probability, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FailureProb(f64);

impl FailureProb {
    pub fn new(xi: f64) -> Result<Self> {
        if xi > 0.0 && xi < 1.0 {
            Ok(Self(xi))
        } else {
            Err(Error::InvalidFailureProb(xi))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// `ln(1/ξ)`, the right-hand side of every Chernoff equation.
    #[inline]
    pub fn log_inv(self) -> f64 {
        -self.0.ln()
    }
}

impl TryFrom<f64> for FailureProb {
    type Error = Error;

    fn try_from(xi: f64) -> Result<Self> {
        Self::new(xi)
    }
}

impl From<FailureProb> for f64 {
    fn from(xi: FailureProb) -> f64 {
        xi.0
    }
}

/// A solved Chernoff equation: the deviation `δ` and the resulting bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChernoffRoot {
    pub delta: f64,
    pub value: f64,
    /// Set when no interior root exists and a convention was applied instead
    /// (zero input, or the observed-lower clamp).
    pub degenerate: bool,
}

impl ChernoffRoot {
    fn degenerate(delta: f64, value: f64) -> Self {
        Self {
            delta,
            value,
            degenerate: true,
        }
    }
}

/// `(1 + t) ln(1 + t) - t` for `t >= -1`.
pub fn cramer(t: f64) -> f64 {
    if t.abs() < 0.1 {
        // sum_{k>=2} (-1)^k t^k / (k (k - 1))
        let mut pow = t * t;
        let mut sum = 0.0;
        for k in 2..40u32 {
            let term = pow / f64::from(k * (k - 1));
            sum += term;
            if term.abs() <= 1e-18 * sum.abs() {
                break;
            }
            pow *= -t;
        }
        sum
    } else if t <= -1.0 {
        1.0
    } else {
        (1.0 + t) * t.ln_1p() - t
    }
}

/// `u - 1 + e^{-u}`: the lower-expected equation in `u = ln(1 + δ₁)`.
fn expected_lower_rate(u: f64) -> f64 {
    if u < 0.1 {
        // sum_{k>=2} (-u)^k / k!
        let mut term = u * u / 2.0;
        let mut sum = 0.0;
        for k in 3..40u32 {
            sum += term;
            if term.abs() <= 1e-18 * sum.abs() {
                break;
            }
            term *= -u / f64::from(k);
        }
        sum
    } else {
        u + (-u).exp_m1()
    }
}

/// `e^v - 1 - v`: the upper-expected equation in `v = -ln(1 - δ₂)`.
fn expected_upper_rate(v: f64) -> f64 {
    if v < 0.1 {
        let mut term = v * v / 2.0;
        let mut sum = 0.0;
        for k in 3..40u32 {
            sum += term;
            if term <= 1e-18 * sum {
                break;
            }
            term *= v / f64::from(k);
        }
        sum
    } else {
        v.exp_m1() - v
    }
}

/// Solve `scale * f(t) = target` for an increasing `f` with `f(0) = 0`.
///
/// `eval` returns `(f(t), f'(t))`. The bracket `[0, hi]` is grown geometrically
/// unless `hi_fixed` is set, then refined by Newton steps that fall back to
/// bisection whenever they leave the bracket.
fn solve_increasing(
    eval: impl Fn(f64) -> (f64, f64),
    scale: f64,
    target: f64,
    initial: f64,
    hi_fixed: Option<f64>,
) -> f64 {
    let mut lo = 0.0_f64;
    let mut hi = match hi_fixed {
        Some(h) => h,
        None => {
            let mut h = initial.max(1e-300);
            while scale * eval(h).0 < target {
                lo = h;
                h *= 2.0;
                if !h.is_finite() {
                    return f64::INFINITY;
                }
            }
            h
        }
    };
    let tol = 2.0 * f64::EPSILON * target.max(1.0);
    let mut t = initial.clamp(lo, hi);
    if t <= lo || t >= hi {
        t = 0.5 * (lo + hi);
    }
    // Newton's step is kept only while it at least halves the previous one;
    // far out on an exponential branch it crawls and bisection takes over.
    let mut step_old = hi - lo;
    for _ in 0..400 {
        let (f, df) = eval(t);
        let resid = scale * f - target;
        if resid.abs() <= tol {
            return t;
        }
        if resid > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let newton = t - resid / (scale * df);
        let step = (newton - t).abs();
        let next = if newton > lo && newton < hi && newton.is_finite() && 2.0 * step <= step_old {
            step_old = step;
            newton
        } else {
            step_old = hi - lo;
            0.5 * (lo + hi)
        };
        if next == t || hi - lo <= 2.0 * f64::EPSILON * hi {
            return next;
        }
        t = next;
    }
    t
}

/// Starting point for `e^v - 1 - v = r`.
fn exp_guess(r: f64) -> f64 {
    if r < 1.0 {
        (2.0 * r).sqrt()
    } else {
        (1.0 + r + (1.0 + r).ln()).ln()
    }
}

/// Starting point for `(1 + d) ln(1 + d) - d = r`.
fn cramer_guess(r: f64) -> f64 {
    if r < 1.0 {
        (2.0 * r).sqrt()
    } else {
        let w = (r + 1.0) / (r + 1.0).ln().max(1.0);
        w.max(1.0)
    }
}

/// Lower bound on the expectation given observation `x`: `X / (1 + δ₁)`.
pub fn expected_lower_root(x: f64, xi: FailureProb) -> ChernoffRoot {
    if !(x > 0.0) {
        return ChernoffRoot::degenerate(0.0, 0.0);
    }
    let target = xi.log_inv();
    let guess = (2.0 * target / x).sqrt().min(1.0 + target / x);
    let u = solve_increasing(
        |u| (expected_lower_rate(u), -(-u).exp_m1()),
        x,
        target,
        guess,
        None,
    );
    ChernoffRoot {
        delta: u.exp_m1(),
        value: x * (-u).exp(),
        degenerate: false,
    }
}

/// Upper bound on the expectation given observation `x`: `X / (1 - δ₂)`.
///
/// For `x = 0` the bound is `ln(1/ξ)`, the limit of the general formula and
/// the exact Poisson bound for a zero observation.
pub fn expected_upper_root(x: f64, xi: FailureProb) -> ChernoffRoot {
    let target = xi.log_inv();
    if !(x > 0.0) {
        return ChernoffRoot::degenerate(1.0, target);
    }
    let guess = exp_guess(target / x);
    let v = solve_increasing(
        |v| (expected_upper_rate(v), v.exp_m1()),
        x,
        target,
        guess,
        None,
    );
    ChernoffRoot {
        delta: -(-v).exp_m1(),
        value: x * v.exp(),
        degenerate: false,
    }
}

/// Upper bound on the observed value given expectation `y`: `(1 + δ₁′) Y`.
pub fn observed_upper_root(y: f64, xi: FailureProb) -> ChernoffRoot {
    if !(y > 0.0) {
        return ChernoffRoot::degenerate(0.0, 0.0);
    }
    let target = xi.log_inv();
    let guess = cramer_guess(target / y);
    let d = solve_increasing(|d| (cramer(d), d.ln_1p()), y, target, guess, None);
    ChernoffRoot {
        delta: d,
        value: (1.0 + d) * y,
        degenerate: false,
    }
}

/// Lower bound on the observed value given expectation `y`: `(1 - δ₂′) Y`.
///
/// The rate saturates at `Y` as `δ₂′ → 1`, so when `ξ <= e^{-Y}` there is no
/// interior root and the bound is clamped to zero.
pub fn observed_lower_root(y: f64, xi: FailureProb) -> ChernoffRoot {
    if !(y > 0.0) {
        return ChernoffRoot::degenerate(0.0, 0.0);
    }
    let target = xi.log_inv();
    if y <= target {
        return ChernoffRoot::degenerate(1.0, 0.0);
    }
    let guess = (2.0 * target / y).sqrt().min(0.5);
    let d = solve_increasing(
        |d| (cramer(-d), -(-d).ln_1p()),
        y,
        target,
        guess,
        Some(1.0),
    );
    ChernoffRoot {
        delta: d,
        value: (1.0 - d) * y,
        degenerate: false,
    }
}

/// `E^L(X, ξ)`.
#[inline]
pub fn expected_lower(x: f64, xi: FailureProb) -> f64 {
    expected_lower_root(x, xi).value
}

/// `E^U(X, ξ)`.
#[inline]
pub fn expected_upper(x: f64, xi: FailureProb) -> f64 {
    expected_upper_root(x, xi).value
}

/// `O^U(Y, ξ)`.
#[inline]
pub fn observed_upper(y: f64, xi: FailureProb) -> f64 {
    observed_upper_root(y, xi).value
}

/// `O^L(Y, ξ)`.
#[inline]
pub fn observed_lower(y: f64, xi: FailureProb) -> f64 {
    observed_lower_root(y, xi).value
}
