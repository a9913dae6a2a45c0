//! 256-bit bisection oracle for the Chernoff equations, written in the
//! original deviation form and independent of the crate's solver.

use astro_float::{BigFloat, Consts, RoundingMode};

const P: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

pub struct Hp {
    cc: Consts,
}

#[derive(Debug, Clone, Copy)]
pub enum Eq {
    ExpectedLower,
    ExpectedUpper,
    ObservedUpper,
    ObservedLower,
}

impl Hp {
    pub fn new() -> Self {
        Self {
            cc: Consts::new().unwrap(),
        }
    }

    fn f(&self, v: f64) -> BigFloat {
        BigFloat::from_f64(v, P)
    }

    /// ln of the left-hand side for deviation `d` and count `x`.
    fn log_lhs(&mut self, eq: Eq, x: &BigFloat, d: &BigFloat) -> BigFloat {
        let one = self.f(1.0);
        let (sign_plus, power) = match eq {
            Eq::ExpectedLower => (true, x.div(&one.add(d, P, RM), P, RM)),
            Eq::ExpectedUpper => (false, x.div(&one.sub(d, P, RM), P, RM)),
            Eq::ObservedUpper => (true, x.clone()),
            Eq::ObservedLower => (false, x.clone()),
        };
        // ln(e^{±d} / (1±d)^{1±d}) = ±d - (1±d) ln(1±d)
        let base = if sign_plus {
            one.add(d, P, RM)
        } else {
            one.sub(d, P, RM)
        };
        let lead = if sign_plus { d.clone() } else { d.neg() };
        let inner = lead.sub(&base.mul(&base.ln(P, RM, &mut self.cc), P, RM), P, RM);
        power.mul(&inner, P, RM)
    }

    pub fn bisect(&mut self, eq: Eq, x: f64, xi: f64) -> BigFloat {
        let x = self.f(x);
        let target = self.f(xi).ln(P, RM, &mut self.cc);
        let mut lo = self.f(0.0);
        let two = self.f(2.0);
        let mut hi = self.f(1.0);
        if matches!(eq, Eq::ExpectedLower | Eq::ObservedUpper) {
            // unbounded deviation: grow the bracket until the sign flips
            hi = self.f(10.0);
            let cap = self.f(1e300);
            while self.log_lhs(eq, &x, &hi).cmp(&target).unwrap() > 0 && hi.cmp(&cap).unwrap() < 0 {
                hi = hi.mul(&two, P, RM);
            }
        }
        for _ in 0..240 {
            let mid = lo.add(&hi, P, RM).div(&two, P, RM);
            let v = self.log_lhs(eq, &x, &mid);
            // lhs decreases in d: above target means root is further out
            if v.cmp(&target).unwrap() > 0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn bound(&mut self, eq: Eq, x: f64, xi: f64) -> f64 {
        let d = self.bisect(eq, x, xi);
        let one = self.f(1.0);
        let xb = self.f(x);
        let v = match eq {
            Eq::ExpectedLower => xb.div(&one.add(&d, P, RM), P, RM),
            Eq::ExpectedUpper => xb.div(&one.sub(&d, P, RM), P, RM),
            Eq::ObservedUpper => xb.mul(&one.add(&d, P, RM), P, RM),
            Eq::ObservedLower => xb.mul(&one.sub(&d, P, RM), P, RM),
        };
        to_f64(&v)
    }

    /// |ξ(δ)/ξ - 1| for a returned f64 deviation.
    pub fn relative_residual(&mut self, eq: Eq, x: f64, delta: f64, xi: f64) -> f64 {
        let xb = self.f(x);
        let d = self.f(delta);
        let lhs = self.log_lhs(eq, &xb, &d);
        let target = self.f(xi).ln(P, RM, &mut self.cc);
        let diff = lhs.sub(&target, P, RM);
        to_f64(&diff.exp(P, RM, &mut self.cc).sub(&self.f(1.0), P, RM)).abs()
    }
}

pub fn to_f64(v: &BigFloat) -> f64 {
    format!("{v}").parse().unwrap()
}

