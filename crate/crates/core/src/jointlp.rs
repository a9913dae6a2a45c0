//! Closed-form bounds for the joint-constraint linear program.
//!
//! Minimise (or maximise) `F = Σ γᵢ gᵢ` over expectations `gᵢ` subject to
//! Chernoff constraints on every partial sum of the observed `g̃ᵢ`. With the
//! coefficients sorted ascending, `F` telescopes into
//!
//! ```text
//! γ₁* (g₁+g₂+g₃) + (γ₂*-γ₁*) (g₂+g₃) + (γ₃*-γ₂*) g₃
//! ```
//!
//! and each bracket is bounded by the constraint on that partial sum. The
//! result is always a valid bound; it coincides with the LP optimum whenever
//! the three nested constraints can be active together.

use crate::bounds::{self, FailureProb};
use crate::error::{Error, Result};

/// Coefficients, observed sums, and failure probabilities of one joint bound.
///
/// `xis[0]` belongs to the single-term constraint, `xis[1]` to the pair term,
/// `xis[2]` to the triple term. Slots whose term carries a zero coefficient
/// are never evaluated and may hold any value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointInstance {
    gammas: [f64; 3],
    gs: [f64; 3],
    xis: [Option<FailureProb>; 3],
}

/// One telescoped term: coefficient, observed partial sum, constraint slot.
#[derive(Debug, Clone, Copy)]
struct Term {
    coef: f64,
    sum: f64,
    slot: usize,
}

impl JointInstance {
    pub fn new(gammas: [f64; 3], gs: [f64; 3], xis: [f64; 3]) -> Result<Self> {
        for (i, (&g, &s)) in gammas.iter().zip(&gs).enumerate() {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::domain(format!("gamma[{i}]"), format!("{g} < 0")));
            }
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::domain(format!("g[{i}]"), format!("{s} < 0")));
            }
        }
        let inst = Self {
            gammas,
            gs,
            xis: xis.map(|x| FailureProb::new(x).ok()),
        };
        for t in inst.terms() {
            if inst.xis[t.slot].is_none() {
                return Err(Error::InvalidFailureProb(xis[t.slot]));
            }
        }
        Ok(inst)
    }

    pub fn gammas(&self) -> [f64; 3] {
        self.gammas
    }

    pub fn gs(&self) -> [f64; 3] {
        self.gs
    }

    pub fn xi(&self, slot: usize) -> Option<FailureProb> {
        self.xis[slot]
    }

    /// Non-vanishing telescoped terms, in ascending-γ order.
    fn terms(&self) -> impl Iterator<Item = Term> {
        let mut order = [0usize, 1, 2];
        // stable: ties keep original index order
        order.sort_by(|&a, &b| self.gammas[a].total_cmp(&self.gammas[b]));
        let g = order.map(|i| self.gammas[i]);
        let s = order.map(|i| self.gs[i]);
        let pair = s[1] + s[2];
        let triple = {
            let mut v = self.gs;
            v.sort_by(f64::total_cmp);
            v[0] + v[1] + v[2]
        };
        [
            Term { coef: g[0], sum: triple, slot: 2 },
            Term { coef: g[1] - g[0], sum: pair, slot: 1 },
            Term { coef: g[2] - g[1], sum: s[2], slot: 0 },
        ]
        .into_iter()
        .filter(|t| t.coef > 0.0)
    }

    fn evaluate(&self, bound: fn(f64, FailureProb) -> f64) -> f64 {
        self.terms()
            .map(|t| {
                let xi = self.xis[t.slot].expect("validated at construction");
                t.coef * bound(t.sum, xi)
            })
            .sum()
    }
}

/// `F_L`: lower bound of `Σ γᵢ ⟨gᵢ⟩` under the joint constraints.
pub fn joint_lower(inst: &JointInstance) -> f64 {
    inst.evaluate(bounds::expected_lower)
}

/// `F_U`: upper bound of `Σ γᵢ ⟨gᵢ⟩` under the joint constraints.
pub fn joint_upper(inst: &JointInstance) -> f64 {
    inst.evaluate(bounds::expected_upper)
}
