//! Brute-force vertex enumeration for the 3-variable joint-constraint LP.
//!
//! Every subset `S` of `{0,1,2}` contributes `Σ_{i∈S} gᵢ ≥ b_S` (lower
//! problem) or `≤ b_S` (upper problem). The polyhedron is pointed because the
//! three singleton constraints are independent, so its optimum sits on a
//! vertex: we try all C(7,3) active sets.

use mdiqkd_core::bounds::{expected_lower, expected_upper, FailureProb};

pub struct Lp {
    rows: Vec<([f64; 3], f64)>,
}

impl Lp {
    /// `xis[k]` is the failure probability for subsets of size `k + 1`.
    pub fn new(gs: [f64; 3], xis: [f64; 3], upper: bool) -> Self {
        let bound = |s: f64, k: usize| {
            let xi = FailureProb::new(xis[k]).unwrap();
            if upper {
                expected_upper(s, xi)
            } else {
                expected_lower(s, xi)
            }
        };
        let mut rows = Vec::new();
        for mask in 1u8..8 {
            let a = [0, 1, 2].map(|i| if mask >> i & 1 == 1 { 1.0 } else { 0.0 });
            let size = mask.count_ones() as usize;
            let s: f64 = (0..3).map(|i| a[i] * gs[i]).sum();
            rows.push((a, bound(s, size - 1)));
        }
        Self { rows }
    }

    fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(m);
        if d.abs() < 1e-12 {
            return None;
        }
        let mut x = [0.0; 3];
        for (c, xc) in x.iter_mut().enumerate() {
            let mut mc = m;
            for r in 0..3 {
                mc[r][c] = b[r];
            }
            *xc = det(mc) / d;
        }
        Some(x)
    }

    /// Optimum of `γ·g`, minimised for the lower problem, maximised for the upper.
    pub fn optimum(&self, gammas: [f64; 3], upper: bool) -> f64 {
        let n = self.rows.len();
        let scale = self.rows.iter().map(|r| r.1.abs()).fold(1.0, f64::max);
        let mut best: Option<f64> = None;
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let m = [self.rows[i].0, self.rows[j].0, self.rows[k].0];
                    let b = [self.rows[i].1, self.rows[j].1, self.rows[k].1];
                    let Some(g) = Self::solve3(m, b) else { continue };
                    let feasible = self.rows.iter().all(|(a, rhs)| {
                        let lhs: f64 = (0..3).map(|t| a[t] * g[t]).sum();
                        if upper {
                            lhs <= rhs + 1e-12 * scale
                        } else {
                            lhs >= rhs - 1e-12 * scale
                        }
                    });
                    if !feasible {
                        continue;
                    }
                    let v: f64 = (0..3).map(|t| gammas[t] * g[t]).sum();
                    best = Some(match best {
                        None => v,
                        Some(b) if upper => b.max(v),
                        Some(b) => b.min(v),
                    });
                }
            }
        }
        best.expect("pointed polyhedron has a vertex")
    }
}
