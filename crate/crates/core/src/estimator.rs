//! Decoy-state estimation of the single-photon-pair yield and phase error.
//!
//! Both pipelines share the joint-constraint bounds on the decoy sums and then
//! take the worst case of the key rate over the unknown vacuum combination `H`
//! (single scan) or over `H` and the expected wrong-event count `M` of source
//! `xx` together (double scan).

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{self, FailureProb};
use crate::channel::ObservedCounts;
use crate::error::{Error, Result};
use crate::jointlp::{joint_lower, joint_upper, JointInstance};
use crate::keyrate;
use crate::protocol::{Branch, ProtocolConfig, Source};

/// Which worst-case scan feeds the key rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// Worst case over `H` only, with `<m_xx>` fixed at its upper bound.
    Single,
    /// Worst case over `(H, M)`.
    Double,
}

impl ScanMode {
    pub fn label(self) -> &'static str {
        match self {
            ScanMode::Single => "single",
            ScanMode::Double => "double",
        }
    }
}

impl std::str::FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ScanMode::Single),
            "double" => Ok(ScanMode::Double),
            other => Err(Error::domain("mode", format!("unknown scan mode `{other}`"))),
        }
    }
}

/// Every failure probability of the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureBudget {
    pub xi_s1p: f64,
    pub xi_s2p: f64,
    pub xi_s3p: f64,
    pub xi_s1m: f64,
    pub xi_s2m: f64,
    pub xi_h1l: f64,
    pub xi_h2l: f64,
    pub xi_h3l: f64,
    pub xi_h1u: f64,
    pub xi_h2u: f64,
    pub xi_h3u: f64,
    pub xi_ml: f64,
    pub xi_mu: f64,
    pub xi_s11: f64,
    pub xi_e11: f64,
    pub eps_cor: f64,
    pub eps_prime: f64,
    pub eps_hat: f64,
    pub eps_pa: f64,
}

impl FailureBudget {
    pub const XI_NAMES: [&'static str; 15] = [
        "xi_s1p", "xi_s2p", "xi_s3p", "xi_s1m", "xi_s2m", "xi_h1l", "xi_h2l", "xi_h3l", "xi_h1u",
        "xi_h2u", "xi_h3u", "xi_ml", "xi_mu", "xi_s11", "xi_e11",
    ];

    /// All ξ's equal to `xi`, the remaining coefficients as given.
    pub fn with_xis(xi: f64, eps_cor: f64, eps_prime: f64, eps_hat: f64, eps_pa: f64) -> Self {
        Self::from_parts([xi; 15], [eps_cor, eps_prime, eps_hat, eps_pa])
    }

    pub fn xis(&self) -> [f64; 15] {
        [
            self.xi_s1p, self.xi_s2p, self.xi_s3p, self.xi_s1m, self.xi_s2m, self.xi_h1l,
            self.xi_h2l, self.xi_h3l, self.xi_h1u, self.xi_h2u, self.xi_h3u, self.xi_ml,
            self.xi_mu, self.xi_s11, self.xi_e11,
        ]
    }

    /// `[eps_cor, eps_prime, eps_hat, eps_pa]`.
    pub fn epsilons(&self) -> [f64; 4] {
        [self.eps_cor, self.eps_prime, self.eps_hat, self.eps_pa]
    }

    pub fn from_parts(x: [f64; 15], e: [f64; 4]) -> Self {
        Self {
            xi_s1p: x[0],
            xi_s2p: x[1],
            xi_s3p: x[2],
            xi_s1m: x[3],
            xi_s2m: x[4],
            xi_h1l: x[5],
            xi_h2l: x[6],
            xi_h3l: x[7],
            xi_h1u: x[8],
            xi_h2u: x[9],
            xi_h3u: x[10],
            xi_ml: x[11],
            xi_mu: x[12],
            xi_s11: x[13],
            xi_e11: x[14],
            eps_cor: e[0],
            eps_prime: e[1],
            eps_hat: e[2],
            eps_pa: e[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.xis().into_iter().chain(self.epsilons()) {
            FailureProb::new(v)?;
        }
        Ok(())
    }
}

/// Grid resolution of the worst-case scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSettings {
    pub grid_h: usize,
    pub grid_m: usize,
    pub refine_rounds: usize,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self { grid_h: 101, grid_m: 101, refine_rounds: 2 }
    }
}

impl ScanSettings {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 2 || self.grid_m < 2 {
            return Err(Error::domain("scan", "grid sizes must be at least 2"));
        }
        Ok(())
    }
}

/// Result of one scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyEstimate {
    pub mode: ScanMode,
    pub s11z_lower: f64,
    pub e11ph_upper: f64,
    pub s11x_lower: f64,
    pub e11bit_upper: f64,
    pub worst_h: f64,
    pub worst_m: f64,
    pub h_bounds: (f64, f64),
    pub m_bounds: (f64, f64),
    /// Scan minimum minus the continuity margin, clamped at zero.
    pub scanned_rate: f64,
    /// Unclamped key rate at the worst grid point.
    pub raw_rate: f64,
    /// Largest rise from the minimum to a neighbouring node in the last round.
    pub margin: f64,
}

/// Coefficients of the single-photon yield formula for one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YieldCoefficients {
    pub xx: f64,
    pub oy: f64,
    pub yo: f64,
    pub yy: f64,
    pub oo: f64,
    /// Multiplier of `H` in the numerator.
    pub h: f64,
    pub denominator: f64,
}

impl YieldCoefficients {
    pub fn new(cfg: &ProtocolConfig) -> Self {
        let (a, b) = (&cfg.alice, &cfg.bob);
        let a0y = a.weight(Source::Y, 0);
        let b0y = b.weight(Source::Y, 0);
        let (lead, side) = match cfg.branch() {
            Branch::BobRatioSmaller => (
                a.weight(Source::Y, 1) * b.weight(Source::Y, 2),
                a.weight(Source::X, 1) * b.weight(Source::X, 2),
            ),
            Branch::AliceRatioSmaller => (
                a.weight(Source::Y, 2) * b.weight(Source::Y, 1),
                a.weight(Source::X, 2) * b.weight(Source::X, 1),
            ),
        };
        let denominator = match cfg.branch() {
            Branch::BobRatioSmaller => {
                a.weight(Source::X, 1)
                    * a.weight(Source::Y, 1)
                    * (b.weight(Source::X, 1) * b.weight(Source::Y, 2)
                        - b.weight(Source::X, 2) * b.weight(Source::Y, 1))
            }
            Branch::AliceRatioSmaller => {
                b.weight(Source::X, 1)
                    * b.weight(Source::Y, 1)
                    * (a.weight(Source::X, 1) * a.weight(Source::Y, 2)
                        - a.weight(Source::X, 2) * a.weight(Source::Y, 1))
            }
        };
        Self {
            xx: lead / cfg.window_count(Source::X, Source::X),
            oy: side * a0y / cfg.window_count(Source::O, Source::Y),
            yo: side * b0y / cfg.window_count(Source::Y, Source::O),
            yy: side / cfg.window_count(Source::Y, Source::Y),
            oo: side * a0y * b0y / cfg.window_count(Source::O, Source::O),
            h: lead,
            denominator,
        }
    }
}

/// Lower bound of `<S+>` (double scan: right events of `xx`; single scan: all of them).
fn s_plus_lower_with(xx_count: f64, counts: &ObservedCounts, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<f64> {
    let c = YieldCoefficients::new(cfg);
    let inst = JointInstance::new(
        [c.xx, c.oy, c.yo],
        [xx_count, counts.n_oy, counts.n_yo],
        [budget.xi_s1p, budget.xi_s2p, budget.xi_s3p],
    )?;
    Ok(joint_lower(&inst))
}

/// `<S+>*^L`, built from the right events `n_xx - m_xx`.
pub fn s_plus_star_lower(counts: &ObservedCounts, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<f64> {
    let right = counts.right_xx();
    if right < 0.0 {
        return Err(Error::InvalidCounts(vec![format!(
            "m_xx = {} exceeds n_xx = {}",
            counts.m_xx, counts.n_xx
        )]));
    }
    s_plus_lower_with(right, counts, cfg, budget)
}

/// `<S+>^L` of the single-scan pipeline, built from `n_xx`.
pub fn s_plus_lower(counts: &ObservedCounts, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<f64> {
    s_plus_lower_with(counts.n_xx, counts, cfg, budget)
}

pub fn s_minus_upper(counts: &ObservedCounts, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<f64> {
    let c = YieldCoefficients::new(cfg);
    let inst = JointInstance::new(
        [c.yy, c.oo, 0.0],
        [counts.n_yy, counts.n_oo, 0.0],
        [budget.xi_s1m, budget.xi_s2m, 0.0],
    )?;
    Ok(joint_upper(&inst))
}

/// `(H_L, H_U)`, with `H_L` clamped at zero.
pub fn h_bounds(counts: &ObservedCounts, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<(f64, f64)> {
    let a0x = cfg.alice.weight(Source::X, 0);
    let b0x = cfg.bob.weight(Source::X, 0);
    let gammas = [
        a0x / cfg.window_count(Source::O, Source::X),
        b0x / cfg.window_count(Source::X, Source::O),
        0.0,
    ];
    let gs = [counts.n_ox, counts.n_xo, 0.0];
    let oo = a0x * b0x / cfg.window_count(Source::O, Source::O);
    let lower = JointInstance::new(gammas, gs, [budget.xi_h1l, budget.xi_h2l, 0.0])?;
    let upper = JointInstance::new(gammas, gs, [budget.xi_h1u, budget.xi_h2u, 0.0])?;
    let h_l = joint_lower(&lower) - oo * bounds::expected_upper(counts.n_oo, FailureProb::new(budget.xi_h3l)?);
    let h_u = joint_upper(&upper) - oo * bounds::expected_lower(counts.n_oo, FailureProb::new(budget.xi_h3u)?);
    Ok((h_l.max(0.0), h_u))
}

/// `(M_L, M_U)` for the expected wrong-event count of source `xx`.
pub fn m_bounds(counts: &ObservedCounts, budget: &FailureBudget) -> Result<(f64, f64)> {
    Ok((
        bounds::expected_lower(counts.m_xx, FailureProb::new(budget.xi_ml)?),
        bounds::expected_upper(counts.m_xx, FailureProb::new(budget.xi_mu)?),
    ))
}

/// Lower bound of `<S+>` and upper bound of `<S->` entering the yield.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YieldParts {
    pub s_plus_lower: f64,
    pub s_minus_upper: f64,
}

/// Lower bound of the X-basis single-photon-pair yield for a given `(H, M)`.
///
/// The single-scan pipeline passes `M = 0` since its `<S+>` already counts all
/// events of source `xx`.
pub fn s11x_lower(h: f64, m: f64, parts: YieldParts, cfg: &ProtocolConfig) -> Result<f64> {
    let c = YieldCoefficients::new(cfg);
    s11x_with(h, m, parts, &c)
}

fn s11x_with(h: f64, m: f64, parts: YieldParts, c: &YieldCoefficients) -> Result<f64> {
    if !(c.denominator > 0.0) {
        return Err(Error::Degenerate(format!(
            "yield denominator {} vanishes (mu_x = mu_y on one side)",
            c.denominator
        )));
    }
    let num = parts.s_plus_lower + c.xx * m - parts.s_minus_upper - c.h * h;
    Ok((num / c.denominator).clamp(0.0, 1.0))
}

/// Upper bound of the X-basis single-photon bit error rate.
pub fn e11bit_upper(h: f64, m: f64, s11x: f64, cfg: &ProtocolConfig) -> Result<f64> {
    if !(s11x > 0.0) {
        return Err(Error::Degenerate("single-photon yield lower bound is zero".into()));
    }
    let a1x = cfg.alice.weight(Source::X, 1);
    let b1x = cfg.bob.weight(Source::X, 1);
    Ok(e11bit_with(h, m, s11x, a1x * b1x, cfg.window_count(Source::X, Source::X)))
}

fn e11bit_with(h: f64, m: f64, s11x: f64, a1b1: f64, n_xx: f64) -> f64 {
    let num = m / n_xx - h / 2.0;
    if num <= 0.0 {
        return 0.0;
    }
    (num / (a1b1 * s11x)).min(0.5)
}

fn z_single_pairs(cfg: &ProtocolConfig) -> f64 {
    cfg.window_count(Source::Z, Source::Z) * cfg.alice.weight(Source::Z, 1) * cfg.bob.weight(Source::Z, 1)
}

/// Z-basis yield from the X-basis one via the observed-value Chernoff bound.
pub fn s11z_lower(s11x: f64, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<f64> {
    let xi = FailureProb::new(budget.xi_s11)?;
    Ok(s11z_with(s11x, z_single_pairs(cfg), xi))
}

fn s11z_with(s11x: f64, pairs: f64, xi: FailureProb) -> f64 {
    if s11x <= 0.0 || pairs <= 0.0 {
        return 0.0;
    }
    (bounds::observed_lower(pairs * s11x, xi) / pairs).clamp(0.0, 1.0)
}

/// Phase error of the Z-basis single-photon pairs.
pub fn e11ph_upper(s11z: f64, e11bit: f64, cfg: &ProtocolConfig, budget: &FailureBudget) -> Result<f64> {
    let xi = FailureProb::new(budget.xi_e11)?;
    Ok(e11ph_with(s11z, e11bit, z_single_pairs(cfg), xi))
}

fn e11ph_with(s11z: f64, e11bit: f64, pairs: f64, xi: FailureProb) -> f64 {
    let ones = pairs * s11z;
    if ones <= 0.0 {
        return 0.5;
    }
    (bounds::observed_upper(ones * e11bit, xi) / ones).min(0.5)
}

/// Everything the per-point evaluation needs, precomputed once per scan.
struct PointModel<'a> {
    coef: YieldCoefficients,
    parts: YieldParts,
    a1b1x: f64,
    n_xx: f64,
    pairs: f64,
    xi_s11: FailureProb,
    xi_e11: FailureProb,
    counts: &'a ObservedCounts,
    cfg: &'a ProtocolConfig,
    budget: &'a FailureBudget,
    f_ec: f64,
}

#[derive(Debug, Clone, Copy)]
struct Point {
    h: f64,
    m: f64,
    s11x: f64,
    e11bit: f64,
    s11z: f64,
    e11ph: f64,
    rate: f64,
}

impl<'a> PointModel<'a> {
    /// `m_in_yield` is the `M` added to `<S+>`; `m_in_error` enters the bit error.
    fn eval(&self, h: f64, m_in_yield: f64, m_in_error: f64) -> Point {
        let s11x = s11x_with(h, m_in_yield, self.parts, &self.coef).unwrap_or(0.0);
        let (e11bit, s11z, e11ph) = if s11x > 0.0 {
            let e11bit = e11bit_with(h, m_in_error, s11x, self.a1b1x, self.n_xx);
            let s11z = s11z_with(s11x, self.pairs, self.xi_s11);
            (e11bit, s11z, e11ph_with(s11z, e11bit, self.pairs, self.xi_e11))
        } else {
            (0.5, 0.0, 0.5)
        };
        let rate = keyrate::raw_rate(s11z, e11ph, self.counts, self.cfg, self.budget, self.f_ec);
        Point { h, m: m_in_error, s11x, e11bit, s11z, e11ph, rate }
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Lexicographic order on (rate, H, M) for deterministic tie-breaking.
fn better(a: &Point, b: &Point) -> bool {
    (a.rate, a.h, a.m) < (b.rate, b.h, b.m)
}

/// Evaluates the grid and returns all points in row-major (H, M) order.
fn eval_grid(hs: &[f64], ms: &[f64], f: &(dyn Fn(f64, f64) -> Point + Sync)) -> Vec<Point> {
    let cells: Vec<(f64, f64)> = hs.iter().flat_map(|&h| ms.iter().map(move |&m| (h, m))).collect();
    if cells.len() >= 512 {
        cells.par_iter().map(|&(h, m)| f(h, m)).collect()
    } else {
        cells.iter().map(|&(h, m)| f(h, m)).collect()
    }
}

/// Grid scan with zoom refinement. Returns the worst point and the margin of
/// the last round.
fn scan_2d(
    h_range: (f64, f64),
    m_range: (f64, f64),
    grid: (usize, usize),
    rounds: usize,
    f: &(dyn Fn(f64, f64) -> Point + Sync),
) -> (Point, f64) {
    let (mut h_lo, mut h_hi) = h_range;
    let (mut m_lo, mut m_hi) = m_range;
    let mut best: Option<Point> = None;
    let mut margin = 0.0;
    for round in 0..=rounds {
        let hs = axis(h_lo, h_hi, grid.0);
        let ms = axis(m_lo, m_hi, grid.1);
        let pts = eval_grid(&hs, &ms, f);
        let mut idx = 0;
        for (k, p) in pts.iter().enumerate() {
            if better(p, &pts[idx]) {
                idx = k;
            }
        }
        let (i, j) = (idx / ms.len(), idx % ms.len());
        let here = pts[idx];
        margin = 0.0f64;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if (di, dj) == (0, 0) || ni < 0 || nj < 0 || ni >= hs.len() as i64 || nj >= ms.len() as i64 {
                    continue;
                }
                let nb = pts[ni as usize * ms.len() + nj as usize];
                margin = margin.max(nb.rate - here.rate);
            }
        }
        best = match best {
            Some(b) if !better(&here, &b) => Some(b),
            _ => Some(here),
        };
        if round == rounds {
            break;
        }
        // 5x zoom around the incumbent, kept inside the original rectangle
        let zoom = |lo: f64, hi: f64, c: f64, full: (f64, f64)| {
            let half = (hi - lo) / 10.0;
            ((c - half).max(full.0), (c + half).min(full.1))
        };
        (h_lo, h_hi) = zoom(h_lo, h_hi, here.h, h_range);
        (m_lo, m_hi) = zoom(m_lo, m_hi, here.m, m_range);
    }
    (best.expect("at least one round"), margin)
}

fn validate_inputs(counts: &ObservedCounts, cfg: &ProtocolConfig, budget: &FailureBudget, scan: &ScanSettings) -> Result<()> {
    counts.validate()?;
    cfg.validate()?;
    budget.validate()?;
    scan.validate()
}

fn finish(mode: ScanMode, worst: Point, margin: f64, h: (f64, f64), m: (f64, f64)) -> DecoyEstimate {
    DecoyEstimate {
        mode,
        s11z_lower: worst.s11z,
        e11ph_upper: worst.e11ph,
        s11x_lower: worst.s11x,
        e11bit_upper: worst.e11bit,
        worst_h: worst.h,
        worst_m: worst.m,
        h_bounds: h,
        m_bounds: m,
        scanned_rate: (worst.rate - margin).max(0.0),
        raw_rate: worst.rate,
        margin,
    }
}

fn point_model<'a>(
    parts: YieldParts,
    counts: &'a ObservedCounts,
    cfg: &'a ProtocolConfig,
    budget: &'a FailureBudget,
    f_ec: f64,
) -> Result<PointModel<'a>> {
    if counts.n_zz <= 0.0 {
        warn!("no effective events in signal windows; key rate is zero");
    }
    Ok(PointModel {
        coef: YieldCoefficients::new(cfg),
        parts,
        a1b1x: cfg.alice.weight(Source::X, 1) * cfg.bob.weight(Source::X, 1),
        n_xx: cfg.window_count(Source::X, Source::X),
        pairs: z_single_pairs(cfg),
        xi_s11: FailureProb::new(budget.xi_s11)?,
        xi_e11: FailureProb::new(budget.xi_e11)?,
        counts,
        cfg,
        budget,
        f_ec,
    })
}

fn check_denominator(cfg: &ProtocolConfig) -> Result<()> {
    let c = YieldCoefficients::new(cfg);
    if c.denominator > 0.0 {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("yield denominator {} vanishes", c.denominator)))
    }
}

/// Worst case over `H` with `<m_xx>^U` fixed.
pub fn single_scan(
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    scan: &ScanSettings,
    f_ec: f64,
) -> Result<DecoyEstimate> {
    validate_inputs(counts, cfg, budget, scan)?;
    check_denominator(cfg)?;
    let parts = YieldParts {
        s_plus_lower: s_plus_lower(counts, cfg, budget)?,
        s_minus_upper: s_minus_upper(counts, cfg, budget)?,
    };
    let (h_l, h_u) = h_bounds(counts, cfg, budget)?;
    if h_l > h_u {
        return Err(Error::EmptyScan(format!("H bounds crossed: {h_l} > {h_u}")));
    }
    let m_u = bounds::expected_upper(counts.m_xx, FailureProb::new(budget.xi_mu)?);
    let model = point_model(parts, counts, cfg, budget, f_ec)?;
    let f = |h: f64, _m: f64| model.eval(h, 0.0, m_u);
    let (worst, margin) = scan_2d((h_l, h_u), (m_u, m_u), (scan.grid_h, 2), scan.refine_rounds, &f);
    Ok(finish(ScanMode::Single, worst, margin, (h_l, h_u), (m_u, m_u)))
}

/// Worst case over the rectangle `[H_L, H_U] x [M_L, M_U]`.
pub fn double_scan(
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    scan: &ScanSettings,
    f_ec: f64,
) -> Result<DecoyEstimate> {
    validate_inputs(counts, cfg, budget, scan)?;
    check_denominator(cfg)?;
    let parts = YieldParts {
        s_plus_lower: s_plus_star_lower(counts, cfg, budget)?,
        s_minus_upper: s_minus_upper(counts, cfg, budget)?,
    };
    let h = h_bounds(counts, cfg, budget)?;
    let m = m_bounds(counts, budget)?;
    if h.0 > h.1 {
        return Err(Error::EmptyScan(format!("H bounds crossed: {} > {}", h.0, h.1)));
    }
    if m.0 > m.1 {
        return Err(Error::EmptyScan(format!("M bounds crossed: {} > {}", m.0, m.1)));
    }
    let model = point_model(parts, counts, cfg, budget, f_ec)?;
    let f = |hv: f64, mv: f64| model.eval(hv, mv, mv);
    let (worst, margin) = scan_2d(h, m, (scan.grid_h, scan.grid_m), scan.refine_rounds, &f);
    Ok(finish(ScanMode::Double, worst, margin, h, m))
}

pub fn scan(
    mode: ScanMode,
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    settings: &ScanSettings,
    f_ec: f64,
) -> Result<DecoyEstimate> {
    match mode {
        ScanMode::Single => single_scan(counts, cfg, budget, settings, f_ec),
        ScanMode::Double => double_scan(counts, cfg, budget, settings, f_ec),
    }
}
