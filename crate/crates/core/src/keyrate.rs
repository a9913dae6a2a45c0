//! Finite-size key rate and the total security coefficient.

use serde::{Deserialize, Serialize};

use crate::channel::ObservedCounts;
use crate::error::{Error, Result};
use crate::estimator::{self, DecoyEstimate, FailureBudget, ScanMode, ScanSettings};
use crate::protocol::{ProtocolConfig, Source};

/// `h(x) = -x log2 x - (1-x) log2 (1-x)`.
pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Bits lost to error verification, the chain rules and privacy amplification.
pub fn finite_size_bits(budget: &FailureBudget) -> f64 {
    (8.0 / budget.eps_cor).log2()
        + 2.0 * (2.0 / (budget.eps_prime * budget.eps_hat)).log2()
        + 2.0 * (1.0 / (2.0 * budget.eps_pa)).log2()
}

/// Signal-window counting rate and error rate `(S_zz, E_zz)`.
pub fn signal_stats(counts: &ObservedCounts, cfg: &ProtocolConfig) -> (f64, f64) {
    let s = counts.n_zz / cfg.window_count(Source::Z, Source::Z);
    let e = if counts.n_zz > 0.0 { counts.m_zz / counts.n_zz } else { 0.0 };
    (s, e)
}

/// Key rate per pulse pair before clamping at zero.
pub fn raw_rate(
    s11z: f64,
    e11ph: f64,
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    f_ec: f64,
) -> f64 {
    let (s_zz, e_zz) = signal_stats(counts, cfg);
    let ones = cfg.alice.weight(Source::Z, 1) * cfg.bob.weight(Source::Z, 1) * s11z;
    let brace = ones * (1.0 - binary_entropy(e11ph)) - f_ec * s_zz * binary_entropy(e_zz);
    cfg.alice.p_z * cfg.bob.p_z * brace - finite_size_bits(budget) / cfg.pulses
}

/// Key rate per pulse pair, clamped at zero.
pub fn rate(
    s11z: f64,
    e11ph: f64,
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    f_ec: f64,
) -> f64 {
    if counts.n_zz <= 0.0 {
        log::warn!("n_zz = 0: no key");
        return 0.0;
    }
    raw_rate(s11z, e11ph, counts, cfg, budget, f_ec).max(0.0)
}

/// `ε₁` (single scan) or `ε₁*` (double scan).
///
/// The double scan sums the 14 estimation ξ's. The single scan never bounds
/// `M` from below, so `xi_ml` drops out.
pub fn epsilon_one(budget: &FailureBudget, mode: ScanMode) -> f64 {
    let b = budget;
    let common = b.xi_s1p
        + b.xi_s2p
        + b.xi_s3p
        + b.xi_s1m
        + b.xi_s2m
        + b.xi_h1l
        + b.xi_h2l
        + b.xi_h3l
        + b.xi_h1u
        + b.xi_h2u
        + b.xi_h3u
        + b.xi_mu
        + b.xi_s11;
    match mode {
        ScanMode::Single => common,
        ScanMode::Double => common + b.xi_ml,
    }
}

/// Everything in the total security coefficient except `ε_PA`.
fn epsilon_fixed(budget: &FailureBudget, mode: ScanMode) -> f64 {
    let eps_e = budget.xi_e11;
    budget.eps_cor
        + 2.0 * (budget.eps_prime + budget.eps_hat + 2.0 * (eps_e + epsilon_one(budget, mode)).sqrt())
}

/// `ε_cor + 2(ε' + ε̂ + 2√(ε_e + ε₁)) + ε_PA`.
pub fn epsilon_total(budget: &FailureBudget, mode: ScanMode) -> Result<f64> {
    let total = epsilon_fixed(budget, mode) + budget.eps_pa;
    if !(total < 1.0) {
        return Err(Error::Budget(format!("total security coefficient {total} >= 1")));
    }
    Ok(total)
}

/// `ε_PA` such that the total hits `target`. Ignores the budget's own `eps_pa`.
pub fn solve_eps_pa(budget: &FailureBudget, target: f64, mode: ScanMode) -> Result<f64> {
    let fixed = epsilon_fixed(budget, mode);
    let eps_pa = target - fixed;
    if !(eps_pa > 0.0 && target < 1.0) {
        return Err(Error::Budget(format!(
            "other terms sum to {fixed:e}, leaving nothing of target {target:e}"
        )));
    }
    Ok(eps_pa)
}

/// Budget with `ε_PA` replaced by the value that meets `target`.
pub fn with_derived_eps_pa(budget: &FailureBudget, target: f64, mode: ScanMode) -> Result<FailureBudget> {
    Ok(FailureBudget { eps_pa: solve_eps_pa(budget, target, mode)?, ..*budget })
}

/// Even split of `target` over the five additive terms of the total:
/// `ε_cor = 2ε' = 2ε̂ = 4√(ε_e + ε₁) = ε_PA = target/5`, all ξ's equal.
pub fn uniform_budget(target: f64, mode: ScanMode) -> Result<FailureBudget> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidFailureProb(target));
    }
    let share = target / 5.0;
    let terms = match mode {
        ScanMode::Single => 14.0,
        ScanMode::Double => 15.0,
    };
    let xi = (share / 4.0).powi(2) / terms;
    let base = FailureBudget::with_xis(xi, share, share / 2.0, share / 2.0, share);
    with_derived_eps_pa(&base, target, mode)
}

/// Key rate with the estimates and budget that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub mode: ScanMode,
    pub rate_per_pulse: f64,
    pub no_key: bool,
    pub s11z_lower: f64,
    pub e11ph_upper: f64,
    pub worst_h: f64,
    pub worst_m: f64,
    pub margin: f64,
    pub eps_total: f64,
    pub s_zz: f64,
    pub e_zz: f64,
    pub budget: FailureBudget,
    pub estimate: DecoyEstimate,
}

/// Runs the scan for `mode` and packages the result.
pub fn evaluate(
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    mode: ScanMode,
    scan: &ScanSettings,
    f_ec: f64,
) -> Result<KeyRateReport> {
    let eps_total = epsilon_total(budget, mode)?;
    let est = estimator::scan(mode, counts, cfg, budget, scan, f_ec)?;
    let (s_zz, e_zz) = signal_stats(counts, cfg);
    let rate = if counts.n_zz > 0.0 { est.scanned_rate } else { 0.0 };
    Ok(KeyRateReport {
        mode,
        rate_per_pulse: rate,
        no_key: rate <= 0.0,
        s11z_lower: est.s11z_lower,
        e11ph_upper: est.e11ph_upper,
        worst_h: est.worst_h,
        worst_m: est.worst_m,
        margin: est.margin,
        eps_total,
        s_zz,
        e_zz,
        budget: *budget,
        estimate: est,
    })
}
