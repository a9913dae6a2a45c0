//! Distance sweeps, paired comparisons and the CSV tables they produce.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{simulate_expected_counts, ChannelParams, ObservedCounts};
use crate::error::{Error, Result};
use crate::estimator::{FailureBudget, ScanMode, ScanSettings};
use crate::keyrate::{self, KeyRateReport};
use crate::optimizer::{self, ModeFlags, OptimizerSettings, ParamScope, ParamVector, Problem};
use crate::protocol::{ProtocolConfig, SourceSide};

/// One protocol/analysis variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub scan: ScanMode,
    pub scope: ParamScope,
    #[serde(default)]
    pub three_intensity: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        let scope = match self.scope {
            ParamScope::Spo => "spo",
            ParamScope::Apo => "apo",
        };
        let n = if self.three_intensity { 3 } else { 4 };
        format!("{}-{}-{}", self.scan.label(), scope, n)
    }
}

/// Total distances `start, start + step, ..., <= stop`, split as
/// `L_A - L_B = offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub start_km: f64,
    pub stop_km: f64,
    #[serde(default = "default_step")]
    pub step_km: f64,
    #[serde(default)]
    pub offset_km: f64,
}

fn default_step() -> f64 {
    1.0
}

impl Sweep {
    pub fn single(total_km: f64) -> Self {
        Self { start_km: total_km, stop_km: total_km, step_km: 1.0, offset_km: 0.0 }
    }

    /// `(L, L_A, L_B)` per point.
    pub fn points(&self) -> Result<Vec<(f64, f64, f64)>> {
        if !(self.step_km > 0.0) || !(self.start_km <= self.stop_km) {
            return Err(Error::domain("sweep", "need step_km > 0 and start_km <= stop_km"));
        }
        let n = ((self.stop_km - self.start_km) / self.step_km + 1e-9).floor() as usize + 1;
        let pts: Vec<_> = (0..n)
            .map(|i| {
                let l = self.start_km + i as f64 * self.step_km;
                (l, (l + self.offset_km) / 2.0, (l - self.offset_km) / 2.0)
            })
            .collect();
        if let Some(&(l, _, lb)) = pts.iter().find(|p| p.2 < 0.0 || p.1 < 0.0) {
            return Err(Error::domain("sweep.offset_km", format!("offset leaves L_B = {lb} km at L = {l} km")));
        }
        Ok(pts)
    }
}

/// Everything a sweep or comparison needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub channel: ChannelParams,
    pub sweep: Sweep,
    pub variant: Variant,
    /// Second variant for [`run_compare`]; its rate is the numerator.
    #[serde(default)]
    pub compare: Option<Variant>,
    #[serde(default)]
    pub scan: ScanSettings,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_eps")]
    pub eps_total: f64,
    #[serde(default = "default_pulses")]
    pub pulses: f64,
    /// Symmetric source parameters; defaults to `offset_km == 0`.
    #[serde(default)]
    pub symmetric: Option<bool>,
    /// Fixed source settings for simulation and estimation.
    #[serde(default)]
    pub sources: Option<Sources>,
    /// Fixed failure budget for estimation; uniform split of `eps_total` if absent.
    #[serde(default)]
    pub budget: Option<FailureBudget>,
}

/// Source settings of both parties; Bob mirrors Alice when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sources {
    pub alice: SourceSide,
    #[serde(default)]
    pub bob: Option<SourceSide>,
}

impl Sources {
    pub fn config(&self, pulses: f64) -> Result<ProtocolConfig> {
        ProtocolConfig::new(self.alice, self.bob.unwrap_or(self.alice), pulses)
    }
}

fn default_eps() -> f64 {
    1e-10
}

fn default_pulses() -> f64 {
    1e10
}

impl ExperimentSpec {
    pub fn new(sweep: Sweep, variant: Variant) -> Self {
        Self {
            channel: ChannelParams::default(),
            sweep,
            variant,
            compare: None,
            scan: ScanSettings::default(),
            optimizer: OptimizerSettings::default(),
            eps_total: default_eps(),
            pulses: default_pulses(),
            symmetric: None,
            sources: None,
            budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sweep.points()?;
        self.channel.validate()?;
        self.scan.validate()?;
        self.optimizer.validate()?;
        if !(self.eps_total > 0.0 && self.eps_total < 1.0) {
            return Err(Error::InvalidFailureProb(self.eps_total));
        }
        if !(self.pulses > 0.0) {
            return Err(Error::domain("pulses", "must be positive"));
        }
        if self.symmetric == Some(true) && self.sweep.offset_km != 0.0 {
            return Err(Error::domain("symmetric", "symmetric sources need offset_km = 0"));
        }
        Ok(())
    }

    /// The fixed budget, or the uniform split for `mode`, with `eps_pa` derived.
    pub fn resolved_budget(&self, mode: ScanMode) -> Result<FailureBudget> {
        match &self.budget {
            Some(b) => {
                b.validate()?;
                keyrate::with_derived_eps_pa(b, self.eps_total, mode)
            }
            None => keyrate::uniform_budget(self.eps_total, mode),
        }
    }

    /// Expected counts at every sweep point for the fixed sources.
    pub fn simulate(&self) -> Result<Vec<((f64, f64, f64), ObservedCounts)>> {
        self.validate()?;
        let sources = self.sources.ok_or_else(|| Error::domain("sources", "simulation needs [sources.alice]"))?;
        let cfg = sources.config(self.pulses)?;
        Ok(self
            .sweep
            .points()?
            .into_iter()
            .map(|p| (p, simulate_expected_counts(&cfg, &self.channel.with_lengths(p.1, p.2))))
            .collect())
    }

    fn symmetric(&self) -> bool {
        self.symmetric.unwrap_or(self.sweep.offset_km == 0.0)
    }

    pub fn problem(&self, variant: Variant, l_a: f64, l_b: f64) -> Problem {
        let flags = ModeFlags {
            scope: variant.scope,
            symmetric: self.symmetric(),
            three_intensity: variant.three_intensity,
        };
        Problem::new(self.channel.with_lengths(l_a, l_b), self.pulses, variant.scan, self.eps_total, flags)
    }
}

/// One row of a curve table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub l_km: f64,
    pub l_a_km: f64,
    pub l_b_km: f64,
    pub variant: Variant,
    /// `None` when no start with positive key was found.
    pub optimum: Option<RowResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub params: ParamVector,
    pub counts: ObservedCounts,
    pub report: KeyRateReport,
}

impl CurveRow {
    pub fn rate(&self) -> f64 {
        self.optimum.map_or(0.0, |o| o.report.rate_per_pulse)
    }

    pub fn status(&self) -> &'static str {
        match &self.optimum {
            None => "no_start",
            Some(o) if o.report.no_key => "no_key",
            Some(_) => "ok",
        }
    }
}

/// Optimises one variant at one split.
pub fn run_point(spec: &ExperimentSpec, variant: Variant, l_a: f64, l_b: f64) -> Result<CurveRow> {
    let problem = spec.problem(variant, l_a, l_b);
    let optimum = match optimizer::optimize(&problem, &spec.scan, &spec.optimizer) {
        Ok(o) => {
            let cfg = ProtocolConfig::new(o.params.alice, o.params.bob, spec.pulses)?;
            let counts = simulate_expected_counts(&cfg, &problem.channel);
            Some(RowResult { params: o.params, counts, report: o.report })
        }
        Err(Error::NoKey(reason)) => {
            log::info!("L_A = {l_a} km, L_B = {l_b} km, {}: {reason}", variant.label());
            None
        }
        Err(e) => return Err(e),
    };
    Ok(CurveRow { l_km: l_a + l_b, l_a_km: l_a, l_b_km: l_b, variant, optimum })
}

fn sweep_variant(spec: &ExperimentSpec, variant: Variant) -> Result<Vec<CurveRow>> {
    spec.validate()?;
    let points = spec.sweep.points()?;
    points
        .par_iter()
        .map(|&(_, la, lb)| {
            let t = std::time::Instant::now();
            let row = run_point(spec, variant, la, lb);
            log::info!("{} at {} km done in {:.1?}", variant.label(), la + lb, t.elapsed());
            row
        })
        .collect()
}

/// One optimised row per distance, ordered by distance.
pub fn run_curve(spec: &ExperimentSpec) -> Result<Vec<CurveRow>> {
    sweep_variant(spec, spec.variant)
}

/// Paired rows of the base variant and `spec.compare`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub base: CurveRow,
    pub other: CurveRow,
}

impl CompareRow {
    /// `other / base`; NaN when the base has no key.
    pub fn ratio(&self) -> f64 {
        let b = self.base.rate();
        if b > 0.0 {
            self.other.rate() / b
        } else {
            f64::NAN
        }
    }
}

pub fn run_compare(spec: &ExperimentSpec) -> Result<Vec<CompareRow>> {
    let other = spec
        .compare
        .ok_or_else(|| Error::domain("compare", "comparison needs a second variant"))?;
    let base = sweep_variant(spec, spec.variant)?;
    let other = if other == spec.variant { base.clone() } else { sweep_variant(spec, other)? };
    Ok(base.into_iter().zip(other).map(|(base, other)| CompareRow { base, other }).collect())
}

/// Key rate of externally supplied counts; the channel model is not used.
pub fn run_estimate(
    counts: &ObservedCounts,
    cfg: &ProtocolConfig,
    budget: &FailureBudget,
    mode: ScanMode,
    scan: &ScanSettings,
    f_ec: f64,
) -> Result<KeyRateReport> {
    counts.validate()?;
    cfg.validate()?;
    keyrate::evaluate(counts, cfg, budget, mode, scan, f_ec)
}

/// 17 significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Columns of [`curve_csv`], in order.
pub fn curve_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "L_km", "L_A_km", "L_B_km", "mode", "status", "rate", "s11z_L", "e11ph_U", "H_star", "M_star",
        "margin", "eps_total", "S_zz", "E_zz",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for side in ["A", "B"] {
        for p in ["mu_x", "mu_y", "mu_z", "p_x", "p_y", "p_z"] {
            cols.push(format!("{p}{side}"));
        }
    }
    cols.extend(FailureBudget::XI_NAMES.iter().map(|s| s.to_string()));
    cols.extend(["eps_cor", "eps_prime", "eps_hat", "eps_pa"].iter().map(|s| s.to_string()));
    cols.extend(ObservedCounts::FIELDS.iter().map(|s| s.to_string()));
    cols
}

fn curve_line(row: &CurveRow) -> String {
    let mut f: Vec<String> = vec![
        fmt_f64(row.l_km),
        fmt_f64(row.l_a_km),
        fmt_f64(row.l_b_km),
        row.variant.label(),
        row.status().to_string(),
    ];
    match &row.optimum {
        Some(o) => {
            let r = &o.report;
            f.extend(
                [r.rate_per_pulse, r.s11z_lower, r.e11ph_upper, r.worst_h, r.worst_m, r.margin, r.eps_total, r.s_zz, r.e_zz]
                    .map(fmt_f64),
            );
            for s in [o.params.alice, o.params.bob] {
                f.extend([s.mu_x, s.mu_y, s.mu_z, s.p_x, s.p_y, s.p_z].map(fmt_f64));
            }
            f.extend(r.budget.xis().map(fmt_f64));
            f.extend(r.budget.epsilons().map(fmt_f64));
            f.extend(o.counts.values().map(fmt_f64));
        }
        None => {
            f.push(fmt_f64(0.0));
            let blanks = curve_columns().len() - f.len();
            f.extend(std::iter::repeat(String::new()).take(blanks));
        }
    }
    f.join(",")
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = curve_columns().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&curve_line(r));
        out.push('\n');
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("L_km,L_A_km,L_B_km,base_mode,base_rate,other_mode,other_rate,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(r.base.l_km),
            fmt_f64(r.base.l_a_km),
            fmt_f64(r.base.l_b_km),
            r.base.variant.label(),
            fmt_f64(r.base.rate()),
            r.other.variant.label(),
            fmt_f64(r.other.rate()),
            fmt_f64(r.ratio()),
        );
    }
    out
}
