//! Random-direction search over source and failure-budget parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{simulate_expected_counts, ChannelParams};
use crate::error::{Error, Result};
use crate::estimator::{FailureBudget, ScanMode, ScanSettings};
use crate::keyrate::{self, KeyRateReport};
use crate::protocol::{ProtocolConfig, SourceSide};

/// Search constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub d_step: f64,
    pub d_min: f64,
    pub c_max: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { d_step: 0.1, d_min: 1e-5, c_max: 300, seed: 1, restarts: 4 }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_step) {
            return Err(Error::domain("optimizer", "need 0 < d_min < d_step"));
        }
        if self.c_max < 1 || self.restarts < 1 {
            return Err(Error::domain("optimizer", "c_max and restarts must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of one search trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub accepted: usize,
}

/// Maximises `objective` from `start` by random-direction steps.
///
/// Each proposal moves `d_step` along a normalised Gaussian direction, with
/// coordinate `i` stretched by `scales[i]`, and is passed through `clip`
/// before evaluation. After `c_max` consecutive failures the step shrinks
/// five-fold; the search stops once it falls below `d_min`.
pub fn random_direction_search(
    objective: impl Fn(&[f64]) -> f64,
    start: &[f64],
    scales: &[f64],
    clip: impl Fn(&mut [f64]),
    settings: &OptimizerSettings,
    stream: u64,
) -> Result<SearchResult> {
    settings.validate()?;
    assert_eq!(start.len(), scales.len());
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    rng.set_stream(stream);
    let mut x = start.to_vec();
    clip(&mut x);
    let mut best = objective(&x);
    if !(best > 0.0) {
        return Err(Error::InfeasibleStart(best));
    }
    let mut evaluations = 1;
    let mut accepted = 0;
    let mut d_step = settings.d_step;
    let mut trial = vec![0.0; x.len()];
    while d_step >= settings.d_min {
        let mut c = 1;
        while c <= settings.c_max {
            let dir: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for i in 0..x.len() {
                trial[i] = x[i] + d_step * scales[i] * dir[i] / norm;
            }
            clip(&mut trial);
            let value = objective(&trial);
            evaluations += 1;
            if value > best {
                best = value;
                x.copy_from_slice(&trial);
                accepted += 1;
                c = 1;
            } else {
                c += 1;
            }
        }
        d_step /= 5.0;
    }
    Ok(SearchResult { x, value: best, evaluations, accepted })
}

/// Which parameters the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamScope {
    /// Source parameters only; failure budget fixed at the uniform split.
    Spo,
    /// Source parameters and the failure budget.
    Apo,
}

impl std::str::FromStr for ParamScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spo" => Ok(ParamScope::Spo),
            "apo" => Ok(ParamScope::Apo),
            other => Err(Error::domain("scope", format!("unknown optimisation scope `{other}`"))),
        }
    }
}

/// Mode flags shaping the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeFlags {
    pub scope: ParamScope,
    /// Bob's source parameters mirror Alice's.
    pub symmetric: bool,
    /// `mu_z = mu_y` on each side.
    pub three_intensity: bool,
}

impl ModeFlags {
    /// Number of coordinates the search moves.
    pub fn active_len(&self) -> usize {
        let per_side = if self.three_intensity { 5 } else { 6 };
        let sides = if self.symmetric { 1 } else { 2 };
        let budget = match self.scope {
            ParamScope::Spo => 0,
            ParamScope::Apo => BUDGET_COORDS,
        };
        per_side * sides + budget
    }
}

/// 15 ξ's plus `eps_cor`, `eps_prime`, `eps_hat`; `eps_pa` is always derived.
const BUDGET_COORDS: usize = 18;
/// Box for `log10` of every budget coordinate.
pub const LOG_BUDGET_RANGE: (f64, f64) = (-40.0, -1.0);
const P_MIN: f64 = 1e-4;
const P_O_MIN: f64 = 1e-3;
const MU_MIN: f64 = 1e-4;
const MU_MAX: f64 = 2.0;
const MU_GAP: f64 = 1e-4;

/// Full parameter set of one key-rate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alice: SourceSide,
    pub bob: SourceSide,
    /// `eps_pa` is rederived from the target on every evaluation.
    pub budget: FailureBudget,
}

fn side_coords(s: &SourceSide, three: bool) -> Vec<f64> {
    let mut v = vec![s.p_x, s.p_y, s.p_z, s.mu_x, s.mu_y];
    if !three {
        v.push(s.mu_z);
    }
    v
}

fn side_from(c: &[f64], three: bool) -> SourceSide {
    SourceSide {
        p_x: c[0],
        p_y: c[1],
        p_z: c[2],
        mu_x: c[3],
        mu_y: c[4],
        mu_z: if three { c[4] } else { c[5] },
    }
}

fn clip_side(c: &mut [f64], three: bool) {
    for p in &mut c[..3] {
        *p = p.clamp(P_MIN, 1.0);
    }
    let sum = c[0] + c[1] + c[2];
    if sum > 1.0 - P_O_MIN {
        let k = (1.0 - P_O_MIN) / sum;
        for p in &mut c[..3] {
            *p *= k;
        }
    }
    c[3] = c[3].clamp(MU_MIN, MU_MAX - MU_GAP);
    c[4] = c[4].clamp(c[3] + MU_GAP, MU_MAX);
    if !three {
        c[5] = c[5].clamp(MU_MIN, MU_MAX);
    }
}

impl ParamVector {
    pub fn encode(&self, flags: &ModeFlags) -> Vec<f64> {
        let three = flags.three_intensity;
        let mut v = side_coords(&self.alice, three);
        if !flags.symmetric {
            v.extend(side_coords(&self.bob, three));
        }
        if flags.scope == ParamScope::Apo {
            let b = &self.budget;
            v.extend(b.xis().iter().map(|x| x.log10()));
            v.extend([b.eps_cor, b.eps_prime, b.eps_hat].iter().map(|x| x.log10()));
        }
        v
    }

    /// Inverse of [`encode`](Self::encode); frozen entries come from `template`.
    pub fn decode(coords: &[f64], flags: &ModeFlags, template: &ParamVector) -> ParamVector {
        let three = flags.three_intensity;
        let n = if three { 5 } else { 6 };
        let alice = side_from(&coords[..n], three);
        let (bob, rest) = if flags.symmetric {
            (alice, &coords[n..])
        } else {
            (side_from(&coords[n..2 * n], three), &coords[2 * n..])
        };
        let budget = match flags.scope {
            ParamScope::Spo => template.budget,
            ParamScope::Apo => {
                let p = |l: f64| 10f64.powf(l);
                let mut xis = [0.0; 15];
                for (x, l) in xis.iter_mut().zip(&rest[..15]) {
                    *x = p(*l);
                }
                FailureBudget::from_parts(
                    xis,
                    [p(rest[15]), p(rest[16]), p(rest[17]), template.budget.eps_pa],
                )
            }
        };
        ParamVector { alice, bob, budget }
    }

    /// Clips every active coordinate to its box and ordering constraints.
    pub fn clip_coords(coords: &mut [f64], flags: &ModeFlags) {
        let three = flags.three_intensity;
        let n = if three { 5 } else { 6 };
        clip_side(&mut coords[..n], three);
        let mut rest = n;
        if !flags.symmetric {
            clip_side(&mut coords[n..2 * n], three);
            rest = 2 * n;
        }
        for c in &mut coords[rest..] {
            *c = c.clamp(LOG_BUDGET_RANGE.0, LOG_BUDGET_RANGE.1);
        }
    }

    fn scales(flags: &ModeFlags) -> Vec<f64> {
        let n = flags.active_len();
        let sources = n - if flags.scope == ParamScope::Apo { BUDGET_COORDS } else { 0 };
        // one unit of step moves a source entry by 1 and a log-budget entry by 10 decades
        (0..n).map(|i| if i < sources { 1.0 } else { 10.0 }).collect()
    }

    /// Applies the mode's ties: symmetric copies Alice to Bob, three-intensity
    /// sets `mu_z = mu_y`.
    pub fn tied(mut self, flags: &ModeFlags) -> Self {
        if flags.three_intensity {
            self.alice.mu_z = self.alice.mu_y;
            self.bob.mu_z = self.bob.mu_y;
        }
        if flags.symmetric {
            self.bob = self.alice;
        }
        self
    }
}

/// Problem definition shared by every evaluation of one optimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Problem {
    pub channel: ChannelParams,
    pub pulses: f64,
    pub scan_mode: ScanMode,
    pub eps_target: f64,
    pub flags: ModeFlags,
    /// Scan resolution used inside the search loop.
    pub inner_scan: ScanSettings,
}

impl Problem {
    /// Coarse scan used while searching; the final report uses the caller's.
    pub const INNER_SCAN: ScanSettings = ScanSettings { grid_h: 21, grid_m: 21, refine_rounds: 2 };

    pub fn new(channel: ChannelParams, pulses: f64, scan_mode: ScanMode, eps_target: f64, flags: ModeFlags) -> Self {
        Self { channel, pulses, scan_mode, eps_target, flags, inner_scan: Self::INNER_SCAN }
    }

    /// Full key-rate report for a parameter vector.
    pub fn evaluate(&self, p: &ParamVector, scan: &ScanSettings) -> Result<KeyRateReport> {
        let cfg = ProtocolConfig::new(p.alice, p.bob, self.pulses)?;
        let budget = keyrate::with_derived_eps_pa(&p.budget, self.eps_target, self.scan_mode)?;
        let counts = simulate_expected_counts(&cfg, &self.channel);
        keyrate::evaluate(&counts, &cfg, &budget, self.scan_mode, scan, self.channel.f_ec)
    }

    /// Objective of the search: the coarse-scan rate, zero where undefined.
    pub fn objective(&self, p: &ParamVector) -> f64 {
        self.evaluate(p, &self.inner_scan).map(|r| r.rate_per_pulse).unwrap_or(0.0)
    }

    pub fn uniform_budget(&self) -> Result<FailureBudget> {
        keyrate::uniform_budget(self.eps_target, self.scan_mode)
    }
}

/// Best point of a coarse lattice over `(mu_x, mu_y, mu_z, p_z)` and the
/// share of `p_x` in the remainder, with the uniform budget.
pub fn find_feasible_start(problem: &Problem) -> Result<ParamVector> {
    let budget = problem.uniform_budget()?;
    let mut lattice = Vec::new();
    for &mu_x in &[0.02f64, 0.04, 0.07, 0.12, 0.2] {
        for &mu_y in &[0.15f64, 0.2, 0.3, 0.45] {
            for &mu_z in &[0.2, 0.3, 0.45, 0.6] {
                for &p_z in &[0.3, 0.4, 0.5, 0.6, 0.7] {
                    for &x_share in &[0.55, 0.7] {
                        let rest = 1.0 - p_z;
                        let side = SourceSide {
                            mu_x,
                            mu_y: mu_y.max(mu_x + 0.05),
                            mu_z,
                            p_x: x_share * rest,
                            p_y: 0.25 * rest,
                            p_z,
                        };
                        lattice.push(ParamVector { alice: side, bob: side, budget }.tied(&problem.flags));
                    }
                }
            }
        }
    }
    let values: Vec<f64> = lattice.par_iter().map(|p| problem.objective(p)).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    match best {
        Some((i, _)) => Ok(lattice[i]),
        None => Err(Error::NoKey(format!(
            "no positive key rate on the start lattice at L_A = {} km, L_B = {} km",
            problem.channel.l_a_km, problem.channel.l_b_km
        ))),
    }
}

/// Optimised parameters with the final report at the requested scan resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub params: ParamVector,
    pub report: KeyRateReport,
    /// Objective value at the coarse inner scan.
    pub search_rate: f64,
    pub evaluations: usize,
}

/// Runs `restarts` independent searches from `start` and keeps the best.
pub fn optimize_from(
    problem: &Problem,
    start: ParamVector,
    scan: &ScanSettings,
    settings: &OptimizerSettings,
) -> Result<Optimum> {
    settings.validate()?;
    let flags = problem.flags;
    let template = start.tied(&flags);
    let x0 = template.encode(&flags);
    let scales = ParamVector::scales(&flags);
    let objective = |c: &[f64]| problem.objective(&ParamVector::decode(c, &flags, &template));
    let clip = |c: &mut [f64]| ParamVector::clip_coords(c, &flags);
    let runs: Vec<Result<SearchResult>> = (0..settings.restarts)
        .into_par_iter()
        .map(|r| random_direction_search(objective, &x0, &scales, clip, settings, r as u64))
        .collect();
    let mut best: Option<SearchResult> = None;
    let mut evaluations = 0;
    for run in runs {
        let run = run?;
        evaluations += run.evaluations;
        // strict comparison keeps the lowest restart index on ties
        if best.as_ref().map_or(true, |b| run.value > b.value) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let params = ParamVector::decode(&best.x, &flags, &template).tied(&flags);
    let params = ParamVector {
        budget: keyrate::with_derived_eps_pa(&params.budget, problem.eps_target, problem.scan_mode)?,
        ..params
    };
    let report = problem.evaluate(&params, scan)?;
    Ok(Optimum { params, report, search_rate: best.value, evaluations })
}

/// SPO or APO optimisation from the lattice start.
///
/// APO first runs the SPO search and then releases the budget coordinates
/// from that optimum, so it never ends below the SPO incumbent.
pub fn optimize(problem: &Problem, scan: &ScanSettings, settings: &OptimizerSettings) -> Result<Optimum> {
    let start = find_feasible_start(problem)?;
    match problem.flags.scope {
        ParamScope::Spo => optimize_from(problem, start, scan, settings),
        ParamScope::Apo => {
            let spo = Problem { flags: ModeFlags { scope: ParamScope::Spo, ..problem.flags }, ..*problem };
            let first = optimize_from(&spo, start, scan, settings)?;
            let second = optimize_from(problem, first.params, scan, settings)?;
            Ok(Optimum { evaluations: first.evaluations + second.evaluations, ..second })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> OptimizerSettings {
        OptimizerSettings { d_step: 0.5, d_min: 1e-6, c_max: 60, seed: 7, restarts: 1 }
    }

    #[test]
    fn concave_objective_converges() {
        let target = [0.3, -1.2, 2.0];
        let f = |x: &[f64]| 10.0 - x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let res = random_direction_search(f, &[0.0, 0.0, 0.0], &[1.0; 3], |_| {}, &settings(), 0).unwrap();
        for (a, b) in res.x.iter().zip(&target) {
            assert!((a - b).abs() < 10.0 * 1e-6 * 10.0, "{a} vs {b}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let f = |x: &[f64]| 1.0 / (1.0 + (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 0.5).powi(2));
        let a = random_direction_search(f, &[0.0, 0.0], &[1.0; 2], |_| {}, &settings(), 3).unwrap();
        let b = random_direction_search(f, &[0.0, 0.0], &[1.0; 2], |_| {}, &settings(), 3).unwrap();
        assert_eq!(a, b);
        let c = random_direction_search(f, &[0.0, 0.0], &[1.0; 2], |_| {}, &settings(), 4).unwrap();
        assert_ne!(a.evaluations, 0);
        assert_ne!(a.x, c.x, "different streams take different paths");
    }

    #[test]
    fn infeasible_start_rejected() {
        let r = random_direction_search(|_| 0.0, &[1.0], &[1.0], |_| {}, &settings(), 0);
        assert!(matches!(r, Err(Error::InfeasibleStart(_))));
    }

    #[test]
    fn clip_enforces_boxes() {
        let flags = ModeFlags { scope: ParamScope::Apo, symmetric: false, three_intensity: false };
        let mut c = vec![0.9, 0.9, 0.9, 0.5, 0.1, 3.0, -1.0, 0.2, 0.3, 0.0, 0.0, -5.0];
        c.extend([-50.0; 18]);
        c[20] = 3.0;
        ParamVector::clip_coords(&mut c, &flags);
        let p = ParamVector::decode(&c, &flags, &template());
        for s in [p.alice, p.bob] {
            assert!(s.p_o() >= P_O_MIN * 0.999, "{}", s.p_o());
            assert!(s.mu_x < s.mu_y);
            assert!(s.mu_z <= MU_MAX && s.mu_x >= MU_MIN && s.p_x >= P_MIN);
        }
        assert!(c[12..].iter().all(|&l| (LOG_BUDGET_RANGE.0..=LOG_BUDGET_RANGE.1).contains(&l)));
    }

    fn template() -> ParamVector {
        let side = SourceSide { mu_x: 0.1, mu_y: 0.3, mu_z: 0.5, p_x: 0.1, p_y: 0.1, p_z: 0.6 };
        ParamVector { alice: side, bob: side, budget: FailureBudget::with_xis(1e-24, 1e-11, 1e-11, 1e-11, 1e-11) }
    }

    #[test]
    fn encode_decode_round_trip() {
        for scope in [ParamScope::Spo, ParamScope::Apo] {
            for symmetric in [false, true] {
                for three_intensity in [false, true] {
                    let flags = ModeFlags { scope, symmetric, three_intensity };
                    let t = template().tied(&flags);
                    let c = t.encode(&flags);
                    assert_eq!(c.len(), flags.active_len());
                    let back = ParamVector::decode(&c, &flags, &t);
                    assert_eq!(back.alice, t.alice);
                    assert_eq!(back.bob, t.bob);
                    for (a, b) in back.budget.xis().iter().zip(t.budget.xis()) {
                        assert!((a / b - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
        let flags = ModeFlags { scope: ParamScope::Apo, symmetric: false, three_intensity: false };
        assert_eq!(flags.active_len(), 30);
    }
}
