//! Channel and relay model producing the observed counts.
//!
//! Each party sends a phase-randomised coherent pulse whose polarisation
//! carries the bit (H/V in the Z basis, ±45° in the X basis). The relay
//! interferes the two pulses on a 50:50 beamsplitter, separates polarisations
//! on each output port, and watches four threshold detectors. Coincidences
//! `c_H d_V` / `c_V d_H` announce ψ⁻, `c_H c_V` / `d_H d_V` announce ψ⁺; any
//! other pattern is discarded. Bob's reference frame is rotated so that a
//! lone photon lands in the orthogonal mode with probability `e_d`.
//!
//! Given the relative phase every detector sees a coherent state, so clicks
//! are independent and the pattern probability factorises. The phase average
//! is a periodic trapezoid rule over the relative phase.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{ProtocolConfig, Source};

/// Phase quadrature resolution for [`simulate_expected_counts`].
pub const PHASE_POINTS: usize = 512;

/// Loss and detector parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Alice–relay fiber length (km).
    pub l_a_km: f64,
    /// Bob–relay fiber length (km).
    pub l_b_km: f64,
    /// Fiber loss (dB/km).
    pub alpha_db_km: f64,
    /// Detector efficiency.
    pub eta_d: f64,
    /// Dark-count probability per detector per window.
    pub p_dark: f64,
    /// Misalignment error probability.
    pub e_mis: f64,
    /// Error-correction inefficiency.
    pub f_ec: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self::reference(0.0, 0.0)
    }
}

impl ChannelParams {
    /// Detector and fiber constants of the reference setup, at the given lengths.
    pub fn reference(l_a_km: f64, l_b_km: f64) -> Self {
        Self {
            l_a_km,
            l_b_km,
            alpha_db_km: 0.2,
            eta_d: 0.4,
            p_dark: 1e-7,
            e_mis: 0.015,
            f_ec: 1.1,
        }
    }

    pub fn with_lengths(self, l_a_km: f64, l_b_km: f64) -> Self {
        Self { l_a_km, l_b_km, ..self }
    }

    pub fn total_km(&self) -> f64 {
        self.l_a_km + self.l_b_km
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::domain(name, format!("{v} is not a probability")))
            }
        };
        prob("eta_d", self.eta_d)?;
        prob("p_dark", self.p_dark)?;
        prob("e_mis", self.e_mis)?;
        for (name, v) in [("l_a_km", self.l_a_km), ("l_b_km", self.l_b_km), ("alpha_db_km", self.alpha_db_km)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(name, format!("{v} must be non-negative")));
            }
        }
        if !(self.f_ec >= 1.0) {
            return Err(Error::domain("f_ec", format!("{} < 1", self.f_ec)));
        }
        Ok(())
    }
}

/// `η_d · 10^{-α L / 10}`.
pub fn transmittance(l_km: f64, ch: &ChannelParams) -> f64 {
    ch.eta_d * 10f64.powf(-ch.alpha_db_km * l_km / 10.0)
}

/// The two-pulse sources whose counts enter the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pair {
    OO,
    OX,
    XO,
    OY,
    YO,
    XX,
    XY,
    YX,
    YY,
    ZZ,
}

impl Pair {
    pub const ALL: [Pair; 10] = [
        Pair::OO,
        Pair::OX,
        Pair::XO,
        Pair::OY,
        Pair::YO,
        Pair::XX,
        Pair::XY,
        Pair::YX,
        Pair::YY,
        Pair::ZZ,
    ];

    pub fn sources(self) -> (Source, Source) {
        use Source::*;
        match self {
            Pair::OO => (O, O),
            Pair::OX => (O, X),
            Pair::XO => (X, O),
            Pair::OY => (O, Y),
            Pair::YO => (Y, O),
            Pair::XX => (X, X),
            Pair::XY => (X, Y),
            Pair::YX => (Y, X),
            Pair::YY => (Y, Y),
            Pair::ZZ => (Z, Z),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pair::OO => "oo",
            Pair::OX => "ox",
            Pair::XO => "xo",
            Pair::OY => "oy",
            Pair::YO => "yo",
            Pair::XX => "xx",
            Pair::XY => "xy",
            Pair::YX => "yx",
            Pair::YY => "yy",
            Pair::ZZ => "zz",
        }
    }

    pub fn from_label(label: &str) -> Option<Pair> {
        Pair::ALL.into_iter().find(|p| p.label() == label)
    }
}

/// Effective-event counts per source pair and the wrong-event counts used by
/// the analysis. Values are real: simulated counts are expectations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservedCounts {
    pub n_oo: f64,
    pub n_ox: f64,
    pub n_xo: f64,
    pub n_oy: f64,
    pub n_yo: f64,
    pub n_xx: f64,
    pub n_xy: f64,
    pub n_yx: f64,
    pub n_yy: f64,
    pub n_zz: f64,
    pub m_xx: f64,
    pub m_zz: f64,
}

impl ObservedCounts {
    /// Entry names in serialisation order.
    pub const FIELDS: [&'static str; 12] = [
        "n_oo", "n_ox", "n_xo", "n_oy", "n_yo", "n_xx", "n_xy", "n_yx", "n_yy", "n_zz", "m_xx", "m_zz",
    ];

    pub fn n(&self, p: Pair) -> f64 {
        match p {
            Pair::OO => self.n_oo,
            Pair::OX => self.n_ox,
            Pair::XO => self.n_xo,
            Pair::OY => self.n_oy,
            Pair::YO => self.n_yo,
            Pair::XX => self.n_xx,
            Pair::XY => self.n_xy,
            Pair::YX => self.n_yx,
            Pair::YY => self.n_yy,
            Pair::ZZ => self.n_zz,
        }
    }

    pub fn n_mut(&mut self, p: Pair) -> &mut f64 {
        match p {
            Pair::OO => &mut self.n_oo,
            Pair::OX => &mut self.n_ox,
            Pair::XO => &mut self.n_xo,
            Pair::OY => &mut self.n_oy,
            Pair::YO => &mut self.n_yo,
            Pair::XX => &mut self.n_xx,
            Pair::XY => &mut self.n_xy,
            Pair::YX => &mut self.n_yx,
            Pair::YY => &mut self.n_yy,
            Pair::ZZ => &mut self.n_zz,
        }
    }

    pub fn values(&self) -> [f64; 12] {
        [
            self.n_oo, self.n_ox, self.n_xo, self.n_oy, self.n_yo, self.n_xx, self.n_xy, self.n_yx,
            self.n_yy, self.n_zz, self.m_xx, self.m_zz,
        ]
    }

    pub fn from_values(v: [f64; 12]) -> Self {
        Self {
            n_oo: v[0],
            n_ox: v[1],
            n_xo: v[2],
            n_oy: v[3],
            n_yo: v[4],
            n_xx: v[5],
            n_xy: v[6],
            n_yx: v[7],
            n_yy: v[8],
            n_zz: v[9],
            m_xx: v[10],
            m_zz: v[11],
        }
    }

    /// Right events of source `xx`: `n_xx - m_xx`.
    pub fn right_xx(&self) -> f64 {
        self.n_xx - self.m_xx
    }

    /// Collects every violated invariant rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in Self::FIELDS.iter().zip(self.values()) {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} = {v} is not a finite non-negative count"));
            }
        }
        if self.m_xx > self.n_xx {
            problems.push(format!("m_xx = {} exceeds n_xx = {}", self.m_xx, self.n_xx));
        }
        if self.m_zz > self.n_zz {
            problems.push(format!("m_zz = {} exceeds n_zz = {}", self.m_zz, self.n_zz));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCounts(problems))
        }
    }
}

/// Per-window probabilities of an effective event and of a wrong one.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EventProbs {
    pub effective: f64,
    pub wrong: f64,
}

/// Real polarisation vector for a bit in a basis.
fn polarisation(z_basis: bool, bit: u8) -> [f64; 2] {
    match (z_basis, bit) {
        (true, 0) => [1.0, 0.0],
        (true, _) => [0.0, 1.0],
        (false, 0) => [FRAC_1_SQRT_2, FRAC_1_SQRT_2],
        (false, _) => [FRAC_1_SQRT_2, -FRAC_1_SQRT_2],
    }
}

/// Bob's frame rotation by `θ` with `sin²θ = e_d`.
fn misalign(v: [f64; 2], e_mis: f64) -> [f64; 2] {
    let s = e_mis.sqrt();
    let c = (1.0 - e_mis).sqrt();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Whether an announced Bell outcome disagrees with the encoded bits.
fn is_wrong(z_basis: bool, psi_minus: bool, same_bits: bool) -> bool {
    if z_basis || psi_minus {
        // anti-correlated outcome: equal bits are an error
        same_bits
    } else {
        !same_bits
    }
}

/// Phase-averaged event probabilities for one bit assignment.
///
/// `amp_a`/`amp_b` are the field amplitudes per polarisation mode arriving at
/// the relay; `cos_table` holds the quadrature nodes.
fn bit_probs(
    amp_a: [f64; 2],
    amp_b: [f64; 2],
    p_dark: f64,
    cos_table: &[f64],
) -> (f64, f64) {
    // log of the silent probability, split into phase-free and phase parts
    let log_keep = (-p_dark).ln_1p();
    let base = [
        log_keep - 0.5 * (amp_a[0] * amp_a[0] + amp_b[0] * amp_b[0]),
        log_keep - 0.5 * (amp_a[1] * amp_a[1] + amp_b[1] * amp_b[1]),
    ];
    let cross = [amp_a[0] * amp_b[0], amp_a[1] * amp_b[1]];
    let (mut minus, mut plus) = (0.0, 0.0);
    for &c in cos_table {
        // exponents for c_H, c_V, d_H, d_V
        let x = [
            base[0] - cross[0] * c,
            base[1] - cross[1] * c,
            base[0] + cross[0] * c,
            base[1] + cross[1] * c,
        ];
        let silent = x.map(f64::exp);
        let click = x.map(|v| -v.exp_m1());
        minus += click[0] * click[3] * silent[1] * silent[2] + click[1] * click[2] * silent[0] * silent[3];
        plus += click[0] * click[1] * silent[2] * silent[3] + click[2] * click[3] * silent[0] * silent[1];
    }
    let n = cos_table.len() as f64;
    (minus / n, plus / n)
}

fn cos_nodes(points: usize) -> Vec<f64> {
    (0..points)
        .map(|k| (2.0 * PI * k as f64 / points as f64).cos())
        .collect()
}

/// Event probabilities of one source pair, averaged over bits and phase.
pub fn event_probs(
    cfg: &ProtocolConfig,
    ch: &ChannelParams,
    l: Source,
    r: Source,
    points: usize,
) -> EventProbs {
    let cos_table = cos_nodes(points);
    event_probs_with(cfg, ch, l, r, &cos_table)
}

fn event_probs_with(
    cfg: &ProtocolConfig,
    ch: &ChannelParams,
    l: Source,
    r: Source,
    cos_table: &[f64],
) -> EventProbs {
    let ka = (cfg.alice.intensity(l) * transmittance(ch.l_a_km, ch)).sqrt();
    let kb = (cfg.bob.intensity(r) * transmittance(ch.l_b_km, ch)).sqrt();
    let z_basis = l.is_z_basis();
    let mut out = EventProbs::default();
    for bit_a in 0..2u8 {
        for bit_b in 0..2u8 {
            let pa = polarisation(z_basis, bit_a);
            let pb = misalign(polarisation(r.is_z_basis(), bit_b), ch.e_mis);
            let (minus, plus) = bit_probs(
                [ka * pa[0], ka * pa[1]],
                [kb * pb[0], kb * pb[1]],
                ch.p_dark,
                cos_table,
            );
            let same = bit_a == bit_b;
            out.effective += 0.25 * (minus + plus);
            if is_wrong(z_basis, true, same) {
                out.wrong += 0.25 * minus;
            }
            if is_wrong(z_basis, false, same) {
                out.wrong += 0.25 * plus;
            }
        }
    }
    out
}

/// Expected counts `N_lr · S_lr`, used directly as the observed values.
pub fn simulate_expected_counts(cfg: &ProtocolConfig, ch: &ChannelParams) -> ObservedCounts {
    simulate_with_resolution(cfg, ch, PHASE_POINTS)
}

pub fn simulate_with_resolution(
    cfg: &ProtocolConfig,
    ch: &ChannelParams,
    points: usize,
) -> ObservedCounts {
    let cos_table = cos_nodes(points);
    let mut counts = ObservedCounts::default();
    for pair in Pair::ALL {
        let (l, r) = pair.sources();
        let probs = event_probs_with(cfg, ch, l, r, &cos_table);
        let windows = cfg.window_count(l, r);
        *counts.n_mut(pair) = windows * probs.effective;
        match pair {
            Pair::XX => counts.m_xx = windows * probs.wrong,
            Pair::ZZ => counts.m_zz = windows * probs.wrong,
            _ => {}
        }
    }
    counts
}

/// Monte-Carlo estimate of the expected counts with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: ObservedCounts,
    pub std_err: ObservedCounts,
}

const MC_CHUNK: usize = 1 << 14;

/// Samples both global phases and both bit choices per trial and evaluates the
/// exact click-pattern probabilities with complex field amplitudes.
///
/// Chunks of trials draw from independent ChaCha streams keyed by chunk index
/// and are reduced in chunk order, so the result is identical for any number
/// of worker threads.
pub fn mc_oracle_counts(
    cfg: &ProtocolConfig,
    ch: &ChannelParams,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::domain("n_samples", "must be at least 1"));
    }
    let eta_a = transmittance(ch.l_a_km, ch);
    let eta_b = transmittance(ch.l_b_km, ch);
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let partial: Vec<([f64; 12], [f64; 12])> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let len = MC_CHUNK.min(n_samples - chunk * MC_CHUNK);
            let mut sum = [0.0; 12];
            let mut sum_sq = [0.0; 12];
            for _ in 0..len {
                let phase_a: f64 = rng.gen_range(0.0..2.0 * PI);
                let phase_b: f64 = rng.gen_range(0.0..2.0 * PI);
                let bit_a: bool = rng.gen();
                let bit_b: bool = rng.gen();
                let sample = mc_trial(cfg, ch, eta_a, eta_b, phase_a, phase_b, bit_a, bit_b);
                for i in 0..12 {
                    sum[i] += sample[i];
                    sum_sq[i] += sample[i] * sample[i];
                }
            }
            (sum, sum_sq)
        })
        .collect();
    let mut sum = [0.0; 12];
    let mut sum_sq = [0.0; 12];
    for (s, q) in &partial {
        for i in 0..12 {
            sum[i] += s[i];
            sum_sq[i] += q[i];
        }
    }
    let n = n_samples as f64;
    let mut mean = [0.0; 12];
    let mut err = [0.0; 12];
    for i in 0..12 {
        let m = sum[i] / n;
        let var = if n_samples > 1 {
            ((sum_sq[i] - n * m * m) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        mean[i] = m;
        err[i] = (var / n).sqrt();
    }
    Ok(McEstimate {
        mean: ObservedCounts::from_values(mean),
        std_err: ObservedCounts::from_values(err),
    })
}

/// One trial: scaled event probabilities for all 12 count entries.
#[allow(clippy::too_many_arguments)]
fn mc_trial(
    cfg: &ProtocolConfig,
    ch: &ChannelParams,
    eta_a: f64,
    eta_b: f64,
    phase_a: f64,
    phase_b: f64,
    bit_a: bool,
    bit_b: bool,
) -> [f64; 12] {
    let mut out = [0.0; 12];
    let rot = ch.e_mis.sqrt().asin();
    for (i, pair) in Pair::ALL.into_iter().enumerate() {
        let (l, r) = pair.sources();
        let angle = |src: Source, bit: bool| {
            let base = if src.is_z_basis() { 0.0 } else { PI / 4.0 };
            base + if bit { PI / 2.0 } else { 0.0 }
        };
        let theta_a = angle(l, bit_a);
        let theta_b = angle(r, bit_b) + rot;
        let amp_a = Complex64::from_polar((cfg.alice.intensity(l) * eta_a).sqrt(), phase_a);
        let amp_b = Complex64::from_polar((cfg.bob.intensity(r) * eta_b).sqrt(), phase_b);
        let a = [amp_a * theta_a.cos(), amp_a * theta_a.sin()];
        let b = [amp_b * theta_b.cos(), amp_b * theta_b.sin()];
        // detectors: 0 = c_H, 1 = c_V, 2 = d_H, 3 = d_V
        let mean_photons = [
            ((a[0] + b[0]) * FRAC_1_SQRT_2).norm_sqr(),
            ((a[1] + b[1]) * FRAC_1_SQRT_2).norm_sqr(),
            ((a[0] - b[0]) * FRAC_1_SQRT_2).norm_sqr(),
            ((a[1] - b[1]) * FRAC_1_SQRT_2).norm_sqr(),
        ];
        let log_keep = (-ch.p_dark).ln_1p();
        let click = mean_photons.map(|n| -(log_keep - n).exp_m1());
        let pattern = |on: [bool; 4]| -> f64 {
            (0..4)
                .map(|d| if on[d] { click[d] } else { (log_keep - mean_photons[d]).exp() })
                .product()
        };
        let psi_minus = pattern([true, false, false, true]) + pattern([false, true, true, false]);
        let psi_plus = pattern([true, true, false, false]) + pattern([false, false, true, true]);
        let windows = cfg.window_count(l, r);
        let same = bit_a == bit_b;
        out[i] = windows * (psi_minus + psi_plus);
        let wrong = if l.is_z_basis() {
            if same { psi_minus + psi_plus } else { 0.0 }
        } else if same {
            psi_minus
        } else {
            psi_plus
        };
        match pair {
            Pair::XX => out[10] = windows * wrong,
            Pair::ZZ => out[11] = windows * wrong,
            _ => {}
        }
    }
    out
}

/// Draws Poisson-distributed integer counts around the expectations.
///
/// Wrong and right events of `xx`/`zz` are drawn separately so that
/// `m <= n` still holds.
pub fn sample_observed_counts(expected: &ObservedCounts, seed: u64) -> ObservedCounts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lambda: f64| -> f64 {
        if lambda > 0.0 {
            Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(lambda)
        } else {
            0.0
        }
    };
    let mut out = ObservedCounts::default();
    for pair in Pair::ALL {
        match pair {
            Pair::XX => {
                out.m_xx = draw(expected.m_xx);
                out.n_xx = out.m_xx + draw(expected.right_xx());
            }
            Pair::ZZ => {
                out.m_zz = draw(expected.m_zz);
                out.n_zz = out.m_zz + draw(expected.n_zz - expected.m_zz);
            }
            _ => *out.n_mut(pair) = draw(expected.n(pair)),
        }
    }
    out
}
