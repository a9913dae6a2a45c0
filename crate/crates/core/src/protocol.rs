//! Source configuration of the four-intensity protocol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the four sources each party chooses from per time window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Vacuum.
    O,
    /// Weak decoy, X basis.
    X,
    /// Strong decoy, X basis.
    Y,
    /// Signal, Z basis.
    Z,
}

impl Source {
    pub const ALL: [Source; 4] = [Source::O, Source::X, Source::Y, Source::Z];

    pub fn label(self) -> char {
        match self {
            Source::O => 'o',
            Source::X => 'x',
            Source::Y => 'y',
            Source::Z => 'z',
        }
    }

    pub fn is_z_basis(self) -> bool {
        self == Source::Z
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o" | "O" => Ok(Source::O),
            "x" | "X" => Ok(Source::X),
            "y" | "Y" => Ok(Source::Y),
            "z" | "Z" => Ok(Source::Z),
            other => Err(Error::domain("source", format!("unknown label `{other}`"))),
        }
    }
}

/// `μᵏ e^{-μ} / k!`.
pub fn poisson_weight(mu: f64, k: u32) -> f64 {
    if mu == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if k <= 20 {
        let fact: f64 = (2..=k).map(f64::from).product();
        return mu.powi(k as i32) * (-mu).exp() / fact;
    }
    let log_fact: f64 = (2..=k).map(|i| f64::from(i).ln()).sum();
    (f64::from(k) * mu.ln() - mu - log_fact).exp()
}

/// Intensities and sending probabilities of one party.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSide {
    pub mu_x: f64,
    pub mu_y: f64,
    pub mu_z: f64,
    pub p_x: f64,
    pub p_y: f64,
    pub p_z: f64,
}

impl SourceSide {
    pub fn validate(&self, side: &str) -> Result<()> {
        let check = |name: &str, ok: bool, v: f64| {
            if ok {
                Ok(())
            } else {
                Err(Error::domain(format!("{side}.{name}"), format!("value {v} out of range")))
            }
        };
        check("mu_x", self.mu_x > 0.0 && self.mu_x.is_finite(), self.mu_x)?;
        check("mu_y", self.mu_y >= self.mu_x && self.mu_y.is_finite(), self.mu_y)?;
        check("mu_z", self.mu_z > 0.0 && self.mu_z.is_finite(), self.mu_z)?;
        check("p_x", self.p_x > 0.0, self.p_x)?;
        check("p_y", self.p_y > 0.0, self.p_y)?;
        check("p_z", self.p_z > 0.0, self.p_z)?;
        check("p_o", self.p_o() > 0.0, self.p_o())
    }

    pub fn p_o(&self) -> f64 {
        1.0 - self.p_x - self.p_y - self.p_z
    }

    pub fn intensity(&self, s: Source) -> f64 {
        match s {
            Source::O => 0.0,
            Source::X => self.mu_x,
            Source::Y => self.mu_y,
            Source::Z => self.mu_z,
        }
    }

    pub fn prob(&self, s: Source) -> f64 {
        match s {
            Source::O => self.p_o(),
            Source::X => self.p_x,
            Source::Y => self.p_y,
            Source::Z => self.p_z,
        }
    }

    /// Photon-number weight `a_k^s` (or `b_k^s` on Bob's side).
    pub fn weight(&self, s: Source, k: u32) -> f64 {
        poisson_weight(self.intensity(s), k)
    }
}

/// Which closed form for the single-photon yield applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// `μ_yB/μ_xB <= μ_yA/μ_xA`.
    BobRatioSmaller,
    /// `μ_yB/μ_xB > μ_yA/μ_xA`.
    AliceRatioSmaller,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub alice: SourceSide,
    pub bob: SourceSide,
    /// Total number of pulse pairs sent.
    pub pulses: f64,
}

impl ProtocolConfig {
    pub fn new(alice: SourceSide, bob: SourceSide, pulses: f64) -> Result<Self> {
        let cfg = Self { alice, bob, pulses };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pulses >= 1.0 && self.pulses.fract() == 0.0 && self.pulses.is_finite()) {
            return Err(Error::domain("pulses", format!("{} is not a positive integer", self.pulses)));
        }
        self.alice.validate("alice")?;
        self.bob.validate("bob")
    }

    /// `N_lr = p_{l_A} p_{r_B} N`, kept real-valued.
    pub fn window_count(&self, l: Source, r: Source) -> f64 {
        self.alice.prob(l) * self.bob.prob(r) * self.pulses
    }

    pub fn branch(&self) -> Branch {
        let bob = self.bob.mu_y / self.bob.mu_x;
        let alice = self.alice.mu_y / self.alice.mu_x;
        if bob <= alice {
            Branch::BobRatioSmaller
        } else {
            Branch::AliceRatioSmaller
        }
    }
}

/// Parses a two-letter window label such as `"xy"`.
pub fn parse_window(label: &str) -> Result<(Source, Source)> {
    let mut chars = label.chars();
    match (chars.next(), chars.next(), chars.next()) {
        (Some(l), Some(r), None) => Ok((l.to_string().parse()?, r.to_string().parse()?)),
        _ => Err(Error::domain("window", format!("`{label}` is not a two-letter label"))),
    }
}
