use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("failure probability {0} is outside (0, 1)")]
    InvalidFailureProb(f64),

    #[error("invalid parameter `{name}`: {reason}")]
    Domain { name: String, reason: String },

    #[error("invalid counts: {}", .0.join("; "))]
    InvalidCounts(Vec<String>),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("empty scan rectangle: {0}")]
    EmptyScan(String),

    #[error("failure budget cannot reach target: {0}")]
    Budget(String),

    #[error("infeasible start: objective value {0} is not positive")]
    InfeasibleStart(f64),

    #[error("no key: {0}")]
    NoKey(String),
}

impl Error {
    pub(crate) fn domain(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Domain {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
