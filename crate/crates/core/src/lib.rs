pub mod bounds;
pub mod channel;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod jointlp;
pub mod keyrate;
pub mod optimizer;
pub mod protocol;

pub use bounds::FailureProb;
pub use channel::{ChannelParams, ObservedCounts, Pair};
pub use error::{Error, Result};
pub use estimator::{DecoyEstimate, FailureBudget, ScanMode, ScanSettings};
pub use keyrate::KeyRateReport;
pub use protocol::{Branch, ProtocolConfig, Source, SourceSide};
pub use optimizer::{ModeFlags, OptimizerSettings, ParamScope, ParamVector};
pub use experiment::{ExperimentSpec, Sources, Sweep, Variant};
