//! Criterion benchmarks for the key-rate pipeline; see `benches/`.

use mdiqkd_core::{ProtocolConfig, SourceSide};

/// Source settings near the 25 km optimum, shared by the benches.
pub fn reference_config() -> ProtocolConfig {
    let side = SourceSide { mu_x: 0.064, mu_y: 0.176, mu_z: 0.293, p_x: 0.277, p_y: 0.0905, p_z: 0.5895 };
    ProtocolConfig::new(side, side, 1e10).expect("valid reference sources")
}
