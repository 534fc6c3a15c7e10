//! Shared fixtures for the criterion benches: one environment per kind at
//! fixed seeds, plus a desk-scale run configuration whose bonus multiplier
//! keeps the revisit grind short enough to time repeatedly.

use linq_core::envgen::{self, EnvKind, EnvSpec, Environment};
use linq_core::harness::{AgentKind, ExperimentConfig, MonitorFlags};

/// Tabular one-hot environment (H = 2, |S| = 3, |A| = 2, d = 6).
pub fn tabular_environment() -> Environment {
    envgen::generate(&EnvSpec::new(EnvKind::TabularOnehot, 2, 3, 2, 6, 0.05, 17))
        .expect("fixed-seed benchmark environment generates")
}

/// Low-rank linear environment (H = 3, |S| = 4, |A| = 3, d = 3).
pub fn linear_environment() -> Environment {
    envgen::generate(&EnvSpec::new(EnvKind::LinearMdp, 3, 4, 3, 3, 0.1, 41))
        .expect("fixed-seed benchmark environment generates")
}

/// Revisiting-agent run with every monitor on; c_β = 0.05 bounds the
/// per-episode revisit count at desk scale.
pub fn desk_scale_config(episodes: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::new(AgentKind::Linq, episodes, 11);
    config.c_beta = 0.05;
    config.monitors = MonitorFlags::all();
    config
}
