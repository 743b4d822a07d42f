//! Shared inputs for the estimation benchmarks.

use quasirand_core::simlab::{Overlap, ScenarioConfig, ScenarioId};
use quasirand_core::verify::synthetic_dataset;
use quasirand_core::ObservedData;

/// Samples sized like a mid-sized study: 500 convenience and 800 reference
/// units with two covariates.
pub fn medium_dataset() -> ObservedData {
    synthetic_dataset(99, 500, 800, 2)
}

/// A tabled scenario with a single replicate, for timing one replicate end to end.
pub fn replicate_config(id: ScenarioId) -> ScenarioConfig {
    ScenarioConfig::tabled(id, Overlap::Low, 99)
        .expect("tabled scenario")
        .with_reps(1)
}
