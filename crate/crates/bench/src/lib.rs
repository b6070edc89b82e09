//! Fixtures shared by the benchmarks.

use nnreg::data::config::{RunConfig, Settings};
use nnreg::data::suite::pair_set;
use nnreg::data::Pair;

/// The default run configuration at `n` points per cloud, with `backend`
/// as the feature extractor.
pub fn run_config(n: usize, backend: &str) -> RunConfig {
    let mut s = Settings::default();
    s.set("n_points", n);
    s.set("backend", backend);
    RunConfig::from_settings(&s).expect("benchmark configuration is valid")
}

/// One deterministic full-overlap pair.
pub fn pair(config: &RunConfig) -> Pair {
    pair_set(config, 1, 7, 1.0)
        .expect("builtin shapes generate")
        .remove(0)
}
