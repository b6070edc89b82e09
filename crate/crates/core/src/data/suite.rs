//! Seeded pair sets and the benchmark loop shared by the CLI and the tests.

use std::time::Instant;

use rayon::prelude::*;

use super::config::RunConfig;
use super::{builtin_shapes, config_hash, make_pair, BenchmarkRecord, Pair, PairSpec};
use crate::error::Result;
use crate::geometry::{compute_metrics, RigidTransform};
use crate::solver::{register, Model};

/// `count` pairs cycling through the configured shapes. Pair `i` samples
/// its shape with seed `seed + i` and draws the pair with seed
/// `seed * 1000 + i`.
pub fn pair_set(config: &RunConfig, count: usize, seed: u64, keep_fraction: f64) -> Result<Vec<Pair>> {
    (0..count)
        .map(|i| {
            let name = &config.shapes[i % config.shapes.len()];
            let shape = builtin_shapes(name, config.shape_points, seed + i as u64)?;
            let spec = PairSpec {
                seed: seed * 1000 + i as u64,
                keep_fraction,
                ..config.pair
            };
            make_pair(&shape, &spec)
        })
        .collect()
}

pub fn training_pairs(config: &RunConfig) -> Result<Vec<Pair>> {
    pair_set(config, config.train_pairs, config.data_seed, config.pair.keep_fraction)
}

/// Hash of the resolved configuration and the model parameters.
pub fn run_hash(config: &RunConfig, model: &Model) -> String {
    let mut text = format!("{config:?}\n");
    for v in model.flat() {
        text.push_str(&format!("{:016x}\n", v.to_bits()));
    }
    config_hash(&text)
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub record: BenchmarkRecord,
    /// The registered transform, or the identity when registration failed.
    pub transform: RigidTransform,
    pub error: Option<String>,
}

/// Registers every pair (in parallel) and scores it against its ground
/// truth. Outcomes come back in pair order.
pub fn run_bench(model: &Model, config: &RunConfig, pairs: &[Pair]) -> Vec<BenchOutcome> {
    let hash = run_hash(config, model);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let start = Instant::now();
            let result = register(&pair.p, &pair.q, model, &config.train.pipeline);
            let wall = start.elapsed().as_secs_f64();
            let (transform, iterations, error) = match result {
                Ok(r) => (r.final_transform, r.iterations, None),
                Err(e) => (RigidTransform::identity(), 0, Some(e.to_string())),
            };
            BenchOutcome {
                record: BenchmarkRecord {
                    pair_id: i,
                    metrics: compute_metrics(&transform, &pair.t_gt),
                    iterations,
                    config_hash: hash.clone(),
                    wall_time_s: wall,
                },
                transform,
                error,
            }
        })
        .collect()
}

/// Median of a non-empty sample (upper median for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
