use serde::Serialize;

use super::{weighted_svd_taped, SolveResult, SvdTape};
use crate::error::{Error, Result};
use crate::features::{EdgeConvTape, Extractor, ExtractorConfig, FeatureMatrix};
use crate::geometry::{
    apply_transform, build_neighborhood_index, compose, one_nn_cloud, NeighborhoodIndex,
    PointCloud, RigidTransform,
};
use crate::inlier::{score_all, select_inliers, InlierMode, InlierNetParams, InlierSet, ScoreTape};
use crate::matching::{compute_matching, reference_copy, MatchingConfig, MatchingInputs, MatchingMap, ReferenceCopy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Neighborhood size for fusion and inlier scoring.
    pub k: usize,
    pub iterations: usize,
    pub matching: MatchingConfig,
    /// Share of source points kept as inliers, `N_c = floor(fraction * N)`.
    pub inlier_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 8,
            iterations: 3,
            matching: MatchingConfig::default(),
            inlier_fraction: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("k must be at least 2".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("at least one iteration is needed".into()));
        }
        if !(self.inlier_fraction > 0.0 && self.inlier_fraction <= 1.0) {
            return Err(Error::Config("inlier_fraction must lie in (0, 1]".into()));
        }
        if !self.matching.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn n_inliers(&self, n: usize) -> usize {
        (self.inlier_fraction * n as f64).floor() as usize
    }
}

/// Feature extractor and inlier network, the learnable parts of the
/// pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub extractor: Extractor,
    pub inlier: InlierNetParams,
}

impl Model {
    pub fn init(
        extractor: &ExtractorConfig,
        mode: InlierMode,
        k: usize,
        consistency_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            extractor: Extractor::from_config(extractor)?,
            inlier: InlierNetParams::init(mode, k, consistency_dim, seed)?,
        })
    }

    fn feature_len(&self) -> usize {
        self.extractor.params().map_or(0, |p| p.len())
    }

    pub fn num_params(&self) -> usize {
        self.feature_len() + self.inlier.len()
    }

    /// Feature parameters followed by inlier parameters.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self
            .extractor
            .params()
            .map_or_else(Vec::new, |p| p.values().to_vec());
        out.extend_from_slice(self.inlier.values());
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Contract(format!(
                "{} values for a model of {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let f = self.feature_len();
        if let Some(p) = self.extractor.params_mut() {
            p.values_mut().copy_from_slice(&values[..f]);
        }
        self.inlier.values_mut().copy_from_slice(&values[f..]);
        Ok(())
    }

    /// `(name, offset, len)` of every parameter block in [`flat`](Self::flat) order.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let mut out = self.extractor.params().map_or_else(Vec::new, |p| p.blocks());
        let f = self.feature_len();
        out.extend(self.inlier.blocks().into_iter().map(|(n, o, l)| (n, o + f, l)));
        out
    }
}

/// A cloud with everything the matching stage reads from it: neighborhood
/// graphs, its 1-NN cloud, and features of both.
pub struct CloudState {
    pub cloud: PointCloud,
    pub idx: NeighborhoodIndex,
    pub hat: PointCloud,
    pub idx_hat: NeighborhoodIndex,
    pub feat: FeatureMatrix,
    pub feat_hat: FeatureMatrix,
    pub tape: Option<EdgeConvTape>,
    pub tape_hat: Option<EdgeConvTape>,
}

fn features(
    cloud: &PointCloud,
    idx: &NeighborhoodIndex,
    extractor: &Extractor,
) -> Result<(FeatureMatrix, Option<EdgeConvTape>)> {
    match extractor.required_k() {
        Some(kf) if kf != idx.k() => {
            let own = build_neighborhood_index(cloud, kf)?;
            extractor.forward(cloud, &own)
        }
        _ => extractor.forward(cloud, idx),
    }
}

impl CloudState {
    pub fn build(cloud: &PointCloud, extractor: &Extractor, k: usize) -> Result<Self> {
        let idx = build_neighborhood_index(cloud, k)?;
        let hat = one_nn_cloud(cloud, &idx)?;
        let idx_hat = build_neighborhood_index(&hat, k)?;
        let (feat, tape) = features(cloud, &idx, extractor)?;
        let (feat_hat, tape_hat) = features(&hat, &idx_hat, extractor)?;
        Ok(Self {
            cloud: cloud.clone(),
            idx,
            hat,
            idx_hat,
            feat,
            feat_hat,
            tape,
            tape_hat,
        })
    }
}

/// The reference side, computed once per registration.
pub struct ReferenceState(pub CloudState);

impl ReferenceState {
    pub fn new(q: &PointCloud, model: &Model, config: &PipelineConfig) -> Result<Self> {
        CloudState::build(q, &model.extractor, config.k).map(ReferenceState)
    }
}

/// Every intermediate of one registration iteration.
pub struct IterationTrace {
    pub source: CloudState,
    pub map: MatchingMap,
    pub copy: ReferenceCopy,
    pub weights: Vec<f64>,
    pub score_tape: ScoreTape,
    pub inliers: InlierSet,
    pub solve: SolveResult,
    pub svd_tape: SvdTape,
}

impl IterationTrace {
    pub fn matching_inputs<'a>(&'a self, reference: &'a ReferenceState) -> MatchingInputs<'a> {
        let q = &reference.0;
        MatchingInputs {
            fp: &self.source.feat,
            fq: &q.feat,
            fp_hat: &self.source.feat_hat,
            fq_hat: &q.feat_hat,
            idx_p: &self.source.idx,
            idx_q: &q.idx,
            idx_p_hat: &self.source.idx_hat,
            idx_q_hat: &q.idx_hat,
        }
    }
}

/// Features, matching, reference copy, inlier scoring and selection, and the
/// weighted solve, for one position of the source cloud.
pub fn forward_iteration(
    source: &PointCloud,
    reference: &ReferenceState,
    model: &Model,
    config: &PipelineConfig,
) -> Result<IterationTrace> {
    let src = CloudState::build(source, &model.extractor, config.k)?;
    let q = &reference.0;
    let inputs = MatchingInputs {
        fp: &src.feat,
        fq: &q.feat,
        fp_hat: &src.feat_hat,
        fq_hat: &q.feat_hat,
        idx_p: &src.idx,
        idx_q: &q.idx,
        idx_p_hat: &src.idx_hat,
        idx_q_hat: &q.idx_hat,
    };
    let map = compute_matching(&inputs, &config.matching)?;
    let copy = reference_copy(&map.f, &q.cloud)?;
    let (weights, score_tape) = score_all(source, &copy, &src.idx, &model.inlier)?;
    let inliers = select_inliers(&weights, source, &copy, config.n_inliers(source.len()))?;
    let (solve, svd_tape) = weighted_svd_taped(&inliers.pairs, &inliers.weights)?;
    Ok(IterationTrace {
        source: src,
        map,
        copy,
        weights,
        score_tape,
        inliers,
        solve,
        svd_tape,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchingSummary {
    /// Mean over source points of the largest entry of their row of `F`.
    pub mean_row_max: f64,
    /// Mean over source points of the largest fused score.
    pub mean_g_max: f64,
}

impl MatchingSummary {
    pub fn of(map: &MatchingMap) -> Self {
        let row_max = |m: &ndarray::Array2<f64>| {
            m.rows()
                .into_iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                / m.nrows() as f64
        };
        Self {
            mean_row_max: row_max(&map.f),
            mean_g_max: row_max(&map.g),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationReport {
    pub transform: RigidTransform,
    pub residual: f64,
    pub inliers: InlierSet,
    pub summary: MatchingSummary,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub per_iteration: Vec<IterationReport>,
    /// Composition of all per-iteration updates, first applied first.
    pub final_transform: RigidTransform,
    pub iterations: usize,
}

/// Registers `p` onto `q`; see [`register_with`].
pub fn register(
    p: &PointCloud,
    q: &PointCloud,
    model: &Model,
    config: &PipelineConfig,
) -> Result<RegistrationResult> {
    register_with(p, q, model, config, |_, _| {})
}

/// Runs `config.iterations` rounds, moving the source by each solved
/// update. `observe` sees every iteration's full trace (1-based index).
/// Failures carry the index of the iteration that raised them.
pub fn register_with(
    p: &PointCloud,
    q: &PointCloud,
    model: &Model,
    config: &PipelineConfig,
    mut observe: impl FnMut(usize, &IterationTrace),
) -> Result<RegistrationResult> {
    config.validate()?;
    let reference = ReferenceState::new(q, model, config)?;
    let mut current = p.clone();
    let mut total = RigidTransform::identity();
    let mut per_iteration = Vec::with_capacity(config.iterations);
    for l in 1..=config.iterations {
        let trace = forward_iteration(&current, &reference, model, config)
            .map_err(|e| e.at_iteration(l))?;
        observe(l, &trace);
        let step = trace.solve.transform;
        current = apply_transform(&step, &current);
        total = compose(&step, &total);
        per_iteration.push(IterationReport {
            transform: step,
            residual: trace.solve.residual,
            summary: MatchingSummary::of(&trace.map),
            inliers: trace.inliers,
        });
    }
    Ok(RegistrationResult {
        per_iteration,
        final_transform: total,
        iterations: config.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Backend;
    use crate::geometry::{compute_metrics, Point3};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blob(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Anisotropic, so no rotation maps the cloud onto itself.
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.3..0.3),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn handcrafted_model(k: usize) -> Model {
        let cfg = ExtractorConfig {
            backend: Backend::Handcrafted,
            ..ExtractorConfig::default()
        };
        Model::init(&cfg, InlierMode::Anchor, k, 16, 1).unwrap()
    }

    fn sharp(iterations: usize) -> PipelineConfig {
        PipelineConfig {
            k: 6,
            iterations,
            matching: MatchingConfig {
                alpha: 8.0,
                ..MatchingConfig::default()
            },
            inlier_fraction: 0.5,
        }
    }

    #[test]
    fn aligned_clouds_stay_aligned() {
        let p = blob(1, 120);
        let model = handcrafted_model(6);
        let res = register(&p, &p, &model, &sharp(3)).unwrap();
        let m = compute_metrics(&res.final_transform, &RigidTransform::identity());
        assert!(m.mie_rot < 1e-3, "{m:?}");
        assert_eq!(res.per_iteration.len(), 3);
    }

    #[test]
    fn final_transform_composes_iterations() {
        let q = blob(2, 100);
        let truth = RigidTransform::from_euler_zyx(0.1, -0.05, 0.08, Vector3::new(0.03, 0.02, -0.04));
        let p = apply_transform(&truth.inverse(), &q);
        let res = register(&p, &q, &handcrafted_model(6), &sharp(3)).unwrap();
        let mut total = RigidTransform::identity();
        for it in &res.per_iteration {
            total = compose(&it.transform, &total);
        }
        assert_eq!(total, res.final_transform);
    }

    #[test]
    fn register_is_deterministic() {
        let q = blob(3, 150);
        let truth = RigidTransform::from_euler_zyx(0.3, 0.2, -0.1, Vector3::new(0.1, 0.0, -0.1));
        let p = apply_transform(&truth.inverse(), &q);
        let cfg = ExtractorConfig {
            layer_widths: vec![8, 8],
            k_feat: 6,
            ..ExtractorConfig::default()
        };
        let model = Model::init(&cfg, InlierMode::Anchor, 6, 8, 3).unwrap();
        let a = register(&p, &q, &model, &sharp(2)).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| register(&p, &q, &model, &sharp(2)).unwrap());
        assert_eq!(a.final_transform, b.final_transform);
    }

    #[test]
    fn degenerate_solve_names_the_iteration() {
        // Every point on one line: the solve cannot fix the roll about it.
        let p = PointCloud::new((0..20).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect())
            .unwrap();
        let err = register(&p, &p, &handcrafted_model(6), &sharp(2)).unwrap_err();
        assert!(matches!(err, Error::Iteration { iteration: 1, .. }), "{err}");
    }

    #[test]
    fn flat_parameters_round_trip() {
        let cfg = ExtractorConfig {
            layer_widths: vec![4, 5],
            ..ExtractorConfig::default()
        };
        let mut model = Model::init(&cfg, InlierMode::Anchor, 8, 6, 0).unwrap();
        let mut flat = model.flat();
        assert_eq!(flat.len(), model.num_params());
        flat[0] = 42.0;
        let last = flat.len() - 1;
        flat[last] = -7.0;
        model.set_flat(&flat).unwrap();
        assert_eq!(model.flat(), flat);
        let blocks = model.blocks();
        assert_eq!(blocks.last().map(|b| b.1 + b.2), Some(flat.len()));
    }
}
