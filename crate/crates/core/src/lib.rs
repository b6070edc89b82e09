//! Unsupervised rigid registration of 3D point clouds.
//!
//! The pipeline matches per-point features of a source and a reference cloud
//! (and of their 1-NN clouds), fuses the match scores over local
//! neighborhoods, builds a soft reference copy of the source, scores each
//! correspondence by how well neighborhood geometry agrees, and solves for
//! the rigid motion from the most confident pairs with a weighted SVD. Four
//! self-supervised losses, with hand-written reverse mode through every
//! stage, train the feature and inlier networks without ground truth.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod features;
pub mod geometry;
pub mod inlier;
pub mod matching;
pub mod nn;
pub mod solver;
pub mod training;

pub use error::{Error, Result};
pub use features::{Backend, ExtractorConfig, FeatureExtractor, FeatureMatrix, FeatureParams};
pub use geometry::{
    apply_transform, build_neighborhood_index, compose, compute_metrics, one_nn_cloud,
    NeighborhoodIndex, Point3, PointCloud, RegistrationMetrics, RigidTransform,
};
pub use inlier::{InlierMode, InlierNetParams, InlierSet};
pub use matching::{FusionNorm, MatchingConfig, MatchingMap, ReferenceCopy};
pub use solver::{register, Model, PipelineConfig, RegistrationResult};
pub use training::{LossBreakdown, TrainConfig};
