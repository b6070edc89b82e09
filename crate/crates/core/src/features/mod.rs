//! Per-point feature extraction.
//!
//! Two backends sit behind [`FeatureExtractor`]: a fixed descriptor built
//! from rigid-motion-invariant neighborhood statistics, and a small learnable
//! edge-convolution network with exact reverse mode.

mod edgeconv;
mod handcrafted;

pub use edgeconv::{edgeconv_backward, edgeconv_forward, EdgeConvTape, FeatureParams};
pub use handcrafted::{extract_handcrafted, Handcrafted, HANDCRAFTED_DIM};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    Handcrafted,
    EdgeConv,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Handcrafted => "handcrafted",
            Backend::EdgeConv => "edgeconv",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "handcrafted" => Ok(Backend::Handcrafted),
            "edgeconv" => Ok(Backend::EdgeConv),
            other => Err(Error::Config(format!("unknown feature backend `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub backend: Backend,
    /// Output width of each edge-convolution layer.
    pub layer_widths: Vec<usize>,
    /// Neighborhood size of the edge-convolution graph.
    pub k_feat: usize,
    pub seed: u64,
    /// Feed the center point `x_i` alongside `x_k - x_i`. Disabling it makes
    /// the network translation invariant.
    pub center_block: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::EdgeConv,
            layer_widths: vec![32, 64],
            k_feat: 8,
            seed: 0,
            center_block: true,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_feat == 0 {
            return Err(Error::Config("k_feat must be at least 1".into()));
        }
        if self.backend == Backend::EdgeConv
            && (self.layer_widths.is_empty() || self.layer_widths.contains(&0))
        {
            return Err(Error::Config(
                "edge convolution needs a non-empty list of positive layer widths".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.backend {
            Backend::Handcrafted => HANDCRAFTED_DIM,
            Backend::EdgeConv => *self.layer_widths.last().unwrap_or(&0),
        }
    }
}

/// `N x C` per-point descriptors plus the tag of the backend that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    extractor_id: &'static str,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>, extractor_id: &'static str) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{extractor_id} features")));
        }
        Ok(Self {
            values,
            extractor_id,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn extractor_id(&self) -> &'static str {
        self.extractor_id
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Anything that maps a cloud and its neighborhood graph to per-point
/// features.
pub trait FeatureExtractor {
    fn id(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn extract(&self, cloud: &PointCloud, index: &NeighborhoodIndex) -> Result<FeatureMatrix>;
}

/// The configured backend, with its parameters when it has any.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    Handcrafted,
    EdgeConv(FeatureParams),
}

impl Extractor {
    pub fn from_config(config: &ExtractorConfig) -> Result<Self> {
        config.validate()?;
        Ok(match config.backend {
            Backend::Handcrafted => Extractor::Handcrafted,
            Backend::EdgeConv => Extractor::EdgeConv(FeatureParams::init(config)?),
        })
    }

    pub fn params(&self) -> Option<&FeatureParams> {
        match self {
            Extractor::Handcrafted => None,
            Extractor::EdgeConv(p) => Some(p),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut FeatureParams> {
        match self {
            Extractor::Handcrafted => None,
            Extractor::EdgeConv(p) => Some(p),
        }
    }

    /// Neighborhood size the extractor expects its index to be built with,
    /// or `None` when any `K >= 4` works.
    pub fn required_k(&self) -> Option<usize> {
        match self {
            Extractor::Handcrafted => None,
            Extractor::EdgeConv(p) => Some(p.config().k_feat),
        }
    }

    /// Extracts features and, for the learnable backend, the tape for
    /// reverse mode.
    pub fn forward(
        &self,
        cloud: &PointCloud,
        index: &NeighborhoodIndex,
    ) -> Result<(FeatureMatrix, Option<EdgeConvTape>)> {
        match self {
            Extractor::Handcrafted => Ok((extract_handcrafted(cloud, index)?, None)),
            Extractor::EdgeConv(p) => {
                let (f, tape) = edgeconv_forward(cloud, index, p)?;
                Ok((f, Some(tape)))
            }
        }
    }
}

impl FeatureExtractor for Extractor {
    fn id(&self) -> &'static str {
        match self {
            Extractor::Handcrafted => Handcrafted.id(),
            Extractor::EdgeConv(p) => p.id(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Extractor::Handcrafted => HANDCRAFTED_DIM,
            Extractor::EdgeConv(p) => p.dim(),
        }
    }

    fn extract(&self, cloud: &PointCloud, index: &NeighborhoodIndex) -> Result<FeatureMatrix> {
        self.forward(cloud, index).map(|(f, _)| f)
    }
}
