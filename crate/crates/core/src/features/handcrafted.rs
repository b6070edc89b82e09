use ndarray::Array2;

use super::{FeatureExtractor, FeatureMatrix};
use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, PointCloud};
use crate::inlier::angle;

pub const HANDCRAFTED_DIM: usize = 10;

/// Fixed descriptor of a point's K-neighborhood:
///
/// | channels | content |
/// |----------|---------|
/// | 0..4 | four smallest neighbor distances, ascending |
/// | 4, 5 | mean and population standard deviation of all K distances |
/// | 6..9 | angles between edges to the 1st/2nd, 1st/3rd and 2nd/3rd neighbors |
/// | 9 | local density, `1 / mean distance` |
///
/// Every channel is a function of pairwise distances and angles only, so
/// the descriptor is invariant under rigid motions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Handcrafted;

impl FeatureExtractor for Handcrafted {
    fn id(&self) -> &'static str {
        "handcrafted"
    }

    fn dim(&self) -> usize {
        HANDCRAFTED_DIM
    }

    fn extract(&self, cloud: &PointCloud, index: &NeighborhoodIndex) -> Result<FeatureMatrix> {
        extract_handcrafted(cloud, index)
    }
}

pub fn extract_handcrafted(cloud: &PointCloud, index: &NeighborhoodIndex) -> Result<FeatureMatrix> {
    let k = index.k();
    if k < 4 {
        return Err(Error::Size(format!(
            "handcrafted descriptor needs K >= 4, index has K = {k}"
        )));
    }
    if index.len() != cloud.len() {
        return Err(Error::Contract("index does not belong to this cloud".into()));
    }
    let mut out = Array2::<f64>::zeros((cloud.len(), HANDCRAFTED_DIM));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let center = cloud.point(i);
        let nbrs = index.row(i);
        let edges: Vec<_> = nbrs.iter().take(3).map(|&j| cloud.point(j) - center).collect();
        let dists: Vec<f64> = nbrs.iter().map(|&j| (cloud.point(j) - center).norm()).collect();
        let mean = dists.iter().sum::<f64>() / k as f64;
        let var = dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / k as f64;
        row[0] = dists[0];
        row[1] = dists[1];
        row[2] = dists[2];
        row[3] = dists[3];
        row[4] = mean;
        row[5] = var.sqrt();
        row[6] = angle(&edges[0], &edges[1]);
        row[7] = angle(&edges[0], &edges[2]);
        row[8] = angle(&edges[1], &edges[2]);
        row[9] = 1.0 / mean.max(1e-12);
    }
    FeatureMatrix::new(out, "handcrafted")
}
