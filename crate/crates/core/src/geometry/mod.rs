//! Point-cloud containers, exact k-nearest-neighbor indexing, rigid-transform
//! algebra and registration error metrics.

mod knn;
mod metrics;
pub mod svd3;
mod transform;

pub use knn::{build_neighborhood_index, one_nn_cloud, KdTree, NeighborhoodIndex, BRUTE_FORCE_MAX};
pub use metrics::{compute_metrics, euler_zyx, geodesic_angle, RegistrationMetrics};
pub use transform::{apply_transform, compose, rot_x, rot_y, rot_z, RigidTransform, ORTHONORMAL_TOL};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// An ordered list of 3D points with optional per-point normals.
///
/// Every coordinate is finite and the cloud holds at least one point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Point3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Size("point cloud needs at least one point".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    pub fn with_normals(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::Contract(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        if normals.iter().any(|n| !n.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("normal with a non-finite component".into()));
        }
        let mut cloud = Self::new(points)?;
        cloud.normals = Some(normals);
        Ok(cloud)
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn centroid(&self) -> Point3 {
        self.points.iter().sum::<Point3>() / self.points.len() as f64
    }

    /// Componentwise (min, max) bounding box.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// New cloud made of the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        let mut out = Self::new(points)?;
        out.normals = normals;
        Ok(out)
    }
}
