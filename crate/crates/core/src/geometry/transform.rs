use nalgebra::{Matrix3, Matrix4, Vector3};

use super::svd3::project_to_rotation;
use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Tolerance on `R^T R = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// A rigid motion `p -> R p + t` with `R` a proper rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform entries".into()));
        }
        let drift = orthonormal_drift(&rotation);
        if drift > ORTHONORMAL_TOL {
            return Err(Error::Contract(format!(
                "rotation is not orthonormal with det +1 (deviation {drift:.3e})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects `rotation` onto SO(3) when it has drifted beyond tolerance.
    pub fn new_reorthonormalized(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if orthonormal_drift(&rotation) > ORTHONORMAL_TOL {
            project_to_rotation(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Result<Self> {
        Self::new(r, Vector3::zeros())
    }

    /// `R = Rz(yaw) * Ry(pitch) * Rx(roll)`, angles in radians.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64, t: Vector3<f64>) -> Self {
        Self {
            rotation: rot_z(yaw) * rot_y(pitch) * rot_x(roll),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Contract(format!(
                "homogeneous matrix has bottom row {bottom:?}, expected [0, 0, 0, 1]"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

pub(crate) fn orthonormal_drift(r: &Matrix3<f64>) -> f64 {
    let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
    gram.max((r.determinant() - 1.0).abs())
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Applies `t` to every point (normals are rotated).
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    if *t == RigidTransform::identity() {
        return cloud.clone();
    }
    let points = cloud.points().iter().map(|p| t.apply(p)).collect();
    let normals = cloud
        .normals()
        .map(|n| n.iter().map(|v| t.rotation() * v).collect());
    match normals {
        Some(normals) => PointCloud::with_normals(points, normals),
        None => PointCloud::new(points),
    }
    .expect("rigid image of a finite cloud is finite")
}

/// `t2 ∘ t1`: first `t1`, then `t2`.
pub fn compose(t2: &RigidTransform, t1: &RigidTransform) -> RigidTransform {
    RigidTransform::new_reorthonormalized(
        t2.rotation * t1.rotation,
        t2.rotation * t1.translation + t2.translation,
    )
}
