use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::RigidTransform;

/// Rotation errors are in degrees, translation errors in cloud units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    pub mae_rot: f64,
    pub mae_trans: f64,
    pub mie_rot: f64,
    pub mie_trans: f64,
}

/// Rotation angle of `r` in radians.
///
/// Uses `atan2(|axis|, (tr - 1) / 2)` rather than `acos`, which loses about
/// eight digits near zero.
pub fn geodesic_angle(r: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = 0.5 * axis.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos)
}

/// `(yaw, pitch, roll)` in radians for `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn euler_zyx(r: &Matrix3<f64>) -> Vector3<f64> {
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    Vector3::new(yaw, pitch, roll)
}

fn wrap_degrees(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

pub fn compute_metrics(estimate: &RigidTransform, truth: &RigidTransform) -> RegistrationMetrics {
    let r_err = truth.rotation().transpose() * estimate.rotation();
    let dt = estimate.translation() - truth.translation();
    let de = euler_zyx(estimate.rotation()) - euler_zyx(truth.rotation());
    let mae_rot = de
        .iter()
        .map(|a| wrap_degrees(a.to_degrees()).abs())
        .sum::<f64>()
        / 3.0;
    RegistrationMetrics {
        mae_rot,
        mae_trans: dt.abs().sum() / 3.0,
        mie_rot: geodesic_angle(&r_err).to_degrees(),
        mie_trans: (truth.rotation().transpose() * dt).norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::transform::rot_z;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::from_euler_zyx(
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.1..3.1),
            Vector3::new(rng.random(), rng.random(), rng.random()),
        )
    }

    #[test]
    fn equal_transforms_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = random(&mut rng);
            assert_eq!(compute_metrics(&t, &t), RegistrationMetrics::default());
        }
    }

    #[test]
    fn constructed_ten_degree_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random(&mut rng);
        let est = RigidTransform::new(
            gt.rotation() * rot_z(10f64.to_radians()),
            *gt.translation(),
        )
        .unwrap();
        let m = compute_metrics(&est, &gt);
        assert!((m.mie_rot - 10.0).abs() < 1e-9);
        assert_eq!(m.mie_trans, 0.0);
    }

    #[test]
    fn geodesic_matches_trace_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random(&mut rng);
            let b = random(&mut rng);
            let m = compute_metrics(&a, &b);
            // Scalar trace formula written out independently.
            let ra = a.rotation();
            let rb = b.rotation();
            let mut tr = 0.0;
            for i in 0..3 {
                for k in 0..3 {
                    tr += rb[(k, i)] * ra[(k, i)];
                }
            }
            let expect = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((m.mie_rot - expect).abs() < 1e-6, "{} vs {}", m.mie_rot, expect);
        }
    }

    #[test]
    fn euler_round_trip() {
        let r = RigidTransform::from_euler_zyx(0.3, -0.2, 0.7, Vector3::zeros());
        let e = euler_zyx(r.rotation());
        assert!((e - Vector3::new(0.3, -0.2, 0.7)).norm() < 1e-12);
    }

    #[test]
    fn translation_errors() {
        let gt = RigidTransform::from_translation(Vector3::new(0.1, 0.2, 0.3));
        let est = RigidTransform::from_translation(Vector3::new(0.1, 0.5, -0.1));
        let m = compute_metrics(&est, &gt);
        assert!((m.mae_trans - 0.7 / 3.0).abs() < 1e-12);
        assert!((m.mie_trans - 0.5).abs() < 1e-12);
    }
}
