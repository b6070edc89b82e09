//! The four self-supervised loss terms, each with its gradient.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{KdTree, NeighborhoodIndex, Point3, PointCloud, RigidTransform};
use crate::inlier::{angle, angle_backward, InlierSet};
use crate::matching::ReferenceCopy;

/// Floor on normalized fused scores before the logarithm.
pub const SC_FLOOR: f64 = 1e-12;

/// `x^2 / 2` for `|x| <= beta`, `beta (|x| - beta / 2)` beyond.
pub fn huber(x: f64, beta: f64) -> f64 {
    if x.abs() <= beta {
        0.5 * x * x
    } else {
        beta * (x.abs() - 0.5 * beta)
    }
}

pub fn huber_grad(x: f64, beta: f64) -> f64 {
    if x.abs() <= beta {
        x
    } else {
        beta * x.signum()
    }
}

/// Gradients of a loss with respect to the solved motion and the reference
/// copy. Unused parts stay zero.
#[derive(Clone, Debug)]
pub struct TermGrads {
    pub d_r: Matrix3<f64>,
    pub d_t: Vector3<f64>,
    pub d_copy: Vec<Point3>,
}

impl TermGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_r: Matrix3::zeros(),
            d_t: Vector3::zeros(),
            d_copy: vec![Point3::zeros(); n],
        }
    }
}

/// Nearest point of `tree` for every query, as `(index, squared distance)`.
fn nearest_all(tree: &KdTree<'_>, queries: &[Point3]) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| tree.nearest(q, None).expect("non-empty cloud"))
        .collect()
}

/// Symmetric Huber chamfer on squared nearest-neighbor distances.
pub fn loss_global_consistency(p_prime: &PointCloud, q: &PointCloud, beta: f64) -> f64 {
    global_consistency_with_grad(p_prime, q, beta).0
}

/// Value, gradient with respect to each moved source point, and the
/// nearest-neighbor assignments (held fixed when differentiating).
pub fn global_consistency_with_grad(
    p_prime: &PointCloud,
    q: &PointCloud,
    beta: f64,
) -> (f64, Vec<Point3>, Vec<usize>) {
    let (pp, qq) = (p_prime.points(), q.points());
    let q_tree = KdTree::build(qq);
    let p_tree = KdTree::build(pp);
    let to_q = nearest_all(&q_tree, pp);
    let to_p = nearest_all(&p_tree, qq);
    let mut value = 0.0;
    let mut grad = vec![Point3::zeros(); pp.len()];
    for (i, &(j, d2)) in to_q.iter().enumerate() {
        value += huber(d2, beta);
        grad[i] += (pp[i] - qq[j]) * (2.0 * huber_grad(d2, beta));
    }
    for (j, &(i, d2)) in to_p.iter().enumerate() {
        value += huber(d2, beta);
        grad[i] += (pp[i] - qq[j]) * (2.0 * huber_grad(d2, beta));
    }
    let routing = to_q.iter().chain(&to_p).map(|x| x.0).collect();
    (value, grad, routing)
}

/// Pulls a gradient on `R p_i + t` back to `(R, t)`.
pub fn moved_points_backward(p: &PointCloud, d_moved: &[Point3]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut d_r = Matrix3::zeros();
    let mut d_t = Vector3::zeros();
    for (x, g) in p.points().iter().zip(d_moved) {
        d_r += g * x.transpose();
        d_t += g;
    }
    (d_r, d_t)
}

fn unit_or_zero(v: &Point3) -> Point3 {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Point3::zeros()
    }
}

/// `sum_{x in inliers} sum_{j in N(x)} |R p_j + t - q~_j|`.
pub fn loss_inlier_neighborhood(
    inliers: &InlierSet,
    transform: &RigidTransform,
    idx_p: &NeighborhoodIndex,
    p: &PointCloud,
    copy: &ReferenceCopy,
) -> f64 {
    inlier_neighborhood_with_grad(inliers, transform, idx_p, p, copy).0
}

pub fn inlier_neighborhood_with_grad(
    inliers: &InlierSet,
    transform: &RigidTransform,
    idx_p: &NeighborhoodIndex,
    p: &PointCloud,
    copy: &ReferenceCopy,
) -> (f64, TermGrads) {
    let q = copy.points();
    let mut g = TermGrads::zeros(q.len());
    let mut value = 0.0;
    for &i in &inliers.indices {
        for &j in idx_p.row(i) {
            let r = transform.apply(p.point(j)) - q[j];
            value += r.norm();
            let u = unit_or_zero(&r);
            g.d_r += u * p.point(j).transpose();
            g.d_t += u;
            g.d_copy[j] -= u;
        }
    }
    (value, g)
}

/// Edge and anchor-angle disagreement between each inlier's source
/// neighborhood and its image in the reference copy.
pub fn loss_geometric_structure(
    inliers: &InlierSet,
    idx_p: &NeighborhoodIndex,
    p: &PointCloud,
    copy: &ReferenceCopy,
) -> f64 {
    geometric_structure_with_grad(inliers, idx_p, p, copy).0
}

pub fn geometric_structure_with_grad(
    inliers: &InlierSet,
    idx_p: &NeighborhoodIndex,
    p: &PointCloud,
    copy: &ReferenceCopy,
) -> (f64, TermGrads) {
    let q = copy.points();
    let mut g = TermGrads::zeros(q.len());
    let mut value = 0.0;
    for &i in &inliers.indices {
        let row = idx_p.row(i);
        let ep: Vec<Point3> = row.iter().map(|&j| p.point(i) - p.point(j)).collect();
        let eq: Vec<Point3> = row.iter().map(|&j| q[i] - q[j]).collect();
        let mut d_eq = vec![Point3::zeros(); row.len()];
        for k in 0..row.len() {
            let diff = ep[k] - eq[k];
            value += diff.norm();
            d_eq[k] -= unit_or_zero(&diff);
            let da = angle(&ep[k], &ep[0]) - angle(&eq[k], &eq[0]);
            value += da.abs();
            if da != 0.0 {
                let (du, dv) = angle_backward(&eq[k], &eq[0], -da.signum());
                d_eq[k] += du;
                d_eq[0] += dv;
            }
        }
        for (&j, de) in row.iter().zip(&d_eq) {
            g.d_copy[i] += de;
            g.d_copy[j] -= de;
        }
    }
    (value, g)
}

/// Cross-entropy of each inlier row of `G` (normalized to sum 1) against its
/// own argmax, averaged over the inliers.
pub fn loss_spatial_consistency(g: &Array2<f64>, inliers: &[usize]) -> Result<f64> {
    spatial_consistency_with_grad(g, inliers).map(|(v, _, _)| v)
}

/// Value, gradient on `G`, and the argmax column of every inlier row.
pub fn spatial_consistency_with_grad(
    g: &Array2<f64>,
    inliers: &[usize],
) -> Result<(f64, Array2<f64>, Vec<usize>)> {
    let mut grad = Array2::<f64>::zeros(g.dim());
    if inliers.is_empty() {
        return Ok((0.0, grad, Vec::new()));
    }
    let scale = 1.0 / inliers.len() as f64;
    let mut value = 0.0;
    let mut targets = Vec::with_capacity(inliers.len());
    for &i in inliers {
        let row = g.row(i);
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("fused score row {i} is not finite")));
        }
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        targets.push(best);
        let sum = row.sum();
        let ratio = if sum > 0.0 { row[best] / sum } else { 0.0 };
        if ratio > SC_FLOOR {
            value -= scale * ratio.ln();
            // d(-log(g_b / s)) = -dg_b / g_b + ds / s
            let mut gr = grad.row_mut(i);
            gr.fill(scale / sum);
            gr[best] -= scale / row[best];
        } else {
            value -= scale * SC_FLOOR.ln();
        }
    }
    Ok((value, grad, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, build_neighborhood_index, rot_z};
    use crate::inlier::select_inliers;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn all_inliers(p: &PointCloud, copy: &ReferenceCopy) -> InlierSet {
        select_inliers(&vec![1.0; p.len()], p, copy, p.len()).unwrap()
    }

    #[test]
    fn chamfer_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_cloud(&mut rng, 30);
        assert_eq!(loss_global_consistency(&q, &q, 1.0), 0.0);
        let a = PointCloud::from_arrays(&[[0.0; 3]]).unwrap();
        let b = PointCloud::from_arrays(&[[0.1, 0.0, 0.0]]).unwrap();
        let v = loss_global_consistency(&a, &b, 1.0);
        assert!((v - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn far_outlier_grows_linearly() {
        let base = PointCloud::from_arrays(&[[0.0; 3], [0.1, 0.0, 0.0]]).unwrap();
        let beta = 1.0;
        let with = |x: f64| {
            PointCloud::from_arrays(&[[0.0; 3], [0.1, 0.0, 0.0], [x, 0.0, 0.0]]).unwrap()
        };
        let l0 = loss_global_consistency(&base, &base, beta);
        for x in [2.0, 4.0, 8.0] {
            let extra = loss_global_consistency(&with(x), &base, beta) - l0;
            let d2 = (x - 0.1) * (x - 0.1);
            assert!((extra - beta * (d2 - beta / 2.0)).abs() < 1e-12);
            assert!(extra < 0.5 * d2 * d2);
        }
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_cloud(&mut rng, 20);
        let q = random_cloud(&mut rng, 25);
        for beta in [1.0, 0.05] {
            let (_, grad, _) = global_consistency_with_grad(&p, &q, beta);
            let h = 1e-7;
            for i in 0..20 {
                for c in 0..3 {
                    let shift = |s: f64| {
                        let mut pts = p.points().to_vec();
                        pts[i][c] += s;
                        loss_global_consistency(&PointCloud::new(pts).unwrap(), &q, beta)
                    };
                    let fd = (shift(h) - shift(-h)) / (2.0 * h);
                    assert!((fd - grad[i][c]).abs() < 1e-6, "{fd} vs {}", grad[i][c]);
                }
            }
        }
    }

    #[test]
    fn inlier_neighborhood_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_cloud(&mut rng, 15);
        let idx = build_neighborhood_index(&p, 3).unwrap();
        let t = RigidTransform::from_euler_zyx(0.3, 0.1, -0.2, Vector3::new(0.1, 0.2, 0.3));
        let copy = ReferenceCopy::new(apply_transform(&t, &p));
        let set = all_inliers(&p, &copy);
        assert!(loss_inlier_neighborhood(&set, &t, &idx, &p, &copy) < 1e-12);

        // One inlier with one neighbor at residual (0.3, 0.4, 0).
        let two = PointCloud::from_arrays(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]]).unwrap();
        let idx2 = build_neighborhood_index(&two, 1).unwrap();
        let mut shifted = two.points().to_vec();
        shifted[1] -= Point3::new(0.3, 0.4, 0.0);
        let copy2 = ReferenceCopy::new(PointCloud::new(shifted).unwrap());
        let one = InlierSet {
            indices: vec![0],
            weights: vec![1.0],
            pairs: vec![(*two.point(0), copy2.points()[0])],
        };
        let v = loss_inlier_neighborhood(&one, &RigidTransform::identity(), &idx2, &two, &copy2);
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inlier_neighborhood_matches_loop_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_cloud(&mut rng, 20);
        let copy = ReferenceCopy::new(random_cloud(&mut rng, 20));
        let idx = build_neighborhood_index(&p, 4).unwrap();
        let w: Vec<f64> = (0..20).map(|_| rng.random()).collect();
        let set = select_inliers(&w, &p, &copy, 10).unwrap();
        let t = RigidTransform::from_euler_zyx(0.2, -0.4, 0.1, Vector3::new(0.0, 0.5, -0.1));
        let mut oracle = 0.0;
        for &i in &set.indices {
            for j in idx.row(i) {
                let r = t.rotation() * p.point(*j) + t.translation() - copy.points()[*j];
                oracle += (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            }
        }
        let (v, g) = inlier_neighborhood_with_grad(&set, &t, &idx, &p, &copy);
        assert!((v - oracle).abs() < 1e-12);
        let h = 1e-6;
        for a in 0..3 {
            let mut tp = *t.translation();
            tp[a] += h;
            let mut tm = *t.translation();
            tm[a] -= h;
            let f = |tt| loss_inlier_neighborhood(&set, &RigidTransform::new(*t.rotation(), tt).unwrap(), &idx, &p, &copy);
            assert!(((f(tp) - f(tm)) / (2.0 * h) - g.d_t[a]).abs() < 1e-7);
        }
        for j in 0..20 {
            for a in 0..3 {
                let shift = |s: f64| {
                    let mut pts = copy.points().to_vec();
                    pts[j][a] += s;
                    loss_inlier_neighborhood(&set, &t, &idx, &p, &ReferenceCopy::new(PointCloud::new(pts).unwrap()))
                };
                assert!(((shift(h) - shift(-h)) / (2.0 * h) - g.d_copy[j][a]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn geometric_structure_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cloud(&mut rng, 25);
        let idx = build_neighborhood_index(&p, 5).unwrap();
        let same = ReferenceCopy::new(p.clone());
        let set = all_inliers(&p, &same);
        assert_eq!(loss_geometric_structure(&set, &idx, &p, &same), 0.0);
        let moved = ReferenceCopy::new(apply_transform(
            &RigidTransform::from_translation(Vector3::new(0.4, -1.0, 2.0)),
            &p,
        ));
        assert!(loss_geometric_structure(&set, &idx, &p, &moved) < 1e-12);
        let turned = ReferenceCopy::new(apply_transform(
            &RigidTransform::from_rotation(rot_z(30f64.to_radians())).unwrap(),
            &p,
        ));
        let (v, _) = geometric_structure_with_grad(&set, &idx, &p, &turned);
        // Angles survive the rotation; edges do not.
        let mut angle_part = 0.0;
        for &i in &set.indices {
            let row = idx.row(i);
            let e = |c: &[Point3], k: usize| c[i] - c[row[k]];
            for k in 0..row.len() {
                angle_part += (angle(&e(p.points(), k), &e(p.points(), 0))
                    - angle(&e(turned.points(), k), &e(turned.points(), 0)))
                .abs();
            }
        }
        assert!(angle_part < 1e-9);
        assert!(v > 0.1);
    }

    #[test]
    fn geometric_structure_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_cloud(&mut rng, 12);
        let copy = ReferenceCopy::new(PointCloud::new(
            p.points().iter().map(|x| x + Point3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.1)).collect(),
        ).unwrap());
        let idx = build_neighborhood_index(&p, 3).unwrap();
        let set = select_inliers(&(0..12).map(|i| i as f64).collect::<Vec<_>>(), &p, &copy, 6).unwrap();
        let (_, g) = geometric_structure_with_grad(&set, &idx, &p, &copy);
        let h = 1e-7;
        for j in 0..12 {
            for a in 0..3 {
                let shift = |s: f64| {
                    let mut pts = copy.points().to_vec();
                    pts[j][a] += s;
                    loss_geometric_structure(&set, &idx, &p, &ReferenceCopy::new(PointCloud::new(pts).unwrap()))
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                assert!((fd - g.d_copy[j][a]).abs() < 1e-6, "{j}.{a}: {fd} vs {}", g.d_copy[j][a]);
            }
        }
    }

    #[test]
    fn spatial_consistency_cases() {
        let one_hot = array![[0.0, 1.0, 0.0], [2.0, 0.0, 0.0]];
        assert_eq!(loss_spatial_consistency(&one_hot, &[0, 1]).unwrap(), 0.0);
        let half = array![[0.5, 0.5]];
        let v = loss_spatial_consistency(&half, &[0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let mut last = f64::INFINITY;
        for s in 1..10 {
            let x = 0.1 * s as f64;
            let row = array![[0.4 + x, 0.3 - x / 4.0, 0.3 - x / 4.0]];
            let v = loss_spatial_consistency(&row, &[0]).unwrap();
            assert!(v < last);
            last = v;
        }
        let bad = array![[f64::NAN, 1.0]];
        assert!(matches!(loss_spatial_consistency(&bad, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn spatial_consistency_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Array2::from_shape_fn((5, 6), |_| rng.random_range(0.1..2.0));
        let (_, grad, _) = spatial_consistency_with_grad(&g, &[1, 3, 4]).unwrap();
        let h = 1e-7;
        for i in 0..5 {
            for j in 0..6 {
                let mut a = g.clone();
                a[[i, j]] += h;
                let mut b = g.clone();
                b[[i, j]] -= h;
                let fd = (loss_spatial_consistency(&a, &[1, 3, 4]).unwrap()
                    - loss_spatial_consistency(&b, &[1, 3, 4]).unwrap())
                    / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-6);
            }
        }
    }
}
