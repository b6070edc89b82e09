//! Closed-form weighted rigid alignment with exact reverse mode, and the
//! iterative registration driver built on it.

mod pipeline;

pub use pipeline::{
    forward_iteration, register, register_with, CloudState, IterationReport, IterationTrace, MatchingSummary, Model,
    PipelineConfig, ReferenceState, RegistrationResult,
};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::svd3::svd3;
use crate::geometry::{Point3, RigidTransform};

/// Below this, `sigma'_i + sigma'_j` makes the rotation non-differentiable.
pub const SPECTRUM_GAP: f64 = 1e-8;
/// `sigma_2 / sigma_1` below this means the pairs are (nearly) collinear and
/// the rotation about their line is undetermined.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveResult {
    pub transform: RigidTransform,
    /// `sqrt(sum_i w_i |R p_i + t - q_i|^2 / sum_i w_i)`.
    pub residual: f64,
}

/// Forward state of [`weighted_svd_taped`] needed by the backward pass.
#[derive(Clone, Debug)]
pub struct SvdTape {
    p: Vec<Point3>,
    q: Vec<Point3>,
    w: Vec<f64>,
    w_sum: f64,
    p_bar: Point3,
    q_bar: Point3,
    u: Matrix3<f64>,
    /// `(sigma_1, sigma_2, s * sigma_3)` with `s = det(V U^T)`.
    sigma_signed: Vector3<f64>,
    r: Matrix3<f64>,
}

impl SvdTape {
    /// Whether the solve flipped the last axis to avoid a reflection.
    pub fn reflected(&self) -> bool {
        self.sigma_signed[2] < 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdGrads {
    pub p: Vec<Point3>,
    pub q: Vec<Point3>,
    pub w: Vec<f64>,
}

pub fn weighted_svd(pairs: &[(Point3, Point3)], weights: &[f64]) -> Result<SolveResult> {
    weighted_svd_taped(pairs, weights).map(|(s, _)| s)
}

/// Minimizes `sum_i w_i |R p_i + t - q_i|^2` over rotations `R` and
/// translations `t`.
pub fn weighted_svd_taped(
    pairs: &[(Point3, Point3)],
    weights: &[f64],
) -> Result<(SolveResult, SvdTape)> {
    if pairs.len() < 3 {
        return Err(Error::Size(format!(
            "weighted SVD needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    if weights.len() != pairs.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} pairs",
            weights.len(),
            pairs.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::DegenerateWeights(format!("weight {w} is not a finite non-negative number")));
    }
    let w_sum: f64 = weights.iter().sum();
    if w_sum <= 0.0 {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    let p_bar = pairs
        .iter()
        .zip(weights)
        .fold(Point3::zeros(), |acc, ((p, _), w)| acc + p * *w)
        / w_sum;
    let q_bar = pairs
        .iter()
        .zip(weights)
        .fold(Point3::zeros(), |acc, ((_, q), w)| acc + q * *w)
        / w_sum;
    let mut h = Matrix3::<f64>::zeros();
    for ((p, q), &w) in pairs.iter().zip(weights) {
        h += ((p - p_bar) * w) * (q - q_bar).transpose();
    }
    let svd = svd3(&h);
    let s = (svd.v * svd.u.transpose()).determinant().signum();
    let r = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, s)) * svd.u.transpose();
    let t = q_bar - r * p_bar;
    let transform = RigidTransform::new_reorthonormalized(r, t);
    let residual = (pairs
        .iter()
        .zip(weights)
        .map(|((p, q), w)| w * (transform.apply(p) - q).norm_squared())
        .sum::<f64>()
        / w_sum)
        .sqrt();
    let result = SolveResult {
        transform,
        residual,
    };
    if svd.sigma[1] <= RANK_TOL * svd.sigma[0] || svd.sigma[0] == 0.0 {
        return Err(Error::DegenerateGeometry {
            reason: format!(
                "cross-covariance has rank < 2 (singular values {:.3e}, {:.3e}, {:.3e}); \
                 the weighted points are collinear or coincident",
                svd.sigma[0], svd.sigma[1], svd.sigma[2]
            ),
            best_effort: Box::new(transform),
        });
    }
    let tape = SvdTape {
        p: pairs.iter().map(|x| x.0).collect(),
        q: pairs.iter().map(|x| x.1).collect(),
        w: weights.to_vec(),
        w_sum,
        p_bar,
        q_bar,
        u: svd.u,
        sigma_signed: Vector3::new(svd.sigma[0], svd.sigma[1], s * svd.sigma[2]),
        r: *transform.rotation(),
    };
    Ok((result, tape))
}

/// Gradients of `<d_r, R> + <d_t, t>` with respect to every `p_i`, `q_i`
/// and `w_i`.
///
/// `R` is the special-orthogonal polar factor of `M = H^T = R P`, with
/// `P = U diag(sigma') U^T`. Perturbing `M = R P` and solving for the skew
/// part of `R^T dR` in the eigenbasis of `P` gives
/// `dL/dM = R (Z - Z^T)`, `Z = U Y U^T`,
/// `Y_ij = (U^T R^T d_r U)_ij / (sigma'_i + sigma'_j)`.
pub fn weighted_svd_backward(tape: &SvdTape, d_r: &Matrix3<f64>, d_t: &Vector3<f64>) -> Result<SvdGrads> {
    let sg = tape.sigma_signed;
    let mut gap = f64::INFINITY;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        gap = gap.min((sg[i] + sg[j]).abs());
    }
    if gap < SPECTRUM_GAP {
        return Err(Error::DegenerateSpectrum {
            gap,
            threshold: SPECTRUM_GAP,
        });
    }
    let r = tape.r;
    // The translation t = q_bar - R p_bar also depends on R.
    let g_r = d_r - d_t * tape.p_bar.transpose();
    let x = tape.u.transpose() * r.transpose() * g_r * tape.u;
    let mut y = Matrix3::<f64>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                y[(i, j)] = x[(i, j)] / (sg[i] + sg[j]);
            }
        }
    }
    let z = tape.u * y * tape.u.transpose();
    let g_h = (r * (z - z.transpose())).transpose();

    let rt_dt = r.transpose() * d_t;
    let n = tape.p.len();
    let mut grads = SvdGrads {
        p: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (w, dp, dq) = (tape.w[i], tape.p[i] - tape.p_bar, tape.q[i] - tape.q_bar);
        let share = w / tape.w_sum;
        grads.p.push(g_h * dq * w - rt_dt * share);
        grads.q.push(g_h.transpose() * dp * w + d_t * share);
        grads.w.push(dp.dot(&(g_h * dq)) + (dq.dot(d_t) - dp.dot(&rt_dt)) / tape.w_sum);
    }
    Ok(grads)
}

/// Point-to-point ICP from `init`, with unit weights: alternately pairs
/// every source point with its nearest reference point and re-solves. Used
/// only as an independent oracle in tests.
pub fn icp(
    p: &crate::geometry::PointCloud,
    q: &crate::geometry::PointCloud,
    init: &RigidTransform,
    max_iterations: usize,
) -> Result<RigidTransform> {
    let tree = crate::geometry::KdTree::build(q.points());
    let mut t = *init;
    let ones = vec![1.0; p.len()];
    for _ in 0..max_iterations {
        let pairs: Vec<(Point3, Point3)> = p
            .points()
            .iter()
            .map(|x| {
                let (j, _) = tree.nearest(&t.apply(x), None).expect("non-empty reference");
                (*x, q.points()[j])
            })
            .collect();
        let next = weighted_svd(&pairs, &ones)?.transform;
        let done = next == t;
        t = next;
        if done {
            break;
        }
    }
    Ok(t)
}
