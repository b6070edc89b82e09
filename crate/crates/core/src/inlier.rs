//! Per-correspondence inlier confidence from neighborhood geometry.
//!
//! Each source point `p_i` and its soft correspondent `q~_i` are described by
//! the edges to their K neighbors and the angles between those edges. A shared
//! perceptron `f_theta` embeds every edge, the embeddings of the two sides are
//! subtracted, an attention head `f_mu` weighs the K differences, and a
//! bias-free linear map `l` squashes the weighted sum into
//! `w = 1 - tanh(|l(.)|)`. The reference side's neighborhood is the image of
//! the source neighborhood under the correspondence, in the same order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{NeighborhoodIndex, Point3, PointCloud};
use crate::matching::ReferenceCopy;
use crate::nn::Mlp;

pub const THETA_HIDDEN: usize = 16;
pub const MU_HIDDEN: usize = 8;
pub const DEFAULT_CONSISTENCY_DIM: usize = 16;

/// Angle between two vectors, in `[0, pi]`, via `atan2(|u x v|, u . v)`.
/// Zero when either vector is zero.
pub fn angle(u: &Point3, v: &Point3) -> f64 {
    u.cross(v).norm().atan2(u.dot(v))
}

/// Gradient of `g * angle(u, v)` with respect to `u` and `v`. Zero where
/// the vectors are parallel (the angle has a kink there).
pub fn angle_backward(u: &Point3, v: &Point3, g: f64) -> (Point3, Point3) {
    let c = u.cross(v);
    let s = c.norm();
    if s == 0.0 || g == 0.0 {
        return (Point3::zeros(), Point3::zeros());
    }
    let d = u.dot(v);
    let r = s * s + d * d;
    let c_hat = c / s;
    let ds = g * d / r;
    let dd = -g * s / r;
    (v.cross(&c_hat) * ds + v * dd, c_hat.cross(u) * ds + u * dd)
}

/// How each neighbor is presented to `f_theta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InlierMode {
    /// Edge vector plus its angle to the first (nearest) edge; 4 inputs.
    Anchor,
    /// Edge vector plus its angles to all K edges; `3 + K` inputs.
    AllPairs,
    /// Raw neighbor coordinates; 3 inputs.
    Coordinates,
}

impl InlierMode {
    pub fn name(self) -> &'static str {
        match self {
            InlierMode::Anchor => "anchor",
            InlierMode::AllPairs => "all-pairs",
            InlierMode::Coordinates => "coordinates",
        }
    }

    pub fn input_dim(self, k: usize) -> usize {
        match self {
            InlierMode::Anchor => 4,
            InlierMode::AllPairs => 3 + k,
            InlierMode::Coordinates => 3,
        }
    }
}

impl std::str::FromStr for InlierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(InlierMode::Anchor),
            "all-pairs" => Ok(InlierMode::AllPairs),
            "coordinates" => Ok(InlierMode::Coordinates),
            other => Err(Error::Config(format!(
                "unknown inlier mode `{other}` (anchor | all-pairs | coordinates)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometricRepr {
    /// `center - neighbor_k`, nearest neighbor first.
    pub edges: Vec<Point3>,
    pub edge_norms: Vec<f64>,
    /// Angle of each edge to the first edge; `angles[0] = 0`.
    pub angles: Vec<f64>,
    /// The neighbor coordinates themselves, for the coordinate mode.
    pub neighbors: Vec<Point3>,
}

pub fn geometric_repr(center: &Point3, neighbors: &[Point3]) -> Result<GeometricRepr> {
    if neighbors.len() < 2 {
        return Err(Error::Size(format!(
            "geometric representation needs K >= 2, got {}",
            neighbors.len()
        )));
    }
    let edges: Vec<Point3> = neighbors.iter().map(|n| center - n).collect();
    let edge_norms = edges.iter().map(|e| e.norm()).collect();
    let angles = edges.iter().map(|e| angle(e, &edges[0])).collect();
    Ok(GeometricRepr {
        edges,
        edge_norms,
        angles,
        neighbors: neighbors.to_vec(),
    })
}

/// Learnable scalars of `f_theta`, `f_mu` and `l`, flattened in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct InlierNetParams {
    mode: InlierMode,
    k: usize,
    consistency_dim: usize,
    values: Vec<f64>,
}

impl InlierNetParams {
    pub fn theta_mlp(mode: InlierMode, k: usize, cd: usize) -> Mlp {
        Mlp::new(vec![mode.input_dim(k), THETA_HIDDEN, cd], true, false)
    }

    pub fn mu_mlp(cd: usize) -> Mlp {
        Mlp::new(vec![cd, MU_HIDDEN, 1], true, false)
    }

    pub fn param_count(mode: InlierMode, k: usize, cd: usize) -> usize {
        Self::theta_mlp(mode, k, cd).num_params() + Self::mu_mlp(cd).num_params() + cd
    }

    pub fn init(mode: InlierMode, k: usize, consistency_dim: usize, seed: u64) -> Result<Self> {
        Self::check_shape(k, consistency_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Self::theta_mlp(mode, k, consistency_dim).init(&mut rng);
        values.extend(Self::mu_mlp(consistency_dim).init(&mut rng));
        values.extend(Mlp::new(vec![consistency_dim, 1], false, false).init(&mut rng));
        Ok(Self {
            mode,
            k,
            consistency_dim,
            values,
        })
    }

    pub fn from_values(mode: InlierMode, k: usize, consistency_dim: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_shape(k, consistency_dim)?;
        let expected = Self::param_count(mode, k, consistency_dim);
        if values.len() != expected {
            return Err(Error::Config(format!(
                "inlier network needs {expected} parameters, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("inlier parameters".into()));
        }
        Ok(Self {
            mode,
            k,
            consistency_dim,
            values,
        })
    }

    fn check_shape(k: usize, cd: usize) -> Result<()> {
        if k < 2 {
            return Err(Error::Config("inlier network needs K >= 2".into()));
        }
        if cd == 0 {
            return Err(Error::Config("consistency dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> InlierMode {
        self.mode
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn consistency_dim(&self) -> usize {
        self.consistency_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn split(&self) -> (Mlp, Mlp, usize, usize) {
        let theta = Self::theta_mlp(self.mode, self.k, self.consistency_dim);
        let mu = Self::mu_mlp(self.consistency_dim);
        let a = theta.num_params();
        let b = a + mu.num_params();
        (theta, mu, a, b)
    }

    pub fn theta(&self) -> &[f64] {
        let (_, _, a, _) = self.split();
        &self.values[..a]
    }

    pub fn mu(&self) -> &[f64] {
        let (_, _, a, b) = self.split();
        &self.values[a..b]
    }

    pub fn l(&self) -> &[f64] {
        let (_, _, _, b) = self.split();
        &self.values[b..]
    }

    /// `(name, offset, len)` of every block, for reports.
    pub fn blocks(&self) -> Vec<(String, usize, usize)> {
        let (_, _, a, b) = self.split();
        vec![
            ("inlier.theta".into(), 0, a),
            ("inlier.mu".into(), a, b - a),
            ("inlier.l".into(), b, self.values.len() - b),
        ]
    }
}

/// Per-neighbor inputs of `f_theta`, K rows of `mode.input_dim(K)`.
fn encode(mode: InlierMode, center: &Point3, nbrs: &[Point3], out: &mut Vec<f64>) {
    let edges: Vec<Point3> = nbrs.iter().map(|n| center - n).collect();
    for (k, e) in edges.iter().enumerate() {
        match mode {
            InlierMode::Anchor => {
                out.extend(e.iter());
                out.push(angle(e, &edges[0]));
            }
            InlierMode::AllPairs => {
                out.extend(e.iter());
                out.extend(edges.iter().map(|s| angle(e, s)));
            }
            InlierMode::Coordinates => out.extend(nbrs[k].iter()),
        }
    }
}

/// Adjoint of [`encode`]: gradient on the inputs to gradients on the center
/// and on each neighbor.
fn encode_backward(
    mode: InlierMode,
    center: &Point3,
    nbrs: &[Point3],
    dx: &[f64],
) -> (Point3, Vec<Point3>) {
    let k = nbrs.len();
    let dim = mode.input_dim(k);
    let mut d_nbrs = vec![Point3::zeros(); k];
    if mode == InlierMode::Coordinates {
        for (slot, d) in d_nbrs.iter_mut().enumerate() {
            *d = Point3::from_column_slice(&dx[slot * dim..slot * dim + 3]);
        }
        return (Point3::zeros(), d_nbrs);
    }
    let edges: Vec<Point3> = nbrs.iter().map(|n| center - n).collect();
    let mut d_edges = vec![Point3::zeros(); k];
    for slot in 0..k {
        let row = &dx[slot * dim..(slot + 1) * dim];
        d_edges[slot] += Point3::from_column_slice(&row[..3]);
        let partners: Vec<usize> = match mode {
            InlierMode::Anchor => vec![0],
            _ => (0..k).collect(),
        };
        for (col, &s) in partners.iter().enumerate() {
            let (du, dv) = angle_backward(&edges[slot], &edges[s], row[3 + col]);
            d_edges[slot] += du;
            d_edges[s] += dv;
        }
    }
    let mut d_center = Point3::zeros();
    for (dn, de) in d_nbrs.iter_mut().zip(&d_edges) {
        d_center += de;
        *dn = -de;
    }
    (d_center, d_nbrs)
}

pub fn consistency_features(
    repr_p: &GeometricRepr,
    repr_q: &GeometricRepr,
    params: &InlierNetParams,
) -> Result<Vec<Vec<f64>>> {
    let k = repr_p.edges.len();
    if repr_q.edges.len() != k {
        return Err(Error::Contract("representations differ in K".into()));
    }
    if params.mode == InlierMode::AllPairs && params.k != k {
        return Err(Error::Contract(format!(
            "all-pairs network built for K = {}, representation has K = {k}",
            params.k
        )));
    }
    let row = |r: &GeometricRepr| {
        let center = r.neighbors[0] + r.edges[0];
        let mut x = Vec::new();
        encode(params.mode, &center, &r.neighbors, &mut x);
        x
    };
    let (xp, xq) = (row(repr_p), row(repr_q));
    let tape = point_forward(params, &xp, &xq, k);
    Ok(tape
        .d
        .chunks(params.consistency_dim)
        .map(<[f64]>::to_vec)
        .collect())
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - hi).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `delta = softmax(f_mu(d_1), .., f_mu(d_K))`.
pub fn attention_weights(d: &[Vec<f64>], params: &InlierNetParams) -> Vec<f64> {
    let (_, mu, _, _) = params.split();
    let mut trace = vec![0.0; mu.trace_len()];
    let scores: Vec<f64> = d
        .iter()
        .map(|row| {
            let mut out = [0.0];
            mu.forward(params.mu(), row, &mut trace, &mut out);
            out[0]
        })
        .collect();
    softmax(&scores)
}

/// `w = 1 - tanh(|l . sum_k delta_k d_k|)`.
pub fn inlier_confidence(d: &[Vec<f64>], delta: &[f64], l: &[f64]) -> f64 {
    let mut v = vec![0.0; l.len()];
    for (row, &dk) in d.iter().zip(delta) {
        for (a, b) in v.iter_mut().zip(row) {
            *a += dk * b;
        }
    }
    let z: f64 = l.iter().zip(&v).map(|(a, b)| a * b).sum();
    confidence(z)
}

/// `1 - tanh(|z|)` written as `2e / (1 + e)` with `e = exp(-2|z|)`, which
/// stays positive long after `tanh` rounds to 1.
fn confidence(z: f64) -> f64 {
    let e = (-2.0 * z.abs()).exp();
    (2.0 * e / (1.0 + e)).max(f64::MIN_POSITIVE)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InlierSet {
    /// Source indices, highest confidence first.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// `(p_h, q~_h)` for each selected index.
    pub pairs: Vec<(Point3, Point3)>,
}

impl InlierSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The `n_c` largest weights; equal weights go to the lower index first.
pub fn select_inliers(
    weights: &[f64],
    p: &PointCloud,
    copy: &ReferenceCopy,
    n_c: usize,
) -> Result<InlierSet> {
    let n = weights.len();
    if p.len() != n || copy.points().len() != n {
        return Err(Error::Contract("weights, cloud and copy differ in length".into()));
    }
    if n_c == 0 || n_c > n {
        return Err(Error::Size(format!("cannot select {n_c} inliers out of {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(n_c);
    Ok(InlierSet {
        weights: order.iter().map(|&i| weights[i]).collect(),
        pairs: order.iter().map(|&i| (*p.point(i), copy.points()[i])).collect(),
        indices: order,
    })
}

/// Activations of one point's scoring, kept for reverse mode.
#[derive(Clone, Debug)]
struct PointTape {
    trace_p: Vec<f64>,
    trace_q: Vec<f64>,
    d: Vec<f64>,
    trace_mu: Vec<f64>,
    delta: Vec<f64>,
    v: Vec<f64>,
    z: f64,
    w: f64,
}

fn point_forward(params: &InlierNetParams, xp: &[f64], xq: &[f64], k: usize) -> PointTape {
    let (theta, mu, _, _) = params.split();
    let cd = params.consistency_dim;
    let (dim, tl, tm) = (theta.input_dim(), theta.trace_len(), mu.trace_len());
    let mut trace_p = vec![0.0; k * tl];
    let mut trace_q = vec![0.0; k * tl];
    let mut trace_mu = vec![0.0; k * tm];
    let mut d = vec![0.0; k * cd];
    let mut hp = vec![0.0; cd];
    let mut hq = vec![0.0; cd];
    let mut scores = vec![0.0; k];
    for slot in 0..k {
        let r = slot * dim..(slot + 1) * dim;
        let t = slot * tl..(slot + 1) * tl;
        theta.forward(params.theta(), &xp[r.clone()], &mut trace_p[t.clone()], &mut hp);
        theta.forward(params.theta(), &xq[r], &mut trace_q[t], &mut hq);
        let dk = &mut d[slot * cd..(slot + 1) * cd];
        for c in 0..cd {
            dk[c] = hp[c] - hq[c];
        }
        let mut out = [0.0];
        mu.forward(params.mu(), dk, &mut trace_mu[slot * tm..(slot + 1) * tm], &mut out);
        scores[slot] = out[0];
    }
    let delta = softmax(&scores);
    let mut v = vec![0.0; cd];
    for slot in 0..k {
        for c in 0..cd {
            v[c] += delta[slot] * d[slot * cd + c];
        }
    }
    let z: f64 = params.l().iter().zip(&v).map(|(a, b)| a * b).sum();
    PointTape {
        trace_p,
        trace_q,
        d,
        trace_mu,
        delta,
        v,
        z,
        w: confidence(z),
    }
}

/// Accumulates parameter gradients of `dw * w` and returns the gradients on
/// the two input blocks.
fn point_backward(
    params: &InlierNetParams,
    tape: &PointTape,
    dw: f64,
    d_params: &mut [f64],
    flip_l: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (theta, mu, a, b) = params.split();
    let cd = params.consistency_dim;
    let k = tape.delta.len();
    let (dim, tl, tm) = (theta.input_dim(), theta.trace_len(), mu.trace_len());
    let mut dxp = vec![0.0; k * dim];
    let mut dxq = vec![0.0; k * dim];
    if tape.z == 0.0 {
        return (dxp, dxq);
    }
    // d(1 - tanh x)/dx = -(1 - tanh x)(1 + tanh x) = -w (2 - w).
    let dz = -dw * tape.w * (2.0 - tape.w) * tape.z.signum();
    if dz == 0.0 {
        return (dxp, dxq);
    }
    let (d_theta, rest) = d_params.split_at_mut(a);
    let (d_mu, d_l) = rest.split_at_mut(b - a);
    let l = params.l();
    let sign_l = if flip_l { -1.0 } else { 1.0 };
    for (d, v) in d_l.iter_mut().zip(&tape.v) {
        *d += sign_l * dz * v;
    }
    let dv: Vec<f64> = l.iter().map(|&lc| dz * lc).collect();
    // Attention softmax.
    let d_delta: Vec<f64> = (0..k)
        .map(|s| (0..cd).map(|c| dv[c] * tape.d[s * cd + c]).sum())
        .collect();
    let dot: f64 = tape.delta.iter().zip(&d_delta).map(|(a, b)| a * b).sum();
    let mut dd = vec![0.0; cd];
    for (slot, (&delta, &d_slot)) in tape.delta.iter().zip(&d_delta).enumerate() {
        let ds = delta * (d_slot - dot);
        for (d, v) in dd.iter_mut().zip(&dv) {
            *d = delta * v;
        }
        mu.backward(
            params.mu(),
            &tape.trace_mu[slot * tm..(slot + 1) * tm],
            &[ds],
            d_mu,
            Some(&mut dd),
        );
        let tr = slot * tl..(slot + 1) * tl;
        let xr = slot * dim..(slot + 1) * dim;
        theta.backward(params.theta(), &tape.trace_p[tr.clone()], &dd, d_theta, Some(&mut dxp[xr.clone()]));
        let neg: Vec<f64> = dd.iter().map(|v| -v).collect();
        theta.backward(params.theta(), &tape.trace_q[tr], &neg, d_theta, Some(&mut dxq[xr]));
    }
    (dxp, dxq)
}

/// Everything [`score_backward`] needs from one [`score_all`] call.
#[derive(Clone, Debug)]
pub struct ScoreTape {
    k: usize,
    neighbors: Vec<usize>,
    p: Vec<Point3>,
    q: Vec<Point3>,
    points: Vec<PointTape>,
}

impl ScoreTape {
    /// Feeds every branch decision of the forward pass (activation signs and
    /// the sign of each confidence input) to `state`.
    pub fn hash_routing<H: std::hash::Hasher>(&self, state: &mut H) {
        for t in &self.points {
            for v in t.trace_p.iter().chain(&t.trace_q).chain(&t.trace_mu) {
                state.write_u8(sign_code(*v));
            }
            state.write_u8(sign_code(t.z));
        }
    }
}

pub(crate) fn sign_code(v: f64) -> u8 {
    if v > 0.0 {
        2
    } else if v < 0.0 {
        0
    } else {
        1
    }
}

#[derive(Clone, Debug)]
pub struct InlierGrads {
    pub params: Vec<f64>,
    pub p: Vec<Point3>,
    pub q: Vec<Point3>,
}

pub fn score_all(
    p: &PointCloud,
    copy: &ReferenceCopy,
    idx_p: &NeighborhoodIndex,
    params: &InlierNetParams,
) -> Result<(Vec<f64>, ScoreTape)> {
    let n = p.len();
    let k = idx_p.k();
    if copy.points().len() != n || idx_p.len() != n {
        return Err(Error::Contract("cloud, copy and index differ in size".into()));
    }
    if k < 2 {
        return Err(Error::Size("inlier scoring needs K >= 2".into()));
    }
    if params.mode == InlierMode::AllPairs && params.k != k {
        return Err(Error::Contract(format!(
            "all-pairs network built for K = {}, index has K = {k}",
            params.k
        )));
    }
    let q = copy.points();
    let points: Vec<PointTape> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = idx_p.row(i);
            let np: Vec<Point3> = row.iter().map(|&j| *p.point(j)).collect();
            let nq: Vec<Point3> = row.iter().map(|&j| q[j]).collect();
            let mut xp = Vec::new();
            let mut xq = Vec::new();
            encode(params.mode, p.point(i), &np, &mut xp);
            encode(params.mode, &q[i], &nq, &mut xq);
            point_forward(params, &xp, &xq, k)
        })
        .collect();
    let w = points.iter().map(|t| t.w).collect();
    Ok((
        w,
        ScoreTape {
            k,
            neighbors: (0..n).flat_map(|i| idx_p.row(i).to_vec()).collect(),
            p: p.points().to_vec(),
            q: q.to_vec(),
            points,
        },
    ))
}

/// Gradients of `sum_i dw_i * w_i`.
pub fn score_backward(tape: &ScoreTape, params: &InlierNetParams, dw: &[f64]) -> Result<InlierGrads> {
    score_backward_impl(tape, params, dw, false)
}

/// `flip_l` negates the gradient reaching the confidence head; used only to
/// check that the gradient checker catches a broken path.
pub(crate) fn score_backward_impl(
    tape: &ScoreTape,
    params: &InlierNetParams,
    dw: &[f64],
    flip_l: bool,
) -> Result<InlierGrads> {
    let n = tape.points.len();
    if dw.len() != n {
        return Err(Error::Contract(format!("{} weight gradients for {n} points", dw.len())));
    }
    let k = tape.k;
    let mut d_params = vec![0.0; params.len()];
    let mut dp = vec![Point3::zeros(); n];
    let mut dq = vec![Point3::zeros(); n];
    for i in 0..n {
        if dw[i] == 0.0 {
            continue;
        }
        let (dxp, dxq) = point_backward(params, &tape.points[i], dw[i], &mut d_params, flip_l);
        let row = &tape.neighbors[i * k..(i + 1) * k];
        for (pts, dx, out) in [(&tape.p, dxp, &mut dp), (&tape.q, dxq, &mut dq)] {
            let nbrs: Vec<Point3> = row.iter().map(|&j| pts[j]).collect();
            let (dc, dn) = encode_backward(params.mode, &pts[i], &nbrs, &dx);
            out[i] += dc;
            for (&j, d) in row.iter().zip(dn) {
                out[j] += d;
            }
        }
    }
    Ok(InlierGrads {
        params: d_params,
        p: dp,
        q: dq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, build_neighborhood_index, RigidTransform};
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rand_point(rng: &mut ChaCha8Rng) -> Point3 {
        Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| rand_point(rng)).collect()).unwrap()
    }

    fn random_motion(rng: &mut ChaCha8Rng) -> RigidTransform {
        RigidTransform::from_euler_zyx(
            rng.random_range(-PI..PI),
            rng.random_range(-FRAC_PI_2..FRAC_PI_2),
            rng.random_range(-PI..PI),
            rand_point(rng),
        )
    }

    #[test]
    fn angle_cases() {
        let x = Point3::x();
        assert!((angle(&x, &Point3::y()) - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(angle(&x, &Point3::new(2.0, 0.0, 0.0)), 0.0);
        let a = angle(&x, &Point3::new(-1.0, 1e-12, 0.0));
        assert!(a < PI && (PI - a) < 1e-6);
        assert_eq!(angle(&Point3::zeros(), &x), 0.0);
        assert_eq!(angle(&x, &x), 0.0);
    }

    #[test]
    fn angle_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let u = rand_point(&mut rng);
            let v = rand_point(&mut rng);
            let (du, dv) = angle_backward(&u, &v, 1.0);
            let h = 1e-6;
            for c in 0..3 {
                let mut e = Point3::zeros();
                e[c] = h;
                let fu = (angle(&(u + e), &v) - angle(&(u - e), &v)) / (2.0 * h);
                let fv = (angle(&u, &(v + e)) - angle(&u, &(v - e))) / (2.0 * h);
                assert!((fu - du[c]).abs() < 1e-7);
                assert!((fv - dv[c]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn repr_by_hand() {
        let r = geometric_repr(&Point3::zeros(), &[Point3::x(), Point3::y()]).unwrap();
        assert_eq!(r.edges, vec![-Point3::x(), -Point3::y()]);
        assert_eq!(r.angles[0], 0.0);
        assert!((r.angles[1] - FRAC_PI_2).abs() < 1e-15);
        let line: Vec<Point3> = (1..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let r = geometric_repr(&Point3::zeros(), &line).unwrap();
        assert!(r.angles.iter().all(|&a| a == 0.0));
        assert!(matches!(geometric_repr(&Point3::zeros(), &line[..1]), Err(Error::Size(_))));
    }

    #[test]
    fn repr_invariance_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let c = rand_point(&mut rng);
            let nbrs: Vec<Point3> = (0..6).map(|_| rand_point(&mut rng)).collect();
            let t = random_motion(&mut rng);
            let a = geometric_repr(&c, &nbrs).unwrap();
            let moved: Vec<Point3> = nbrs.iter().map(|p| t.apply(p)).collect();
            let b = geometric_repr(&t.apply(&c), &moved).unwrap();
            for k in 0..6 {
                assert!((a.edge_norms[k] - b.edge_norms[k]).abs() < 1e-10);
                assert!((a.angles[k] - b.angles[k]).abs() < 1e-10);
                assert!((t.rotation() * a.edges[k] - b.edges[k]).norm() < 1e-10);
            }
        }
    }

    fn params(mode: InlierMode, k: usize, seed: u64) -> InlierNetParams {
        let mut p = InlierNetParams::init(mode, k, 6, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in p.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        p
    }

    #[test]
    fn identical_reprs_give_zero_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = rand_point(&mut rng);
        let nbrs: Vec<Point3> = (0..4).map(|_| rand_point(&mut rng)).collect();
        let r = geometric_repr(&c, &nbrs).unwrap();
        let d = consistency_features(&r, &r, &params(InlierMode::Anchor, 4, 1)).unwrap();
        assert!(d.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_theta_difference_is_local_and_linear() {
        // f_theta with identity-like weights and no rectification in play:
        // hidden 16 <- input 4 copies the input into the first 4 units; the
        // output takes them back. Inputs are kept positive.
        let k = 3;
        let cd = 4;
        let mut values = vec![0.0; InlierNetParams::param_count(InlierMode::Anchor, k, cd)];
        for r in 0..4 {
            values[r * 4 + r] = 1.0;
        }
        let second = 16 * 4 + 16;
        for r in 0..4 {
            values[second + r * 16 + r] = 1.0;
        }
        let params = InlierNetParams::from_values(InlierMode::Anchor, k, cd, values).unwrap();
        let c = Point3::new(3.0, 3.0, 3.0);
        let nbrs = vec![
            Point3::new(2.0, 2.5, 2.7),
            Point3::new(2.5, 2.0, 2.9),
            Point3::new(2.8, 2.6, 2.0),
        ];
        let base = geometric_repr(&c, &nbrs).unwrap();
        let mut prev = 0.0;
        for step in 1..4 {
            let delta = 0.01 * step as f64;
            let mut moved = nbrs.clone();
            moved[2].y -= delta;
            let other = geometric_repr(&c, &moved).unwrap();
            let d = consistency_features(&other, &base, &params).unwrap();
            assert!(d[0].iter().chain(&d[1]).all(|&v| v == 0.0));
            assert!((d[2][1] - delta).abs() < 1e-12);
            assert!(d[2][1] > prev);
            prev = d[2][1];
        }
    }

    #[test]
    fn swapping_neighbor_order_permutes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = rand_point(&mut rng);
        let np: Vec<Point3> = (0..4).map(|_| rand_point(&mut rng)).collect();
        let nq: Vec<Point3> = (0..4).map(|_| rand_point(&mut rng)).collect();
        let prm = params(InlierMode::Anchor, 4, 2);
        let d = consistency_features(
            &geometric_repr(&c, &np).unwrap(),
            &geometric_repr(&c, &nq).unwrap(),
            &prm,
        )
        .unwrap();
        // Keep the anchor in place so the angles are unchanged.
        let swap = |v: &[Point3]| vec![v[0], v[2], v[1], v[3]];
        let ds = consistency_features(
            &geometric_repr(&c, &swap(&np)).unwrap(),
            &geometric_repr(&c, &swap(&nq)).unwrap(),
            &prm,
        )
        .unwrap();
        assert_eq!(d[1], ds[2]);
        assert_eq!(d[2], ds[1]);
        assert_eq!(d[3], ds[3]);
    }

    #[test]
    fn attention_cases() {
        let prm = params(InlierMode::Anchor, 3, 5);
        let rows = vec![vec![0.3; 6]; 3];
        let delta = attention_weights(&rows, &prm);
        assert!(delta.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[0.0, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let t = softmax(&[7.0, 7.0 + 3f64.ln()]);
        assert!((s[0] - t[0]).abs() < 1e-12);
    }

    #[test]
    fn confidence_cases() {
        let zero = vec![vec![0.0; 2]; 3];
        assert_eq!(inlier_confidence(&zero, &[0.2, 0.3, 0.5], &[1.5, -2.0]), 1.0);
        let d = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let w = inlier_confidence(&d, &[0.5, 0.5], &[1.0, 7.0]);
        assert!((w - 0.238_405_844_044_234).abs() < 1e-12);
        let big = vec![vec![10.0, 0.0], vec![10.0, 0.0]];
        assert!(inlier_confidence(&big, &[0.5, 0.5], &[1.0, 7.0]) < w);
    }

    #[test]
    fn selection_cases() {
        let p = PointCloud::from_arrays(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let copy = ReferenceCopy::new(p.clone());
        let s = select_inliers(&[0.9, 0.1, 0.9], &p, &copy, 2).unwrap();
        assert_eq!(s.indices, vec![0, 2]);
        let all = select_inliers(&[0.2, 0.7, 0.5], &p, &copy, 3).unwrap();
        assert_eq!(all.indices, vec![1, 2, 0]);
        assert_eq!(all.weights, vec![0.7, 0.5, 0.2]);
        assert_eq!(all.pairs[0], (*p.point(1), *p.point(1)));
        assert!(matches!(select_inliers(&[0.2, 0.7, 0.5], &p, &copy, 4), Err(Error::Size(_))));
    }

    #[test]
    fn selection_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100;
        let p = random_cloud(&mut rng, n);
        let copy = ReferenceCopy::new(p.clone());
        let w: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut oracle: Vec<(f64, usize)> = w.iter().copied().zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let top: Vec<usize> = oracle[..n / 2].iter().map(|x| x.1).collect();
        assert_eq!(select_inliers(&w, &p, &copy, n / 2).unwrap().indices, top);
    }

    #[test]
    fn perfect_copy_scores_one_and_a_displaced_point_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_cloud(&mut rng, 40);
        let idx = build_neighborhood_index(&p, 4).unwrap();
        for mode in [InlierMode::Anchor, InlierMode::AllPairs, InlierMode::Coordinates] {
            let prm = params(mode, 4, 8);
            let (w, _) = score_all(&p, &ReferenceCopy::new(p.clone()), &idx, &prm).unwrap();
            assert!(w.iter().all(|&v| v == 1.0));
            let mut moved = p.points().to_vec();
            moved[5] += Vector3::new(3.0, -2.0, 1.0);
            let copy = ReferenceCopy::new(PointCloud::new(moved).unwrap());
            let (w, _) = score_all(&p, &copy, &idx, &prm).unwrap();
            for (i, &wi) in w.iter().enumerate() {
                // The coordinate mode never looks at the center point itself.
                let own = i == 5 && mode != InlierMode::Coordinates;
                let touched = own || idx.row(i).contains(&5);
                if touched {
                    assert!(wi < 1.0, "{mode:?} point {i}");
                } else {
                    assert_eq!(wi, 1.0);
                }
            }
        }
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [InlierMode::Anchor, InlierMode::AllPairs, InlierMode::Coordinates] {
            let p = random_cloud(&mut rng, 8);
            let q = PointCloud::new(
                p.points().iter().map(|x| x + rand_point(&mut rng) * 0.2).collect(),
            )
            .unwrap();
            let idx = build_neighborhood_index(&p, 3).unwrap();
            let prm = params(mode, 3, 10);
            let wt: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
            let objective = |prm: &InlierNetParams, p: &PointCloud, q: &PointCloud| -> f64 {
                let (w, _) = score_all(p, &ReferenceCopy::new(q.clone()), &idx, prm).unwrap();
                w.iter().zip(&wt).map(|(a, b)| a * b).sum()
            };
            let (_, tape) = score_all(&p, &ReferenceCopy::new(q.clone()), &idx, &prm).unwrap();
            let g = score_backward(&tape, &prm, &wt).unwrap();
            let h = 1e-6;
            let check = |a: f64, fd: f64, what: String| {
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
                assert!(rel < 1e-4, "{mode:?} {what}: {a} vs {fd}");
            };
            for i in 0..prm.len() {
                let mut a = prm.clone();
                a.values_mut()[i] += h;
                let mut b = prm.clone();
                b.values_mut()[i] -= h;
                check(g.params[i], (objective(&a, &p, &q) - objective(&b, &p, &q)) / (2.0 * h), format!("param {i}"));
            }
            let shift = |c: &PointCloud, i: usize, a: usize, s: f64| {
                let mut pts = c.points().to_vec();
                pts[i][a] += s;
                PointCloud::new(pts).unwrap()
            };
            for i in 0..8 {
                for a in 0..3 {
                    let fp = (objective(&prm, &shift(&p, i, a, h), &q) - objective(&prm, &shift(&p, i, a, -h), &q)) / (2.0 * h);
                    check(g.p[i][a], fp, format!("p[{i}][{a}]"));
                    let fq = (objective(&prm, &p, &shift(&q, i, a, h)) - objective(&prm, &p, &shift(&q, i, a, -h))) / (2.0 * h);
                    check(g.q[i][a], fq, format!("q[{i}][{a}]"));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_are_in_unit_interval(seed in any::<u64>(), scale in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_cloud(&mut rng, 12);
            let q = PointCloud::new(p.points().iter().map(|x| x + rand_point(&mut rng) * scale).collect()).unwrap();
            let idx = build_neighborhood_index(&p, 3).unwrap();
            let prm = params(InlierMode::Anchor, 3, seed % 17);
            let (w, _) = score_all(&p, &ReferenceCopy::new(q), &idx, &prm).unwrap();
            prop_assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn selection_is_invariant_to_monotone_rescaling(seed in any::<u64>(), a in 0.1f64..10.0, e in 0.2f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_cloud(&mut rng, 30);
            let copy = ReferenceCopy::new(p.clone());
            let w: Vec<f64> = (0..30).map(|_| (rng.random_range(0..8) as f64 + 1.0) / 8.0).collect();
            let w2: Vec<f64> = w.iter().map(|v| a * v.powf(e)).collect();
            let s1 = select_inliers(&w, &p, &copy, 15).unwrap();
            let s2 = select_inliers(&w2, &p, &copy, 15).unwrap();
            prop_assert_eq!(s1.indices, s2.indices);
        }

        #[test]
        fn attention_is_a_distribution(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prm = params(InlierMode::Anchor, 5, seed % 13);
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.random_range(-scale..scale)).collect()).collect();
            let d = attention_weights(&rows, &prm);
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn common_translation_keeps_weights() {
        // Edges and angles do not see a translation applied to both sides.
        // A rotation is not a symmetry: the raw edge vectors rotate with it.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_cloud(&mut rng, 20);
        let q = PointCloud::new(p.points().iter().map(|x| x + rand_point(&mut rng) * 0.1).collect()).unwrap();
        let idx = build_neighborhood_index(&p, 4).unwrap();
        let prm = params(InlierMode::Anchor, 4, 12);
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, -3.0));
        let (w1, _) = score_all(&p, &ReferenceCopy::new(q.clone()), &idx, &prm).unwrap();
        let (w2, _) = score_all(&apply_transform(&t, &p), &ReferenceCopy::new(apply_transform(&t, &q)), &idx, &prm).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
