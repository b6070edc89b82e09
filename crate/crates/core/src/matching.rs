//! Soft correspondence between a source and a reference cloud.
//!
//! Feature distances become row-stochastic score maps for the clouds
//! themselves (`M`) and for their 1-NN clouds (`M_hat`). Scores are summed
//! over the neighborhoods of both endpoints into a fused map `G`, which
//! modulates the combined distances before the final softmax `F`. The
//! reference copy places one soft correspondent per source point at the
//! `F`-weighted barycenter of the reference cloud.

use std::io::Write;

use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::geometry::{NeighborhoodIndex, Point3, PointCloud};

/// Normalization of the fused neighborhood sums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionNorm {
    /// `1/K` in front of the `K x K` double sum; keeps `G` in `[0, 2]`.
    PerNeighborhood,
    /// `1/K^2`, a plain average over the double sum; `G` in `[0, 2/K]`.
    PerPair,
}

impl FusionNorm {
    pub fn name(self) -> &'static str {
        match self {
            FusionNorm::PerNeighborhood => "k",
            FusionNorm::PerPair => "k2",
        }
    }

    fn scale(self, k: usize) -> f64 {
        match self {
            FusionNorm::PerNeighborhood => 1.0 / k as f64,
            FusionNorm::PerPair => 1.0 / (k * k) as f64,
        }
    }
}

impl std::str::FromStr for FusionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" => Ok(FusionNorm::PerNeighborhood),
            "k2" => Ok(FusionNorm::PerPair),
            other => Err(Error::Config(format!("unknown fusion norm `{other}` (k | k2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingConfig {
    /// Offset inside `exp(alpha - G)`; larger values sharpen `F`.
    pub alpha: f64,
    pub norm: FusionNorm,
    /// Use the 1-NN clouds. When false, `M_hat` and `D_hat` drop out of the
    /// fusion and of the final map.
    pub dual: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            norm: FusionNorm::PerNeighborhood,
            dual: true,
        }
    }
}

/// The four feature matrices and neighborhood graphs one matching step reads.
#[derive(Clone, Copy)]
pub struct MatchingInputs<'a> {
    pub fp: &'a FeatureMatrix,
    pub fq: &'a FeatureMatrix,
    pub fp_hat: &'a FeatureMatrix,
    pub fq_hat: &'a FeatureMatrix,
    pub idx_p: &'a NeighborhoodIndex,
    pub idx_q: &'a NeighborhoodIndex,
    pub idx_p_hat: &'a NeighborhoodIndex,
    pub idx_q_hat: &'a NeighborhoodIndex,
}

/// Every intermediate of one matching step. The distance matrices are kept
/// for reverse mode.
#[derive(Clone, Debug)]
pub struct MatchingMap {
    pub d: Array2<f64>,
    pub d_hat: Array2<f64>,
    pub m: Array2<f64>,
    pub m_hat: Array2<f64>,
    pub g: Array2<f64>,
    /// `exp(alpha - G) * (D + D_hat)`.
    pub d_prime: Array2<f64>,
    pub f: Array2<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct ReferenceCopy {
    points: PointCloud,
    source_size: usize,
}

impl ReferenceCopy {
    pub fn new(points: PointCloud) -> Self {
        let source_size = points.len();
        Self {
            points,
            source_size,
        }
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.points
    }

    pub fn points(&self) -> &[Point3] {
        self.points.points()
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }
}

pub fn pairwise_distance(fa: &FeatureMatrix, fb: &FeatureMatrix) -> Result<Array2<f64>> {
    if fa.dim() != fb.dim() {
        return Err(Error::Contract(format!(
            "feature dimensions differ: {} vs {}",
            fa.dim(),
            fb.dim()
        )));
    }
    let (a, b) = (fa.values(), fb.values());
    let mut out = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let ai = a.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = ai
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
            }
        });
    Ok(out)
}

/// Row-wise `softmax(-x)`, shifted by the row minimum.
fn softmax_neg_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    out.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.mapv_inplace(|v| (lo - v).exp());
        let s = row.sum();
        row /= s;
    });
    out
}

/// Reverse mode of `y = softmax(-x)` per row.
fn softmax_neg_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::<f64>::zeros(y.dim());
    Zip::from(dx.rows_mut())
        .and(y.rows())
        .and(dy.rows())
        .par_for_each(|mut dx, y, dy| {
            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
            for ((o, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
                *o = -yv * (g - dot);
            }
        });
    dx
}

pub fn matching_scores(d: &Array2<f64>) -> Array2<f64> {
    softmax_neg_rows(d)
}

fn check_graph(idx: &NeighborhoodIndex, n: usize, k: usize, what: &str) -> Result<()> {
    if idx.len() != n {
        return Err(Error::Contract(format!(
            "{what} index covers {} points, map needs {n}",
            idx.len()
        )));
    }
    if idx.k() != k {
        return Err(Error::Contract(format!(
            "{what} index has K = {}, expected {k}",
            idx.k()
        )));
    }
    Ok(())
}

/// `scale * sum_{i' in N(p_i)} sum_{j' in N(q_j)} m[i', j']`.
fn neighborhood_sum(
    m: &Array2<f64>,
    idx_p: &NeighborhoodIndex,
    idx_q: &NeighborhoodIndex,
    scale: f64,
) -> Array2<f64> {
    let (n, cols) = m.dim();
    // Inner sum over the reference neighborhoods, one source row at a time.
    let mut inner = Array2::<f64>::zeros((n, cols));
    Zip::from(inner.rows_mut())
        .and(m.rows())
        .par_for_each(|mut out, row| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = idx_q.row(j).iter().map(|&jj| row[jj]).sum();
            }
        });
    let mut g = Array2::<f64>::zeros((n, cols));
    g.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out)| {
            for &ii in idx_p.row(i) {
                out += &inner.row(ii);
            }
            out *= scale;
        });
    g
}

/// Adjoint of [`neighborhood_sum`] with respect to `m`.
fn neighborhood_sum_backward(
    dg: &Array2<f64>,
    idx_p: &NeighborhoodIndex,
    idx_q: &NeighborhoodIndex,
    scale: f64,
) -> Array2<f64> {
    let (n, cols) = dg.dim();
    let mut d_inner = Array2::<f64>::zeros((n, cols));
    for i in 0..n {
        for &ii in idx_p.row(i) {
            let mut row = d_inner.row_mut(ii);
            row.scaled_add(scale, &dg.row(i));
        }
    }
    let mut dm = Array2::<f64>::zeros((n, cols));
    Zip::from(dm.rows_mut())
        .and(d_inner.rows())
        .par_for_each(|mut out, din| {
            for (j, &g) in din.iter().enumerate() {
                if g != 0.0 {
                    for &jj in idx_q.row(j) {
                        out[jj] += g;
                    }
                }
            }
        });
    dm
}

/// Fused map `G`. Pass `m_hat = None` for the single-neighborhood variant.
pub fn fuse_dual_neighborhood(
    m: &Array2<f64>,
    m_hat: Option<&Array2<f64>>,
    idx_p: &NeighborhoodIndex,
    idx_q: &NeighborhoodIndex,
    idx_p_hat: &NeighborhoodIndex,
    idx_q_hat: &NeighborhoodIndex,
    norm: FusionNorm,
) -> Result<Array2<f64>> {
    let (n, cols) = m.dim();
    let k = idx_p.k();
    check_graph(idx_p, n, k, "source")?;
    check_graph(idx_q, cols, k, "reference")?;
    let scale = norm.scale(k);
    let mut g = neighborhood_sum(m, idx_p, idx_q, scale);
    if let Some(m_hat) = m_hat {
        if m_hat.dim() != m.dim() {
            return Err(Error::Contract("score maps differ in shape".into()));
        }
        check_graph(idx_p_hat, n, k, "1-NN source")?;
        check_graph(idx_q_hat, cols, k, "1-NN reference")?;
        g += &neighborhood_sum(m_hat, idx_p_hat, idx_q_hat, scale);
    }
    Ok(g)
}

/// Returns `(D', F)`. `d_hat = None` drops the 1-NN distances.
pub fn final_matching_map(
    d: &Array2<f64>,
    d_hat: Option<&Array2<f64>>,
    g: &Array2<f64>,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if g.dim() != d.dim() || d_hat.is_some_and(|h| h.dim() != d.dim()) {
        return Err(Error::Contract("distance and fused maps differ in shape".into()));
    }
    if !alpha.is_finite() {
        return Err(Error::Config("alpha must be finite".into()));
    }
    let mut d_prime = d.clone();
    if let Some(h) = d_hat {
        d_prime += h;
    }
    Zip::from(&mut d_prime)
        .and(g)
        .for_each(|v, &gv| *v *= (alpha - gv).exp());
    let f = softmax_neg_rows(&d_prime);
    Ok((d_prime, f))
}

pub fn reference_copy(f: &Array2<f64>, q: &PointCloud) -> Result<ReferenceCopy> {
    if f.ncols() != q.len() {
        return Err(Error::Contract(format!(
            "map has {} columns, reference cloud {} points",
            f.ncols(),
            q.len()
        )));
    }
    let points: Vec<Point3> = (0..f.nrows())
        .into_par_iter()
        .map(|i| {
            f.row(i)
                .iter()
                .zip(q.points())
                .fold(Point3::zeros(), |acc, (&w, p)| acc + p * w)
        })
        .collect();
    Ok(ReferenceCopy::new(PointCloud::new(points)?))
}

pub fn compute_matching(inputs: &MatchingInputs<'_>, config: &MatchingConfig) -> Result<MatchingMap> {
    let d = pairwise_distance(inputs.fp, inputs.fq)?;
    let m = matching_scores(&d);
    let (d_hat, m_hat) = if config.dual {
        let d_hat = pairwise_distance(inputs.fp_hat, inputs.fq_hat)?;
        let m_hat = matching_scores(&d_hat);
        (d_hat, m_hat)
    } else {
        (Array2::zeros(d.dim()), Array2::zeros(d.dim()))
    };
    let dual = config.dual.then_some(&m_hat);
    let g = fuse_dual_neighborhood(
        &m,
        dual,
        inputs.idx_p,
        inputs.idx_q,
        inputs.idx_p_hat,
        inputs.idx_q_hat,
        config.norm,
    )?;
    let (d_prime, f) = final_matching_map(&d, config.dual.then_some(&d_hat), &g, config.alpha)?;
    Ok(MatchingMap {
        d,
        d_hat,
        m,
        m_hat,
        g,
        d_prime,
        f,
        alpha: config.alpha,
    })
}

/// Gradients of a scalar with respect to the four feature matrices.
#[derive(Clone, Debug)]
pub struct MatchingGrads {
    pub fp: Array2<f64>,
    pub fq: Array2<f64>,
    pub fp_hat: Array2<f64>,
    pub fq_hat: Array2<f64>,
}

/// Distances are not differentiable where two features coincide; those
/// entries contribute nothing.
fn pairwise_distance_backward(
    a: &Array2<f64>,
    b: &Array2<f64>,
    d: &Array2<f64>,
    dd: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let mut w = dd.clone();
    Zip::from(&mut w).and(d).for_each(|w, &dv| {
        *w = if dv > 0.0 { *w / dv } else { 0.0 };
    });
    let row = w.sum_axis(Axis(1));
    let col = w.sum_axis(Axis(0));
    let mut da = a * &row.insert_axis(Axis(1));
    da -= &w.dot(b);
    let mut db = b * &col.insert_axis(Axis(1));
    db -= &w.t().dot(a);
    (da, db)
}

/// Pulls gradients on `F` and on `G` back to the feature matrices.
pub fn matching_backward(
    map: &MatchingMap,
    inputs: &MatchingInputs<'_>,
    config: &MatchingConfig,
    d_f: Option<&Array2<f64>>,
    d_g: Option<&Array2<f64>>,
) -> Result<MatchingGrads> {
    let shape = map.f.dim();
    if d_f.is_some_and(|x| x.dim() != shape) || d_g.is_some_and(|x| x.dim() != shape) {
        return Err(Error::Contract("upstream gradient shape differs from the map".into()));
    }
    let mut dg = d_g.cloned().unwrap_or_else(|| Array2::zeros(shape));
    let mut ds = Array2::<f64>::zeros(shape);
    if let Some(d_f) = d_f {
        let dd_prime = softmax_neg_rows_backward(&map.f, d_f);
        // D' = exp(alpha - G) * S, with S = D + D_hat.
        Zip::from(&mut ds)
            .and(&mut dg)
            .and(&dd_prime)
            .and(&map.d_prime)
            .and(&map.g)
            .for_each(|ds, dg, &ddp, &dp, &g| {
                *ds = ddp * (map.alpha - g).exp();
                *dg -= ddp * dp;
            });
    }
    let k = inputs.idx_p.k();
    let scale = config.norm.scale(k);
    let dm = neighborhood_sum_backward(&dg, inputs.idx_p, inputs.idx_q, scale);
    let mut dd = ds.clone();
    dd += &softmax_neg_rows_backward(&map.m, &dm);
    let (fp, fq) = pairwise_distance_backward(inputs.fp.values(), inputs.fq.values(), &map.d, &dd);

    let (fp_hat, fq_hat) = if config.dual {
        let dm_hat = neighborhood_sum_backward(&dg, inputs.idx_p_hat, inputs.idx_q_hat, scale);
        let mut dd_hat = ds;
        dd_hat += &softmax_neg_rows_backward(&map.m_hat, &dm_hat);
        pairwise_distance_backward(
            inputs.fp_hat.values(),
            inputs.fq_hat.values(),
            &map.d_hat,
            &dd_hat,
        )
    } else {
        (
            Array2::zeros(inputs.fp_hat.values().dim()),
            Array2::zeros(inputs.fq_hat.values().dim()),
        )
    };
    Ok(MatchingGrads {
        fp,
        fq,
        fp_hat,
        fq_hat,
    })
}

/// Gradient of a scalar on the reference copy, pulled back to `F`:
/// `dF = dQ~ * Q^T`.
pub fn reference_copy_backward(d_copy: &[Point3], q: &PointCloud) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((d_copy.len(), q.len()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for (v, p) in row.iter_mut().zip(q.points()) {
                *v = d_copy[i].dot(p);
            }
        });
    out
}

/// Writes a dense matrix as text: a `rows cols` header line, then one line
/// per row with space-separated values in shortest round-trip notation.
pub fn write_matrix_text(m: &Array2<f64>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{} {}", m.nrows(), m.ncols())?;
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b" ")?;
            }
            write!(out, "{v:e}")?;
            first = false;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}
