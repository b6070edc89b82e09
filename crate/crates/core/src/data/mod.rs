//! Synthetic shapes and registration pairs, point-cloud and transform files,
//! configuration, and benchmark records.

pub mod config;
pub mod io;
mod record;
mod scene;
mod shapes;
pub mod suite;

pub use record::{config_hash, BenchmarkRecord};
pub use scene::{ambiguity_scene, AmbiguityScene};
pub use shapes::{builtin_shapes, SHAPE_NAMES};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{apply_transform, Point3, PointCloud, RigidTransform};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSpec {
    pub n_points: usize,
    /// Each Euler angle is drawn from `[0, rot_range_deg]` degrees.
    pub rot_range_deg: f64,
    /// Each translation component is drawn from `[-trans_range, trans_range]`.
    pub trans_range: f64,
    pub keep_fraction: f64,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            n_points: 2048,
            rot_range_deg: 45.0,
            trans_range: 0.5,
            keep_fraction: 0.7,
            noise_sigma: 0.0,
            noise_clip: 1.0,
            seed: 0,
        }
    }
}

impl PairSpec {
    /// Points kept in each cloud after cropping.
    pub fn kept(&self) -> usize {
        (self.keep_fraction * self.n_points as f64).round() as usize
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=45.0).contains(&self.rot_range_deg) {
            return Err(Error::Config("rot_range_deg must lie in [0, 45]".into()));
        }
        if !(0.0..=0.5).contains(&self.trans_range) {
            return Err(Error::Config("trans_range must lie in [0, 0.5]".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config("keep_fraction must lie in (0, 1]".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_clip >= 0.0) {
            return Err(Error::Config("noise sigma and clip must be non-negative".into()));
        }
        if self.kept() < k + 1 {
            return Err(Error::Config(format!(
                "keep_fraction * n_points = {} leaves no room for K = {k} neighbors",
                self.kept()
            )));
        }
        Ok(())
    }
}

/// Uniform Euler angles in `[0, rot_range_deg]` composed as yaw-pitch-roll,
/// and a uniform translation in the spec's cube.
pub fn sample_transform(spec: &PairSpec, rng: &mut impl Rng) -> RigidTransform {
    let max = spec.rot_range_deg.to_radians();
    let mut angle = || if max > 0.0 { rng.random_range(0.0..=max) } else { 0.0 };
    let (yaw, pitch, roll) = (angle(), angle(), angle());
    let tr = spec.trans_range;
    let mut coord = || if tr > 0.0 { rng.random_range(-tr..=tr) } else { 0.0 };
    let t = Vector3::new(coord(), coord(), coord());
    RigidTransform::from_euler_zyx(yaw, pitch, roll, t)
}

/// A generated pair. `t_gt` maps `p` onto `q` and is meant for evaluation
/// only.
#[derive(Clone, Debug)]
pub struct Pair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub t_gt: RigidTransform,
    /// Share of `p` points whose counterpart survived the crop of `q`.
    pub overlap: f64,
}

/// Indices of the `keep` points farthest along a random direction, that is
/// the points on one side of a random plane.
fn half_space(points: &[Point3], keep: usize, rng: &mut impl Rng) -> Vec<usize> {
    let d: [f64; 3] = UnitSphere.sample(rng);
    let d = Point3::new(d[0], d[1], d[2]);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].dot(&d).total_cmp(&points[a].dot(&d)).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

fn add_noise(points: &mut [Point3], sigma: f64, clip: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for p in points {
        for c in 0..3 {
            p[c] += normal.sample(rng).clamp(-clip, clip);
        }
    }
}

/// Subsamples `shape` to `n_points`, draws the ground truth, places the
/// source by its inverse, crops each cloud independently, adds noise and
/// shuffles the source order.
pub fn make_pair(shape: &PointCloud, spec: &PairSpec) -> Result<Pair> {
    if shape.len() < spec.n_points {
        return Err(Error::Size(format!(
            "shape has {} points, pair needs {}",
            shape.len(),
            spec.n_points
        )));
    }
    if spec.kept() == 0 {
        return Err(Error::Size("crop keeps no points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picked = sample(&mut rng, shape.len(), spec.n_points).into_vec();
    let base: Vec<Point3> = picked.iter().map(|&i| *shape.point(i)).collect();
    let t_gt = sample_transform(spec, &mut rng);
    let moved = apply_transform(&t_gt.inverse(), &PointCloud::new(base.clone())?);

    let keep = spec.kept();
    let q_idx = half_space(&base, keep, &mut rng);
    let p_idx = half_space(moved.points(), keep, &mut rng);
    let mut in_q = vec![false; base.len()];
    for &i in &q_idx {
        in_q[i] = true;
    }
    let overlap = p_idx.iter().filter(|&&i| in_q[i]).count() as f64 / keep as f64;

    let mut q: Vec<Point3> = q_idx.iter().map(|&i| base[i]).collect();
    let mut p: Vec<Point3> = p_idx.iter().map(|&i| *moved.point(i)).collect();
    add_noise(&mut q, spec.noise_sigma, spec.noise_clip, &mut rng);
    add_noise(&mut p, spec.noise_sigma, spec.noise_clip, &mut rng);
    p.shuffle(&mut rng);
    Ok(Pair {
        p: PointCloud::new(p)?,
        q: PointCloud::new(q)?,
        t_gt,
        overlap,
    })
}
