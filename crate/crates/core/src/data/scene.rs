//! A contextual-ambiguity scene: the reference holds two rigid copies of the
//! same small patch, only one of which sits where the source patch belongs.
//! Every point of either copy has the same K-neighborhood up to a rigid
//! motion, so descriptors of the original clouds cannot tell them apart. A
//! single context point next to the true patch has its nearest neighbor
//! inside the patch and thereby changes the 1-NN cloud around it.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::matching::{compute_matching, MatchingConfig};
use crate::solver::{CloudState, Model};

pub const PATCH_POINTS: usize = 10;
const PATCH_RADIUS: f64 = 0.08;
const CONTEXT_OFFSET: f64 = 0.4;
const SHELL_RADIUS: f64 = 3.0;
const SHELL_POINTS: usize = 60;

#[derive(Clone, Debug)]
pub struct AmbiguityScene {
    pub p: PointCloud,
    pub q: PointCloud,
    /// Maps `p` onto its true position in `q`.
    pub t_gt: RigidTransform,
    /// Source indices of the patch.
    pub patch: Vec<usize>,
    /// Reference index of the true image of `patch[i]`.
    pub correct: Vec<usize>,
    /// Reference index of the decoy copy of `patch[i]`.
    pub decoy: Vec<usize>,
}

fn fibonacci_shell(n: usize, radius: f64) -> Vec<Point3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Point3::new(r * phi.cos(), r * phi.sin(), z) * radius
        })
        .collect()
}

impl AmbiguityScene {
    /// `(F[a, correct], F[a, decoy])` for every patch point `a`, from one
    /// matching step with the source at its original pose.
    pub fn patch_mass(&self, model: &Model, k: usize, config: &MatchingConfig) -> Result<Vec<(f64, f64)>> {
        let sp = CloudState::build(&self.p, &model.extractor, k)?;
        let sq = CloudState::build(&self.q, &model.extractor, k)?;
        let map = compute_matching(
            &crate::matching::MatchingInputs {
                fp: &sp.feat,
                fq: &sq.feat,
                fp_hat: &sp.feat_hat,
                fq_hat: &sq.feat_hat,
                idx_p: &sp.idx,
                idx_q: &sq.idx,
                idx_p_hat: &sp.idx_hat,
                idx_q_hat: &sq.idx_hat,
            },
            config,
        )?;
        Ok(self
            .patch
            .iter()
            .zip(self.correct.iter().zip(&self.decoy))
            .map(|(&a, (&c, &d))| (map.f[(a, c)], map.f[(a, d)]))
            .collect())
    }
}

pub fn ambiguity_scene() -> AmbiguityScene {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let center = Point3::new(0.8, 0.0, 0.0);
    let local: Vec<Vector3<f64>> = (0..PATCH_POINTS)
        .map(|_| loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() <= 1.0 {
                break v * PATCH_RADIUS;
            }
        })
        .collect();
    // The context point extends the patch point farthest from the center.
    let far = (0..PATCH_POINTS)
        .max_by(|&a, &b| local[a].norm().total_cmp(&local[b].norm()))
        .unwrap_or(0);
    let context = center + local[far] + local[far].normalize() * CONTEXT_OFFSET;

    let mut p: Vec<Point3> = fibonacci_shell(SHELL_POINTS, SHELL_RADIUS);
    let patch: Vec<usize> = (p.len()..p.len() + PATCH_POINTS).collect();
    p.extend(local.iter().map(|v| center + v));
    p.push(context);

    let t_gt = RigidTransform::from_euler_zyx(0.5, 0.3, -0.2, Vector3::new(0.1, -0.2, 0.3));
    let mut q: Vec<Point3> = p.iter().map(|x| t_gt.apply(x)).collect();
    let correct = patch.clone();
    let decoy_pose = RigidTransform::from_euler_zyx(-1.1, 0.7, 0.4, Vector3::new(-0.8, 0.4, 0.2));
    let decoy: Vec<usize> = (q.len()..q.len() + PATCH_POINTS).collect();
    q.extend(local.iter().map(|v| decoy_pose.apply(&Point3::from(*v))));

    AmbiguityScene {
        p: PointCloud::new(p).expect("finite scene"),
        q: PointCloud::new(q).expect("finite scene"),
        t_gt,
        patch,
        correct,
        decoy,
    }
}
