use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub const SHAPE_NAMES: [&str; 6] = [
    "sphere",
    "torus",
    "box-frame",
    "helix",
    "two-planes",
    "bunny-like-composite",
];

fn unit(rng: &mut ChaCha8Rng) -> Point3 {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Point3::new(v[0], v[1], v[2])
}

/// Elliptic torus: the tube circle follows an ellipse with semi-axes `a, b`.
fn torus(rng: &mut ChaCha8Rng) -> Point3 {
    let (a, b, r) = (1.0, 0.6, 0.25);
    let (u, v) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let (su, cu) = u.sin_cos();
    // Outward normal of the ellipse at u.
    let n = Point3::new(b * cu, a * su, 0.0).normalize();
    Point3::new(a * cu, b * su, 0.0) + n * (r * v.cos()) + Point3::z() * (r * v.sin())
}

/// Points on the twelve edges of a 1.0 x 0.7 x 0.4 box, slightly thickened
/// so that neighborhoods are not collinear.
fn box_frame(rng: &mut ChaCha8Rng) -> Point3 {
    let half = [0.5, 0.35, 0.2];
    let lengths = [4.0 * 1.0, 4.0 * 0.7, 4.0 * 0.4];
    let mut pick = rng.random_range(0.0..lengths.iter().sum::<f64>());
    let mut axis = 0;
    while pick >= lengths[axis] {
        pick -= lengths[axis];
        axis += 1;
    }
    let mut p = Point3::zeros();
    for c in 0..3 {
        p[c] = if c == axis {
            rng.random_range(-half[c]..half[c])
        } else if rng.random_bool(0.5) {
            half[c]
        } else {
            -half[c]
        };
    }
    p + Point3::from_fn(|_, _| rng.random_range(-0.02..0.02))
}

/// A tube around a conical helix whose radius grows with height.
fn helix(rng: &mut ChaCha8Rng) -> Point3 {
    let s: f64 = rng.random_range(0.0..1.0);
    let turns = 2.5;
    let phi = TAU * turns * s;
    let radius = 0.15 + 0.5 * s;
    let center = Point3::new(radius * phi.cos(), radius * phi.sin(), 1.6 * s - 0.8);
    let tangent = Point3::new(
        0.5 * phi.cos() - radius * TAU * turns * phi.sin(),
        0.5 * phi.sin() + radius * TAU * turns * phi.cos(),
        1.6,
    )
    .normalize();
    let n1 = tangent.cross(&Point3::z()).normalize();
    let n2 = tangent.cross(&n1);
    let a = rng.random_range(0.0..TAU);
    center + (n1 * a.cos() + n2 * a.sin()) * 0.06
}

/// Two rectangles of different size meeting along an edge at 70 degrees.
fn two_planes(rng: &mut ChaCha8Rng) -> Point3 {
    let area = [1.0 * 0.8, 0.6 * 0.8];
    let y = rng.random_range(-0.4..0.4);
    if rng.random_range(0.0..area[0] + area[1]) < area[0] {
        Point3::new(rng.random_range(0.0..1.0), y, 0.0)
    } else {
        let s = rng.random_range(0.0..0.6);
        let a = 70f64.to_radians();
        Point3::new(-s * a.cos(), y, s * a.sin())
    }
}

/// Body, head, ears and tail of a rough rabbit built from ellipsoid
/// surfaces, chosen in proportion to approximate area.
fn bunny(rng: &mut ChaCha8Rng) -> Point3 {
    let parts: [(Point3, Point3, f64); 5] = [
        (Point3::new(0.0, 0.0, 0.0), Point3::new(0.6, 0.4, 0.4), 0.45),
        (Point3::new(0.55, 0.0, 0.35), Point3::new(0.25, 0.22, 0.22), 0.2),
        (Point3::new(0.6, 0.1, 0.75), Point3::new(0.06, 0.05, 0.25), 0.12),
        (Point3::new(0.5, -0.12, 0.72), Point3::new(0.06, 0.05, 0.22), 0.11),
        (Point3::new(-0.62, 0.0, 0.1), Point3::new(0.1, 0.1, 0.1), 0.12),
    ];
    let total: f64 = parts.iter().map(|p| p.2).sum();
    let mut pick = rng.random_range(0.0..total);
    let mut i = 0;
    while pick >= parts[i].2 && i + 1 < parts.len() {
        pick -= parts[i].2;
        i += 1;
    }
    let (c, r, _) = parts[i];
    c + unit(rng).component_mul(&r)
}

/// `n` points from a named parametric surface, scaled so the farthest point
/// from the origin sits on the unit sphere.
pub fn builtin_shapes(name: &str, n: usize, seed: u64) -> Result<PointCloud> {
    let sampler: fn(&mut ChaCha8Rng) -> Point3 = match name {
        "sphere" => unit,
        "torus" => torus,
        "box-frame" => box_frame,
        "helix" => helix,
        "two-planes" => two_planes,
        "bunny-like-composite" => bunny,
        _ => {
            return Err(Error::Usage(format!(
                "unknown shape '{name}'; expected one of {}",
                SHAPE_NAMES.join(", ")
            )))
        }
    };
    if n == 0 {
        return Err(Error::Size("a shape needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Point3> = (0..n).map(|_| sampler(&mut rng)).collect();
    let centroid = pts.iter().sum::<Point3>() / n as f64;
    if name != "sphere" {
        for p in &mut pts {
            *p -= centroid;
        }
    }
    let max = pts.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if max > 0.0 {
        for p in &mut pts {
            *p /= max;
        }
    }
    PointCloud::new(pts)
}
