//! Deterministic 3x3 singular value decomposition (one-sided Jacobi).
//!
//! Columns of `A` are orthogonalized by plane rotations applied from the
//! right; the accumulated rotations form `V` and the normalized columns form
//! `U`. One-sided Jacobi has high relative accuracy, which matters for the
//! smallest singular value of nearly planar correspondence sets.

use nalgebra::{Matrix3, Vector3};

/// `a = u * diag(sigma) * v^T`, with `sigma` sorted non-increasing and
/// `u`, `v` orthogonal (their determinants may be -1).
#[derive(Clone, Copy, Debug)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

const MAX_SWEEPS: usize = 60;

pub fn svd3(a: &Matrix3<f64>) -> Svd3 {
    let mut w = *a;
    let mut v = Matrix3::<f64>::identity();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = w.column(p).norm_squared();
            let beta = w.column(q).norm_squared();
            let gamma = w.column(p).dot(&w.column(q));
            if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for r in 0..3 {
                    let xp = m[(r, p)];
                    let xq = m[(r, q)];
                    m[(r, p)] = c * xp - s * xq;
                    m[(r, q)] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let norms = Vector3::new(w.column(0).norm(), w.column(1).norm(), w.column(2).norm());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u = Matrix3::<f64>::zeros();
    let mut vs = Matrix3::<f64>::zeros();
    let mut sigma = Vector3::<f64>::zeros();
    for (dst, &src) in order.iter().enumerate() {
        sigma[dst] = norms[src];
        vs.set_column(dst, &v.column(src));
    }

    // Columns with (numerically) zero norm carry no direction; complete the
    // basis from the well-determined ones instead.
    let tiny = sigma[0] * 1e-13;
    let mut rank = 0;
    for dst in 0..3 {
        let src = order[dst];
        if sigma[dst] > tiny && sigma[dst] > 0.0 {
            u.set_column(dst, &(w.column(src) / sigma[dst]));
            rank += 1;
        }
    }
    match rank {
        0 => u = Matrix3::identity(),
        1 => {
            let u0: Vector3<f64> = u.column(0).into();
            let helper = if u0.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            let u1 = (helper - u0 * u0.dot(&helper)).normalize();
            u.set_column(1, &u1);
            u.set_column(2, &u0.cross(&u1));
        }
        2 => {
            let u0: Vector3<f64> = u.column(0).into();
            let u1: Vector3<f64> = u.column(1).into();
            u.set_column(2, &u0.cross(&u1).normalize());
        }
        _ => {}
    }

    Svd3 { u, sigma, v: vs }
}

/// Nearest proper rotation to `m` in the Frobenius sense.
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let Svd3 { u, v, .. } = svd3(m);
    let d = (u * v.transpose()).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v.transpose()
}
