use nalgebra::{Matrix3, Vector3};

/// `m = u * diag(s) * v^T` with `s` sorted descending and `u`, `v` orthogonal.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub s: Vector3<f64>,
    pub v: Matrix3<f64>,
}

const TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;

/// One-sided Jacobi SVD of a 3×3 matrix.
///
/// Column pairs of `a = m v` are rotated until mutually orthogonal; the
/// column norms are then the singular values. Columns of `u` belonging to
/// zero singular values are completed to an orthonormal basis.
pub fn svd3(m: &Matrix3<f64>) -> Svd3 {
    let mut a = *m;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha = a.column(p).norm_squared();
            let beta = a.column(q).norm_squared();
            let gamma = a.column(p).dot(&a.column(q));
            if gamma == 0.0 || gamma.abs() <= TOLERANCE * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let t = if zeta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for mat in [&mut a, &mut v] {
                for row in 0..3 {
                    let xp = mat[(row, p)];
                    let xq = mat[(row, q)];
                    mat[(row, p)] = c * xp - s * xq;
                    mat[(row, q)] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut s = Vector3::zeros();
    let scale = norms[order[0]];
    let mut rank = 0;
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        vs.set_column(k, &v.column(j));
        if norms[j] > TOLERANCE * scale && norms[j] > 0.0 {
            u.set_column(k, &(a.column(j) / norms[j]));
            rank += 1;
        }
    }
    complete_basis(&mut u, rank);
    Svd3 { u, s, v: vs }
}

/// Fills columns `rank..3` of `u` so that it becomes orthonormal.
fn complete_basis(u: &mut Matrix3<f64>, rank: usize) {
    if rank == 3 {
        return;
    }
    if rank == 0 {
        *u = Matrix3::identity();
        return;
    }
    if rank == 1 {
        let a: Vector3<f64> = u.column(0).into();
        // Axis least aligned with `a` gives a well-conditioned cross product.
        let mut axis = Vector3::zeros();
        let k = a.iamin();
        axis[k] = 1.0;
        let b = a.cross(&axis).normalize();
        u.set_column(1, &b);
    }
    let a: Vector3<f64> = u.column(0).into();
    let b: Vector3<f64> = u.column(1).into();
    u.set_column(2, &a.cross(&b).normalize());
}
