//! Symmetric 3x3 eigen-decomposition.
//!
//! The fast path is the trigonometric closed form for the eigenvalues plus a
//! cross-product null-space vector. When the two smallest eigenvalues nearly
//! coincide, or the closed-form vector fails its residual check, the cyclic
//! Jacobi method takes over.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Gap below which the closed-form eigenvector is not trusted.
pub const DEGENERATE_GAP: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;

/// Ascending eigenvalues with the unit eigenvector of the smallest one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallestEigen {
    pub values: Vec3,
    pub vector: Vec3,
}

impl SmallestEigen {
    pub fn value(&self) -> f64 {
        self.values[0]
    }
}

#[inline]
pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn mat_vec(c: &Mat3, v: &Vec3) -> Vec3 {
    [dot3(&c[0], v), dot3(&c[1], v), dot3(&c[2], v)]
}

pub fn frobenius(c: &Mat3) -> f64 {
    c.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖C v - λ v‖₂`.
pub fn residual(c: &Mat3, lambda: f64, v: &Vec3) -> f64 {
    let cv = mat_vec(c, v);
    norm3(&[cv[0] - lambda * v[0], cv[1] - lambda * v[1], cv[2] - lambda * v[2]])
}

/// Flips `v` so its largest-magnitude component is positive. Ties go to the
/// first such component.
pub fn canonical_sign(v: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

fn check_symmetric(c: &Mat3) -> Result<()> {
    let scale = c.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    if !c.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Validation("matrix has non-finite entries".into()));
    }
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if (c[i][j] - c[j][i]).abs() > SYMMETRY_TOL * scale {
            return Err(Error::Validation(format!(
                "matrix is not symmetric: c[{i}][{j}]={} vs c[{j}][{i}]={}",
                c[i][j], c[j][i]
            )));
        }
    }
    Ok(())
}

/// Symmetrized copy, so the solvers only read the upper triangle's values.
fn symmetrize(c: &Mat3) -> Mat3 {
    let mut s = *c;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let v = 0.5 * (c[i][j] + c[j][i]);
        s[i][j] = v;
        s[j][i] = v;
    }
    s
}

/// Eigenvalues of a symmetric 3x3 matrix in ascending order, closed form.
pub fn eigenvalues_closed_form(c: &Mat3) -> Vec3 {
    let p1 = c[0][1] * c[0][1] + c[0][2] * c[0][2] + c[1][2] * c[1][2];
    if p1 == 0.0 {
        let mut d = [c[0][0], c[1][1], c[2][2]];
        d.sort_by(f64::total_cmp);
        return d;
    }
    let q = (c[0][0] + c[1][1] + c[2][2]) / 3.0;
    let p2 = (c[0][0] - q).powi(2) + (c[1][1] - q).powi(2) + (c[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = *c;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let middle = 3.0 * q - largest - smallest;
    let mut vals = [smallest, middle, largest];
    vals.sort_by(f64::total_cmp);
    vals
}

/// Null vector of `C - λI` via the largest pairwise cross product of its rows.
fn null_vector(c: &Mat3, lambda: f64) -> Option<Vec3> {
    let rows = [
        [c[0][0] - lambda, c[0][1], c[0][2]],
        [c[1][0], c[1][1] - lambda, c[1][2]],
        [c[2][0], c[2][1], c[2][2] - lambda],
    ];
    let candidates = [
        cross3(&rows[0], &rows[1]),
        cross3(&rows[0], &rows[2]),
        cross3(&rows[1], &rows[2]),
    ];
    let (best, n) = candidates
        .iter()
        .map(|v| (*v, norm3(v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    if !(n > 0.0) {
        return None;
    }
    Some([best[0] / n, best[1] / n, best[2] / n])
}

/// Cyclic Jacobi rotations. Returns ascending eigenvalues and the matching
/// unit eigenvectors as columns `vectors[k]`.
pub fn jacobi_eigen(c: &Mat3) -> (Vec3, [Vec3; 3]) {
    let mut a = symmetrize(c);
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let cs = 1.0 / (t * t + 1.0).sqrt();
            let sn = t * cs;
            // A <- Jᵀ A J
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = cs * akp - sn * akq;
                a[k][q] = sn * akp + cs * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = cs * apk - sn * aqk;
                a[q][k] = sn * apk + cs * aqk;
            }
            a[p][q] = 0.0;
            a[q][p] = 0.0;
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = cs * vp - sn * vq;
                row[q] = sn * vp + cs * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]).then(i.cmp(&j)));
    let values = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let column = |k: usize| {
        let u = [v[0][k], v[1][k], v[2][k]];
        let n = norm3(&u);
        [u[0] / n, u[1] / n, u[2] / n]
    };
    (values, [column(order[0]), column(order[1]), column(order[2])])
}

/// Smallest eigenpair of a symmetric 3x3 matrix, sign-canonicalized.
pub fn smallest_eigenvector(c: &Mat3) -> Result<SmallestEigen> {
    check_symmetric(c)?;
    let s = symmetrize(c);
    let tol = 1e-9 * frobenius(&s).max(1.0);

    let values = eigenvalues_closed_form(&s);
    if values[1] - values[0] >= DEGENERATE_GAP * frobenius(&s).max(1.0) {
        if let Some(v) = null_vector(&s, values[0]) {
            // tenth of the public tolerance leaves headroom for callers
            if residual(&s, values[0], &v) < 0.1 * tol {
                return Ok(SmallestEigen {
                    values,
                    vector: canonical_sign(v),
                });
            }
        }
    }
    Ok(smallest_eigenvector_jacobi(&s))
}

/// Smallest eigenpair using Jacobi only.
pub fn smallest_eigenvector_jacobi(c: &Mat3) -> SmallestEigen {
    let (values, vectors) = jacobi_eigen(c);
    SmallestEigen {
        values,
        vector: canonical_sign(vectors[0]),
    }
}
