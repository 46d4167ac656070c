//! Full singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations orthogonalize the columns of the input; their norms are the
//! singular values and the accumulated rotation is the right factor. Columns
//! of the left factor belonging to (numerically) zero singular values carry no
//! information from the rotation, so they are replaced by an orthonormal
//! completion computed with Householder reflections. This yields a square,
//! orthogonal `U` even when `m > n`, which is what the left nullspace needs.

use crate::error::{Error, Result};

use super::matrix::{dot, DenseMatrix};

const MAX_SWEEPS: usize = 80;

/// `m = u · diag(sigma) · vt` with square orthogonal `u` (m×m) and `vt` (n×n).
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    /// Non-increasing, non-negative, length `min(m, n)`.
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    /// Multiplies the factors back together.
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, n) = (self.u.rows(), self.vt.cols());
        DenseMatrix::from_fn(m, n, |i, j| {
            self.sigma.iter().enumerate().map(|(k, s)| self.u.get(i, k) * s * self.vt.get(k, j)).sum()
        })
    }
}

pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::arg(format!("svd of an empty {}x{} matrix", m.rows(), m.cols())));
    }
    if m.rows() >= m.cols() {
        let (u, sigma, w) = tall_svd(m)?;
        Ok(SvdResult { u, sigma, vt: w.transpose() })
    } else {
        // mᵀ = u' Σ w'ᵀ  ⇒  m = w' Σ u'ᵀ
        let (u_t, sigma, w_t) = tall_svd(&m.transpose())?;
        Ok(SvdResult { u: w_t, sigma, vt: u_t.transpose() })
    }
}

/// SVD of an `m × n` matrix with `m ≥ n`. Returns `(u: m×m, sigma, w: n×n)`
/// where `m = u · diag(sigma) · wᵀ`.
fn tall_svd(a: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);

    // Column-major working copies: `cols[j*m..(j+1)*m]` is column j.
    let mut cols = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            cols[j * m + i] = a.get(i, j);
        }
    }
    let mut w = vec![0.0; n * n];
    for j in 0..n {
        w[j * n + j] = 1.0;
    }

    let eps = f64::EPSILON;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (cp, cq) = column_pair(&mut cols, m, p, q);
                let alpha = dot(cp, cp);
                let beta = dot(cq, cq);
                let gamma = dot(cp, cq);
                let scale = (alpha * beta).sqrt();
                if gamma == 0.0 || scale < f64::MIN_POSITIVE || gamma.abs() <= eps * scale {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                let (wp, wq) = column_pair(&mut w, n, p, q);
                rotate(wp, wq, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD of a {m}x{n} matrix did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.chunks_exact(m).map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();

    // Left vectors from columns whose norm is well above roundoff; the rest
    // (including every index ≥ n) come from the orthogonal completion.
    let cutoff = sigma.first().copied().unwrap_or(0.0) * (m.max(n) as f64) * eps;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(m);
    for &j in &order {
        let s = norms[j];
        if s > cutoff && s > 0.0 {
            left.push(cols[j * m..(j + 1) * m].iter().map(|x| x / s).collect());
        } else {
            break;
        }
    }
    left.extend(orthonormal_complement(&left, m));

    let u = DenseMatrix::from_fn(m, m, |i, k| left[k][i]);
    let w_sorted = DenseMatrix::from_fn(n, n, |i, k| w[order[k] * n + i]);
    Ok((u, sigma, w_sorted))
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Orthonormal basis of the complement of `span(basis)` in ℝ^m, where
/// `basis` holds orthonormal vectors of length `m`.
///
/// Householder QR of the `m × r` matrix `[basis]` gives `Q = H₀⋯H_{r−1}`;
/// columns `r..m` of `Q` are the complement.
pub(crate) fn orthonormal_complement(basis: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    let r = basis.len();
    // Work column-major on a copy; reflect column k below the diagonal.
    let mut work: Vec<Vec<f64>> = basis.to_vec();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    for k in 0..r {
        let x = &work[k][k..];
        let norm_x = dot(x, x).sqrt();
        let mut v = x.to_vec();
        let alpha = if v[0] >= 0.0 { -norm_x } else { norm_x };
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|e| *e /= vnorm);
        }
        for col in work.iter_mut().skip(k) {
            apply_reflector(&v, &mut col[k..]);
        }
        reflectors.push(v);
    }

    (r..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            for (k, v) in reflectors.iter().enumerate().rev() {
                apply_reflector(v, &mut e[k..]);
            }
            e
        })
        .collect()
}

/// `x ← (I − 2vvᵀ) x` for unit `v` (or the identity when `v = 0`).
#[inline]
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let d = 2.0 * dot(v, x);
    if d != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= d * vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        let qtq = q.transpose().matmul(q).unwrap();
        qtq.max_abs_diff(&DenseMatrix::identity(q.cols()))
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&DenseMatrix::identity(2)).unwrap();
        assert_eq!(r.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn diagonal_rank_one() {
        let m = DenseMatrix::from_rows(&[[3.0, 0.0], [0.0, 0.0]]).unwrap();
        let r = svd(&m).unwrap();
        assert_eq!(r.sigma, vec![3.0, 0.0]);
        assert!(r.reconstruct().max_abs_diff(&m) < 1e-15);
        assert!(orthonormality_error(&r.u) < 1e-15);
    }

    #[test]
    fn wide_and_tall_shapes_are_full() {
        let tall = DenseMatrix::from_fn(5, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let wide = tall.transpose();
        for m in [&tall, &wide] {
            let r = svd(m).unwrap();
            assert_eq!(r.u.shape(), (m.rows(), m.rows()));
            assert_eq!(r.vt.shape(), (m.cols(), m.cols()));
            assert_eq!(r.sigma.len(), 3);
            assert!(r.reconstruct().max_abs_diff(m) <= 1e-12 * r.sigma_max().max(1.0));
            assert!(orthonormality_error(&r.u) < 1e-12);
            assert!(orthonormality_error(&r.vt.transpose()) < 1e-12);
        }
    }

    #[test]
    fn zero_matrix() {
        let r = svd(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&r.u) < 1e-15);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(matches!(svd(&DenseMatrix::zeros(0, 3)), Err(Error::Argument(_))));
    }

    #[test]
    fn complement_of_axis_vectors_is_exact() {
        let comp = orthonormal_complement(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], 3);
        assert_eq!(comp.len(), 1);
        assert_eq!(comp[0].iter().map(|x| x.abs()).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }
}
