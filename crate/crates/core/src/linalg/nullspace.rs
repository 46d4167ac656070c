use crate::error::{Error, Result};

use super::matrix::{dot, DenseMatrix};
use super::svd::svd;

/// Relative tolerance for double-precision inputs.
pub const DEFAULT_REL_TOL_F64: f64 = 1e-10;
/// Relative tolerance for inputs that were stored in single precision.
pub const DEFAULT_REL_TOL_F32: f64 = 1e-5;

/// Components with magnitude at or below this are skipped when choosing the
/// sign of a basis vector.
const SIGN_PIVOT_FLOOR: f64 = 1e-12;

/// Orthonormal basis of the left nullspace `{x : xᵀV = 0}` of a `d_s × d_v`
/// matrix `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullspaceBasis {
    /// Unit vectors of length `ambient_dim`, mutually orthogonal.
    pub vectors: Vec<Vec<f64>>,
    /// Length of each basis vector (`d_s`).
    pub ambient_dim: usize,
    pub tolerance_used: f64,
    /// Largest singular value of the source matrix.
    pub sigma_max: f64,
}

impl NullspaceBasis {
    pub fn empty(ambient_dim: usize) -> Self {
        Self { vectors: Vec::new(), ambient_dim, tolerance_used: 0.0, sigma_max: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    /// The basis as the columns of a `d_s × k` matrix.
    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.ambient_dim, self.dim(), |i, j| self.vectors[j][i])
    }
}

/// Number of singular values strictly above `rel_tol · σ₁`.
pub fn numerical_rank(sigma: &[f64], rel_tol: f64) -> Result<usize> {
    if rel_tol.is_nan() || rel_tol < 0.0 {
        return Err(Error::arg(format!("relative tolerance must be >= 0, got {rel_tol}")));
    }
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    if sigma_max == 0.0 {
        return Ok(0);
    }
    let threshold = rel_tol * sigma_max;
    Ok(sigma.iter().filter(|&&s| s > threshold).count())
}

/// Left singular vectors of `v` whose singular value is numerically zero.
///
/// Indices past `min(d_s, d_v)` have no singular value and always belong to
/// the nullspace. Each vector is flipped so that its first component with
/// magnitude above `1e-12` is positive.
pub fn left_nullspace_basis(v: &DenseMatrix, rel_tol: f64) -> Result<NullspaceBasis> {
    let ds = v.rows();
    if ds == 0 {
        return Err(Error::arg("value matrix has no rows"));
    }
    if v.cols() == 0 {
        // Every x satisfies xᵀV = 0 trivially.
        let vectors = (0..ds)
            .map(|i| {
                let mut e = vec![0.0; ds];
                e[i] = 1.0;
                e
            })
            .collect();
        return Ok(NullspaceBasis { vectors, ambient_dim: ds, tolerance_used: rel_tol, sigma_max: 0.0 });
    }

    let decomposition = svd(v)?;
    let rank = numerical_rank(&decomposition.sigma, rel_tol)?;
    let vectors = (rank..ds)
        .map(|k| {
            let mut u = decomposition.u.column(k);
            normalize_sign(&mut u);
            u
        })
        .collect();
    Ok(NullspaceBasis { vectors, ambient_dim: ds, tolerance_used: rel_tol, sigma_max: decomposition.sigma_max() })
}

fn normalize_sign(u: &mut [f64]) {
    if let Some(&pivot) = u.iter().find(|x| x.abs() > SIGN_PIVOT_FLOOR) {
        if pivot < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Row-wise orthogonal projection onto `span(basis)`:
/// row `i` of the result is `Σⱼ ⟨aᵢ, uⱼ⟩ uⱼ`.
pub fn project_rows(a: &DenseMatrix, basis: &NullspaceBasis) -> Result<DenseMatrix> {
    if a.cols() != basis.ambient_dim {
        return Err(Error::arg(format!(
            "matrix has {} columns but basis vectors have length {}",
            a.cols(),
            basis.ambient_dim
        )));
    }
    let n = a.cols();
    let mut out = vec![0.0; a.rows() * n];
    for i in 0..a.rows() {
        let row = a.row(i);
        let out_row = &mut out[i * n..(i + 1) * n];
        for u in &basis.vectors {
            let c = dot(row, u);
            if c != 0.0 {
                for (o, x) in out_row.iter_mut().zip(u) {
                    *o += c * x;
                }
            }
        }
    }
    Ok(DenseMatrix::from_vec_unchecked(a.rows(), n, out))
}
