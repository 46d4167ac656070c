//! Dense linear algebra: SVD, numerical rank, left nullspace, row projection.
//!
//! Everything runs in `f64`, including data that was stored as `f32`.

mod matrix;
mod nullspace;
mod svd;

pub use matrix::{dot, DenseMatrix};
pub use nullspace::{
    left_nullspace_basis, numerical_rank, project_rows, NullspaceBasis, DEFAULT_REL_TOL_F32, DEFAULT_REL_TOL_F64,
};
pub use svd::{svd, SvdResult};
