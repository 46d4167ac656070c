//! Effective-attention decomposition of a single head.
//!
//! For attention `A` (d_s×d_s) and values `V` (d_s×d_v), every row of `A` is
//! split into its projection onto the left nullspace of `V` (`A∥`) and the
//! remainder (`A⊥ = A − A∥`). Since `A∥V = 0`, the head output `AV` equals
//! `A⊥V`: only the effective part is visible downstream.

use std::borrow::Cow;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{left_nullspace_basis, project_rows, DenseMatrix, NullspaceBasis};
use crate::tensor_io::TokenAnnotation;

/// Allowed deviation of a softmax row sum from 1.
pub const SOFTMAX_ROW_SUM_TOL: f64 = 1e-6;

/// Residual factor used with double-precision tolerances; residuals are
/// compared against `factor · σ₁(V)`.
pub const RESIDUAL_FACTOR_F64: f64 = 1e-9;

/// Which attention weights an analysis looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Standard,
    Effective,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Standard => "standard",
            AttentionKind::Effective => "effective",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One head's attention and value matrices for one input example.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    layer: u16,
    head: u16,
    a: DenseMatrix,
    v: DenseMatrix,
    annotations: Option<Vec<TokenAnnotation>>,
}

impl HeadRecord {
    pub fn new(
        layer: u16,
        head: u16,
        a: DenseMatrix,
        v: DenseMatrix,
        annotations: Option<Vec<TokenAnnotation>>,
    ) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::arg(format!(
                "attention matrix for layer {layer} head {head} is {}x{}, not square",
                a.rows(),
                a.cols()
            )));
        }
        if v.rows() != a.rows() {
            return Err(Error::arg(format!(
                "value matrix for layer {layer} head {head} has {} rows, attention has {}",
                v.rows(),
                a.rows()
            )));
        }
        if let Some(ann) = &annotations {
            if ann.len() != a.rows() {
                return Err(Error::arg(format!("{} annotations for a sequence of length {}", ann.len(), a.rows())));
            }
        }
        Ok(Self { layer, head, a, v, annotations })
    }

    pub fn layer(&self) -> u16 {
        self.layer
    }

    pub fn head(&self) -> u16 {
        self.head
    }

    pub fn seq_len(&self) -> usize {
        self.a.rows()
    }

    pub fn d_v(&self) -> usize {
        self.v.cols()
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn v(&self) -> &DenseMatrix {
        &self.v
    }

    pub fn annotations(&self) -> Option<&[TokenAnnotation]> {
        self.annotations.as_deref()
    }

    /// Same head with the attention payload replaced (e.g. by `A⊥`).
    pub fn with_attention(&self, a: DenseMatrix) -> Result<Self> {
        Self::new(self.layer, self.head, a, self.v.clone(), self.annotations.clone())
    }

    /// Largest `|row sum − 1|` of the attention matrix.
    pub fn max_row_sum_deviation(&self) -> f64 {
        self.a.row_sums().iter().fold(0.0, |m, s| m.max((s - 1.0).abs()))
    }

    /// Checks the softmax contract on `A`.
    pub fn check_softmax_rows(&self) -> Result<()> {
        let dev = self.max_row_sum_deviation();
        if dev > SOFTMAX_ROW_SUM_TOL {
            return Err(Error::arg(format!(
                "layer {} head {}: attention row sums deviate from 1 by {dev:e}",
                self.layer, self.head
            )));
        }
        Ok(())
    }

    /// Zero-pads the sequence dimension to `len` (padding rows and columns
    /// of `A`, padding rows of `V`). Annotations are dropped since padding
    /// positions have no tokens.
    pub fn padded_to(&self, len: usize) -> Result<Self> {
        Self::new(self.layer, self.head, self.a.zero_padded(len, len)?, self.v.zero_padded(len, self.d_v())?, None)
    }

    /// The attention weights of the requested kind.
    pub fn attention(&self, kind: AttentionKind, rel_tol: f64) -> Result<Cow<'_, DenseMatrix>> {
        match kind {
            AttentionKind::Standard => Ok(Cow::Borrowed(&self.a)),
            AttentionKind::Effective => Ok(Cow::Owned(decompose(self, rel_tol)?.a_perp)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EffectiveDecomposition {
    /// Effective attention `A⊥`.
    pub a_perp: DenseMatrix,
    /// Nullspace component `A∥`.
    pub a_null: DenseMatrix,
    pub basis: NullspaceBasis,
    pub rank_v: usize,
    /// `‖A⊥V − AV‖_max`
    pub residual_identity: f64,
    /// `‖A∥V‖_max`
    pub residual_annihilation: f64,
}

impl EffectiveDecomposition {
    pub fn nullspace_dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn sigma_max(&self) -> f64 {
        self.basis.sigma_max
    }
}

pub fn decompose(head: &HeadRecord, rel_tol: f64) -> Result<EffectiveDecomposition> {
    let basis = left_nullspace_basis(&head.v, rel_tol)?;
    let rank_v = head.seq_len() - basis.dim();
    let a_null = project_rows(&head.a, &basis)?;
    let a_perp = head.a.sub(&a_null)?;

    let av = head.a.matmul(&head.v)?;
    let residual_identity = a_perp.matmul(&head.v)?.max_abs_diff(&av);
    let residual_annihilation = a_null.matmul(&head.v)?.max_abs();
    Ok(EffectiveDecomposition { a_perp, a_null, basis, rank_v, residual_identity, residual_annihilation })
}

/// Residual factor matching a nullspace tolerance: `1e-9` at double
/// precision, growing with looser tolerances (`1e-4` at `rel_tol = 1e-5`).
pub fn residual_factor(rel_tol: f64) -> f64 {
    RESIDUAL_FACTOR_F64.max(10.0 * rel_tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub residual_identity: f64,
    pub residual_annihilation: f64,
    /// `‖A⊥ + A∥ − A‖_max`
    pub residual_reconstruction: f64,
    pub sigma_max: f64,
    /// Bound applied to the two output residuals (`factor · σ₁`).
    pub output_bound: f64,
    /// Bound applied to the reconstruction residual.
    pub reconstruction_bound: f64,
    pub passed: bool,
}

/// Recomputes the three residuals of `dec` against `head` from scratch.
pub fn verify(dec: &EffectiveDecomposition, head: &HeadRecord) -> VerificationReport {
    let sigma_max = dec.sigma_max();
    let output_bound = residual_factor(dec.basis.tolerance_used) * sigma_max;
    let reconstruction_bound = 1e-12 * head.a.max_abs().max(1.0);

    let shapes_ok = dec.a_perp.shape() == head.a.shape() && dec.a_null.shape() == head.a.shape();
    if !shapes_ok {
        return VerificationReport {
            residual_identity: f64::INFINITY,
            residual_annihilation: f64::INFINITY,
            residual_reconstruction: f64::INFINITY,
            sigma_max,
            output_bound,
            reconstruction_bound,
            passed: false,
        };
    }

    let product = |m: &DenseMatrix| m.matmul(&head.v).expect("shapes checked above");
    let av = product(&head.a);
    let residual_identity = product(&dec.a_perp).max_abs_diff(&av);
    let residual_annihilation = product(&dec.a_null).max_abs();
    let residual_reconstruction = dec.a_perp.add(&dec.a_null).expect("shapes checked above").max_abs_diff(&head.a);
    let passed = residual_identity <= output_bound
        && residual_annihilation <= output_bound
        && residual_reconstruction <= reconstruction_bound;
    VerificationReport {
        residual_identity,
        residual_annihilation,
        residual_reconstruction,
        sigma_max,
        output_bound,
        reconstruction_bound,
        passed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadStats {
    /// Fraction of `A⊥` entries below zero.
    pub frac_negative: f64,
    pub max_weight: f64,
    pub min_weight: f64,
    pub nullspace_dim: usize,
}

pub fn head_stats(dec: &EffectiveDecomposition) -> HeadStats {
    let data = dec.a_perp.data();
    let negatives = data.iter().filter(|&&x| x < 0.0).count();
    let (min_weight, max_weight) =
        data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    HeadStats {
        frac_negative: if data.is_empty() { 0.0 } else { negatives as f64 / data.len() as f64 },
        max_weight: if data.is_empty() { 0.0 } else { max_weight },
        min_weight: if data.is_empty() { 0.0 } else { min_weight },
        nullspace_dim: dec.nullspace_dim(),
    }
}

/// Decomposes every head independently, in parallel on the current rayon
/// pool. Output order matches input order; a failing head does not abort
/// the others.
pub fn decompose_batch(heads: &[HeadRecord], rel_tol: f64) -> Vec<Result<EffectiveDecomposition>> {
    heads.par_iter().map(|h| decompose(h, rel_tol)).collect()
}
