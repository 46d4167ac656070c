//! Effective-attention decomposition for transformer self-attention heads.
//!
//! The attention matrix `A` of a head only reaches the output through `AV`.
//! When the sequence is longer than the value dimension, `V` has a nontrivial
//! left nullspace and any component of `A`'s rows inside it is invisible in
//! `AV`. Removing that component leaves the *effective attention* `A⊥`.
//!
//! Modules:
//! - [`linalg`]: SVD, numerical rank, left nullspace, row projection
//! - [`decomposition`]: per-head decomposition and its verification
//! - [`attention_sim`]: a toy sublayer producing ground-truth heads
//! - [`tensor_io`]: the EATN bundle format
//! - [`analysis`]: token relevance, CLS/SEP maps, pattern census, drift
//! - [`heatmap`]: PGM output for `(layer, head)` grids
//! - [`bench`]: overhead benchmark

pub mod analysis;
pub mod attention_sim;
pub mod bench;
pub mod decomposition;
mod error;
pub mod heatmap;
pub mod linalg;
pub mod tensor_io;

pub use decomposition::{decompose, verify, AttentionKind, EffectiveDecomposition, HeadRecord};
pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use tensor_io::{Bundle, FormatError, Precision, TokenAnnotation, TokenCategory};
