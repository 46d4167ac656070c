//! Attention interpretation analyses, each runnable on standard or effective
//! attention so the two can be compared side by side.
//!
//! Records carry no explicit example id. The example index of a record is its
//! ordinal among the records that share its `(layer, head)`, in bundle order.

mod drift;
mod patterns;
mod relevance;
mod token_map;

use std::borrow::Cow;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

pub use drift::{cosine_similarity, finetune_drift, DriftCell, DriftMap};
pub use patterns::{
    classify_pattern, pattern_census, pattern_features, segment_boundary, PatternCensus, PatternConfig,
    PatternFeatures, PatternLabel, PatternLabelKind, PatternThresholds,
};
pub use relevance::{token_relevance, RelevanceCell, TokenRelevanceTable};
pub use token_map::{token_attention_map, MapCell, TargetToken, TokenMap};

use crate::decomposition::{AttentionKind, HeadRecord};
use crate::error::Result;
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RecordKey {
    pub layer: u16,
    pub head: u16,
    pub example: usize,
}

/// Keys for `records`, in the same order.
pub fn record_keys(records: &[HeadRecord]) -> Vec<RecordKey> {
    let mut seen: HashMap<(u16, u16), usize> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let n = seen.entry((r.layer(), r.head())).or_insert(0);
            let key = RecordKey { layer: r.layer(), head: r.head(), example: *n };
            *n += 1;
            key
        })
        .collect()
}

/// Attention matrices of the requested kind for every record, decomposed in
/// parallel when effective attention is asked for.
pub(crate) fn attention_matrices(
    records: &[HeadRecord],
    kind: AttentionKind,
    rel_tol: f64,
) -> Result<Vec<Cow<'_, DenseMatrix>>> {
    records.par_iter().map(|r| r.attention(kind, rel_tol)).collect()
}
