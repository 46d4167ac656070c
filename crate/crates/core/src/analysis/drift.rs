use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::{attention_matrices, record_keys, RecordKey};
use crate::decomposition::AttentionKind;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::tensor_io::Bundle;

const MAX_LISTED_KEYS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftCell {
    pub layer: u16,
    pub head: u16,
    /// Mean cosine over examples with two nonzero matrices; `None` when every
    /// pair had a zero-norm side.
    pub cosine: Option<f64>,
    pub examples: usize,
    pub undefined_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftMap {
    pub kind: AttentionKind,
    /// Ordered by `(layer, head)`.
    pub cells: Vec<DriftCell>,
}

impl DriftMap {
    pub fn get(&self, layer: u16, head: u16) -> Option<&DriftCell> {
        self.cells.iter().find(|c| c.layer == layer && c.head == head)
    }
}

/// Cosine of two equally sized matrices viewed as flat vectors, clamped to
/// `[-1, 1]`. `None` if either has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-head similarity between the attention of a pretrained and a finetuned
/// checkpoint on the same inputs. Records are paired by `(layer, head,
/// example)`. `rel_tol` overrides each bundle's precision default when given.
pub fn finetune_drift(
    pretrained: &Bundle,
    finetuned: &Bundle,
    kind: AttentionKind,
    rel_tol: Option<f64>,
) -> Result<DriftMap> {
    let keys_a = record_keys(&pretrained.records);
    let keys_b = record_keys(&finetuned.records);
    let index_b: HashMap<RecordKey, usize> = keys_b.iter().enumerate().map(|(i, k)| (*k, i)).collect();

    let mut unmatched: Vec<String> =
        keys_a.iter().filter(|k| !index_b.contains_key(k)).map(|k| format!("pretrained-only {k:?}")).collect();
    let index_a: HashMap<RecordKey, usize> = keys_a.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    unmatched.extend(keys_b.iter().filter(|k| !index_a.contains_key(k)).map(|k| format!("finetuned-only {k:?}")));
    if !unmatched.is_empty() {
        let total = unmatched.len();
        unmatched.truncate(MAX_LISTED_KEYS);
        return Err(Error::analysis(format!(
            "{total} unmatched record keys: {}{}",
            unmatched.join(", "),
            if total > MAX_LISTED_KEYS { ", ..." } else { "" }
        )));
    }

    let mats_a =
        attention_matrices(&pretrained.records, kind, rel_tol.unwrap_or(pretrained.precision.default_rel_tol()))?;
    let mats_b =
        attention_matrices(&finetuned.records, kind, rel_tol.unwrap_or(finetuned.precision.default_rel_tol()))?;

    // (layer, head) -> (sum, defined, undefined)
    let mut acc: BTreeMap<(u16, u16), (f64, usize, usize)> = BTreeMap::new();
    let mut ordered: Vec<(RecordKey, usize)> = keys_a.iter().copied().zip(0..).collect();
    ordered.sort();
    for (key, ia) in ordered {
        let ib = index_b[&key];
        let (a, b) = (&mats_a[ia], &mats_b[ib]);
        if a.shape() != b.shape() {
            return Err(Error::analysis(format!(
                "{key:?}: pretrained matrix is {}x{}, finetuned is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let slot = acc.entry((key.layer, key.head)).or_insert((0.0, 0, 0));
        match cosine_similarity(a.data(), b.data()) {
            Some(c) => {
                slot.0 += c;
                slot.1 += 1;
            }
            None => slot.2 += 1,
        }
    }

    let cells = acc
        .into_iter()
        .map(|((layer, head), (sum, n, undefined))| DriftCell {
            layer,
            head,
            cosine: (n > 0).then(|| (sum / n as f64).clamp(-1.0, 1.0)),
            examples: n,
            undefined_pairs: undefined,
        })
        .collect();
    Ok(DriftMap { kind, cells })
}
