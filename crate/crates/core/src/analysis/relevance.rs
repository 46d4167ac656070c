use std::collections::BTreeMap;

use serde::Serialize;

use super::attention_matrices;
use crate::decomposition::{AttentionKind, HeadRecord};
use crate::error::{Error, Result};
use crate::tensor_io::TokenCategory;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelevanceCell {
    pub head: u16,
    pub category: TokenCategory,
    /// Mean over examples of the per-example category maximum; `None` when
    /// no example contains the category.
    pub weight: Option<f64>,
    /// Examples contributing to `weight`.
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenRelevanceTable {
    pub kind: AttentionKind,
    pub layer: u16,
    /// Ordered by head, then by `TokenCategory::ALL`.
    pub cells: Vec<RelevanceCell>,
    /// Final-layer records without a CLS token.
    pub skipped_records: usize,
}

impl TokenRelevanceTable {
    pub fn get(&self, head: u16, category: TokenCategory) -> Option<&RelevanceCell> {
        self.cells.iter().find(|c| c.head == head && c.category == category)
    }
}

/// Weight each token category receives from the CLS position in the final
/// layer.
///
/// Within one example, a category's weight is the largest weight among its
/// tokens, and a word split into subtokens is represented by its first
/// subtoken only. Per-example values are then averaged over examples.
pub fn token_relevance(records: &[HeadRecord], kind: AttentionKind, rel_tol: f64) -> Result<TokenRelevanceTable> {
    let layer = records.iter().map(HeadRecord::layer).max().ok_or_else(|| Error::analysis("no records to analyze"))?;
    let final_layer: Vec<HeadRecord> = records.iter().filter(|r| r.layer() == layer).cloned().collect();
    if let Some(r) = final_layer.iter().find(|r| r.annotations().is_none()) {
        return Err(Error::analysis(format!(
            "token relevance needs annotations; layer {} head {} has none",
            r.layer(),
            r.head()
        )));
    }
    let matrices = attention_matrices(&final_layer, kind, rel_tol)?;

    // head -> category -> (sum, count)
    let mut acc: BTreeMap<u16, BTreeMap<TokenCategory, (f64, usize)>> = BTreeMap::new();
    let mut skipped = 0;
    for (record, a) in final_layer.iter().zip(&matrices) {
        let ann = record.annotations().expect("checked above");
        let per_head = acc.entry(record.head()).or_default();
        let Some(cls) = ann.iter().position(|t| t.category == TokenCategory::Cls) else {
            skipped += 1;
            continue;
        };
        let row = a.row(cls);
        let mut best: BTreeMap<TokenCategory, f64> = BTreeMap::new();
        for (tok, &w) in ann.iter().zip(row) {
            if !tok.is_first_subtoken() {
                continue;
            }
            best.entry(tok.category).and_modify(|m| *m = m.max(w)).or_insert(w);
        }
        for (category, w) in best {
            let slot = per_head.entry(category).or_insert((0.0, 0));
            slot.0 += w;
            slot.1 += 1;
        }
    }

    let cells = acc
        .into_iter()
        .flat_map(|(head, per_cat)| {
            TokenCategory::ALL.into_iter().map(move |category| {
                let (sum, n) = per_cat.get(&category).copied().unwrap_or((0.0, 0));
                RelevanceCell { head, category, weight: (n > 0).then(|| sum / n as f64), examples: n }
            })
        })
        .collect();
    Ok(TokenRelevanceTable { kind, layer, cells, skipped_records: skipped })
}
