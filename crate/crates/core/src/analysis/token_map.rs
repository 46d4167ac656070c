use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::attention_matrices;
use crate::decomposition::{AttentionKind, HeadRecord};
use crate::error::{Error, Result};
use crate::tensor_io::TokenCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetToken {
    Cls,
    Sep,
}

impl TargetToken {
    pub fn category(self) -> TokenCategory {
        match self {
            TargetToken::Cls => TokenCategory::Cls,
            TargetToken::Sep => TokenCategory::Sep,
        }
    }
}

impl fmt::Display for TargetToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.category().as_str())
    }
}

impl FromStr for TargetToken {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cls" => Ok(TargetToken::Cls),
            "sep" => Ok(TargetToken::Sep),
            other => Err(Error::arg(format!("unknown target token {other:?} (expected cls or sep)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapCell {
    pub layer: u16,
    pub head: u16,
    pub value: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenMap {
    pub kind: AttentionKind,
    pub target: TargetToken,
    /// Ordered by `(layer, head)`.
    pub cells: Vec<MapCell>,
    /// `(min, max)` over the cells, carried for effective attention so that
    /// heatmaps of one task share a display scale.
    pub value_range: Option<(f64, f64)>,
    /// Records without the target token (or without annotations).
    pub skipped_records: usize,
}

impl TokenMap {
    pub fn get(&self, layer: u16, head: u16) -> Option<f64> {
        self.cells.iter().find(|c| c.layer == layer && c.head == head).map(|c| c.value)
    }
}

/// Attention paid to the target token by every other position, averaged over
/// positions and then over examples, per `(layer, head)`.
///
/// When the target occurs more than once (the two SEPs of a sentence pair), a
/// position's weight is its largest weight on any occurrence.
pub fn token_attention_map(
    records: &[HeadRecord],
    target: TargetToken,
    kind: AttentionKind,
    rel_tol: f64,
) -> Result<TokenMap> {
    let category = target.category();
    let usable: Vec<(&HeadRecord, Vec<usize>)> = records
        .iter()
        .filter_map(|r| {
            let ann = r.annotations()?;
            let targets: Vec<usize> =
                ann.iter().enumerate().filter(|(_, t)| t.category == category).map(|(i, _)| i).collect();
            (!targets.is_empty() && targets.len() < ann.len()).then_some((r, targets))
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::analysis(format!("no record contains a {target} token")));
    }
    let skipped = records.len() - usable.len();
    let owned: Vec<HeadRecord> = usable.iter().map(|(r, _)| (*r).clone()).collect();
    let matrices = attention_matrices(&owned, kind, rel_tol)?;

    let mut acc: BTreeMap<(u16, u16), (f64, usize)> = BTreeMap::new();
    for ((record, targets), a) in usable.iter().zip(&matrices) {
        let mut total = 0.0;
        let mut rows = 0usize;
        for i in 0..a.rows() {
            if targets.contains(&i) {
                continue;
            }
            total += targets.iter().map(|&t| a.get(i, t)).fold(f64::NEG_INFINITY, f64::max);
            rows += 1;
        }
        let slot = acc.entry((record.layer(), record.head())).or_insert((0.0, 0));
        slot.0 += total / rows as f64;
        slot.1 += 1;
    }

    let cells: Vec<MapCell> = acc
        .into_iter()
        .map(|((layer, head), (sum, n))| MapCell { layer, head, value: sum / n as f64, examples: n })
        .collect();
    let value_range = (kind == AttentionKind::Effective).then(|| {
        cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.value), hi.max(c.value)))
    });
    Ok(TokenMap { kind, target, cells, value_range, skipped_records: skipped })
}
