//! Rule-based attention pattern taxonomy.
//!
//! Features are computed on absolute weights so that effective attention,
//! which may be negative, can be classified with the same rules:
//!
//! - `column_concentration`: largest column mass over total mass
//! - `diagonal_mass`: mass within `bandwidth` of the diagonal over total mass
//! - `block_mass`: mass inside the two segments (when a boundary is known)
//! - `entropy`: mean Shannon entropy (nats) of the row distributions
//!
//! Rules are tried in the configured order; the first match wins and
//! `heterogeneous` is the fallback.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{attention_matrices, record_keys, RecordKey};
use crate::decomposition::{AttentionKind, HeadRecord};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::tensor_io::{TokenAnnotation, TokenCategory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternLabelKind {
    Vertical,
    Diagonal,
    VerticalDiagonal,
    Block,
    Heterogeneous,
}

impl PatternLabelKind {
    pub const ALL: [PatternLabelKind; 5] = [
        PatternLabelKind::Vertical,
        PatternLabelKind::Diagonal,
        PatternLabelKind::VerticalDiagonal,
        PatternLabelKind::Block,
        PatternLabelKind::Heterogeneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternLabelKind::Vertical => "vertical",
            PatternLabelKind::Diagonal => "diagonal",
            PatternLabelKind::VerticalDiagonal => "vertical_diagonal",
            PatternLabelKind::Block => "block",
            PatternLabelKind::Heterogeneous => "heterogeneous",
        }
    }
}

impl fmt::Display for PatternLabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatternFeatures {
    pub column_concentration: f64,
    pub diagonal_mass: f64,
    /// `None` when no segment boundary is known.
    pub block_mass: Option<f64>,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PatternLabel {
    pub label: PatternLabelKind,
    pub features: PatternFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternThresholds {
    pub vertical: f64,
    pub diagonal: f64,
    /// Applied to both column concentration and diagonal mass.
    pub vertical_diagonal: f64,
    pub block: f64,
}

/// Versioned classifier configuration, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub version: u32,
    pub diagonal_bandwidth: usize,
    pub rule_order: Vec<PatternLabelKind>,
    pub thresholds: PatternThresholds,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            version: 1,
            diagonal_bandwidth: 1,
            rule_order: vec![
                PatternLabelKind::Vertical,
                PatternLabelKind::Diagonal,
                PatternLabelKind::VerticalDiagonal,
                PatternLabelKind::Block,
            ],
            thresholds: PatternThresholds { vertical: 0.5, diagonal: 0.5, vertical_diagonal: 0.35, block: 0.8 },
        }
    }
}

impl PatternConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::arg(format!("invalid thresholds file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pattern config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::arg(format!("unsupported thresholds version {}", self.version)));
        }
        let t = &self.thresholds;
        for (name, x) in [
            ("vertical", t.vertical),
            ("diagonal", t.diagonal),
            ("vertical_diagonal", t.vertical_diagonal),
            ("block", t.block),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::arg(format!("threshold {name} = {x} is outside [0, 1]")));
            }
        }
        for (i, label) in self.rule_order.iter().enumerate() {
            if *label == PatternLabelKind::Heterogeneous {
                return Err(Error::arg("heterogeneous is the fallback and cannot appear in rule_order"));
            }
            if self.rule_order[..i].contains(label) {
                return Err(Error::arg(format!("{label} appears twice in rule_order")));
            }
        }
        Ok(())
    }

    fn matches(&self, label: PatternLabelKind, f: &PatternFeatures) -> bool {
        let t = &self.thresholds;
        match label {
            PatternLabelKind::Vertical => f.column_concentration >= t.vertical,
            PatternLabelKind::Diagonal => f.diagonal_mass >= t.diagonal,
            PatternLabelKind::VerticalDiagonal => {
                f.column_concentration >= t.vertical_diagonal && f.diagonal_mass >= t.vertical_diagonal
            }
            PatternLabelKind::Block => f.block_mass.is_some_and(|b| b >= t.block),
            PatternLabelKind::Heterogeneous => true,
        }
    }
}

pub fn pattern_features(a: &DenseMatrix, segment_boundary: Option<usize>, bandwidth: usize) -> Result<PatternFeatures> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::arg(format!("pattern classification needs a square matrix, got {}x{}", a.rows(), a.cols())));
    }
    if let Some(b) = segment_boundary {
        if b > n {
            return Err(Error::arg(format!("segment boundary {b} beyond sequence length {n}")));
        }
    }

    let mut total = 0.0;
    let mut diagonal = 0.0;
    let mut within = 0.0;
    let mut columns = vec![0.0; n];
    let mut entropy_sum = 0.0;
    for i in 0..n {
        let row = a.row(i);
        let row_mass: f64 = row.iter().map(|x| x.abs()).sum();
        for (j, x) in row.iter().enumerate() {
            let w = x.abs();
            columns[j] += w;
            if i.abs_diff(j) <= bandwidth {
                diagonal += w;
            }
            if let Some(b) = segment_boundary {
                if (i < b) == (j < b) {
                    within += w;
                }
            }
        }
        total += row_mass;
        if row_mass > 0.0 {
            entropy_sum -= row.iter().map(|x| x.abs() / row_mass).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        }
    }

    let frac = |x: f64| if total > 0.0 { x / total } else { 0.0 };
    Ok(PatternFeatures {
        column_concentration: frac(columns.iter().copied().fold(0.0, f64::max)),
        diagonal_mass: frac(diagonal),
        block_mass: segment_boundary.map(|_| frac(within)),
        entropy: if n > 0 { entropy_sum / n as f64 } else { 0.0 },
    })
}

pub fn classify_pattern(
    a: &DenseMatrix,
    segment_boundary: Option<usize>,
    config: &PatternConfig,
) -> Result<PatternLabel> {
    let features = pattern_features(a, segment_boundary, config.diagonal_bandwidth)?;
    let label = config
        .rule_order
        .iter()
        .copied()
        .find(|&l| config.matches(l, &features))
        .unwrap_or(PatternLabelKind::Heterogeneous);
    Ok(PatternLabel { label, features })
}

/// Start of the second segment: the position after the first of at least
/// two SEP tokens. `None` for single-segment inputs.
pub fn segment_boundary(annotations: &[TokenAnnotation]) -> Option<usize> {
    let mut seps = annotations.iter().enumerate().filter(|(_, t)| t.category == TokenCategory::Sep);
    let (first, _) = seps.next()?;
    seps.next()?;
    Some(first + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternCensus {
    pub kind: AttentionKind,
    pub total: usize,
    /// One entry per label in `PatternLabelKind::ALL` order.
    pub counts: Vec<(PatternLabelKind, usize)>,
    pub percentages: Vec<(PatternLabelKind, f64)>,
    pub labels: Vec<(RecordKey, PatternLabel)>,
}

impl PatternCensus {
    pub fn percentage(&self, label: PatternLabelKind) -> f64 {
        self.percentages.iter().find(|(l, _)| *l == label).map_or(0.0, |(_, p)| *p)
    }
}

pub fn pattern_census(
    records: &[HeadRecord],
    kind: AttentionKind,
    rel_tol: f64,
    config: &PatternConfig,
) -> Result<PatternCensus> {
    if records.is_empty() {
        return Err(Error::analysis("pattern census over an empty record set"));
    }
    let matrices = attention_matrices(records, kind, rel_tol)?;
    let keys = record_keys(records);
    let mut labels = Vec::with_capacity(records.len());
    for ((record, a), key) in records.iter().zip(&matrices).zip(keys) {
        let boundary = record.annotations().and_then(segment_boundary);
        labels.push((key, classify_pattern(a, boundary, config)?));
    }
    let total = labels.len();
    let counts: Vec<(PatternLabelKind, usize)> =
        PatternLabelKind::ALL.into_iter().map(|l| (l, labels.iter().filter(|(_, p)| p.label == l).count())).collect();
    let percentages = counts.iter().map(|&(l, c)| (l, 100.0 * c as f64 / total as f64)).collect();
    Ok(PatternCensus { kind, total, counts, percentages, labels })
}
