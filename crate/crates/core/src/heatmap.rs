//! 8-bit binary PGM heatmaps over a `(layer, head)` grid.
//!
//! Values are min-max scaled to `0..=255`; the scaling pair is written to a
//! JSON sidecar next to the image so the figure can be read quantitatively.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layers: Vec<u16>,
    pub heads: Vec<u16>,
    /// Row-major over `layers × heads`; `None` where a cell has no value.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapSidecar {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub row_axis: &'static str,
    pub col_axis: &'static str,
    pub layers: Vec<u16>,
    pub heads: Vec<u16>,
    /// Value mapped to pixel 0.
    pub min: f64,
    /// Value mapped to pixel 255.
    pub max: f64,
    /// Cells without a value, as `(layer, head)`; rendered as 0.
    pub missing: Vec<(u16, u16)>,
}

impl Heatmap {
    pub fn from_cells(cells: impl IntoIterator<Item = (u16, u16, Option<f64>)>) -> Self {
        let cells: Vec<_> = cells.into_iter().collect();
        let layers: Vec<u16> = cells.iter().map(|c| c.0).collect::<BTreeSet<_>>().into_iter().collect();
        let heads: Vec<u16> = cells.iter().map(|c| c.1).collect::<BTreeSet<_>>().into_iter().collect();
        let mut values = vec![None; layers.len() * heads.len()];
        for (l, h, v) in cells {
            let i = layers.binary_search(&l).unwrap();
            let j = heads.binary_search(&h).unwrap();
            values[i * heads.len() + j] = v;
        }
        Self { layers, heads, values }
    }

    /// Finite `(min, max)` over present values.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.values.iter().flatten().fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((f64::min(lo, v), f64::max(hi, v))),
        })
    }

    /// Encodes the image as binary PGM. `range` fixes the scaling pair
    /// (otherwise the data range is used); a degenerate range maps every
    /// value to 0.
    pub fn to_pgm(&self, range: Option<(f64, f64)>) -> (Vec<u8>, (f64, f64)) {
        let (lo, hi) = range.or_else(|| self.value_range()).unwrap_or((0.0, 0.0));
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n255\n", self.heads.len(), self.layers.len()).into_bytes();
        out.extend(self.values.iter().map(|v| match v {
            Some(v) if span > 0.0 => ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8,
            _ => 0,
        }));
        (out, (lo, hi))
    }

    /// Writes `path` and `path` + `.json`. Returns the sidecar path.
    pub fn write(&self, path: impl AsRef<Path>, range: Option<(f64, f64)>) -> Result<PathBuf> {
        let path = path.as_ref();
        let (bytes, (min, max)) = self.to_pgm(range);
        fs::write(path, bytes)?;
        let missing = self
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(k, _)| (self.layers[k / self.heads.len()], self.heads[k % self.heads.len()]))
            .collect();
        let sidecar = HeatmapSidecar {
            image: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            width: self.heads.len(),
            height: self.layers.len(),
            row_axis: "layer",
            col_axis: "head",
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            min,
            max,
            missing,
        };
        let mut sidecar_path = path.as_os_str().to_owned();
        sidecar_path.push(".json");
        let sidecar_path = PathBuf::from(sidecar_path);
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::arg(e.to_string()))?;
        fs::write(&sidecar_path, json)?;
        Ok(sidecar_path)
    }
}
