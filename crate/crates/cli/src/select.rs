use std::collections::BTreeSet;

use effattn::HeadRecord;

/// A set of layer or head indices given as `0,2,5-7`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet(BTreeSet<u16>);

impl IndexSet {
    pub fn contains(&self, i: u16) -> bool {
        self.0.contains(&i)
    }
}

pub fn parse_index_set(s: &str) -> Result<IndexSet, String> {
    let mut set = BTreeSet::new();
    for part in s.split(',').map(str::trim) {
        if part.is_empty() {
            return Err(format!("empty item in index list {s:?}"));
        }
        let parse = |x: &str| x.trim().parse::<u16>().map_err(|e| format!("{x:?}: {e}"));
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (parse(lo)?, parse(hi)?);
                if lo > hi {
                    return Err(format!("descending range {part:?}"));
                }
                set.extend(lo..=hi);
            }
            None => {
                set.insert(parse(part)?);
            }
        }
    }
    Ok(IndexSet(set))
}

/// Keeps the records whose layer and head pass both filters.
pub fn filter_records(
    records: Vec<HeadRecord>,
    layers: Option<&IndexSet>,
    heads: Option<&IndexSet>,
) -> Vec<HeadRecord> {
    records
        .into_iter()
        .filter(|r| layers.is_none_or(|s| s.contains(r.layer())) && heads.is_none_or(|s| s.contains(r.head())))
        .collect()
}
