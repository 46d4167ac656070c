//! EATN bundle container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EATN" | version u32 | flags u32 | task_len u32 | task utf8
//!        | tag_len u32 | tag utf8 | record_count u32
//! record: layer u16 | head u16 | seq_len u32 | d_v u32
//!         | A (seq_len² elements) | V (seq_len·d_v elements)
//!         | ann_len u32 | ann utf8 (JSON array, empty when absent)
//! ```
//!
//! Flag bit 0 selects the element size (0 = f32, 1 = f64). Bit 1 marks a
//! bundle whose attention payloads are effective attention. Other bits must
//! be zero. Matrices are row-major IEEE-754.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::HeadRecord;
use crate::error::Result;
use crate::linalg::{DenseMatrix, DEFAULT_REL_TOL_F32, DEFAULT_REL_TOL_F64};

pub const MAGIC: [u8; 4] = *b"EATN";
pub const FORMAT_VERSION: u32 = 1;
pub const FLAG_F64: u32 = 1 << 0;
pub const FLAG_EFFECTIVE: u32 = 1 << 1;
const KNOWN_FLAGS: u32 = FLAG_F64 | FLAG_EFFECTIVE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenCategory {
    Noun,
    Pronoun,
    Verb,
    Sep,
    Cls,
    Punctuation,
    Other,
}

impl TokenCategory {
    pub const ALL: [TokenCategory; 7] = [
        TokenCategory::Noun,
        TokenCategory::Pronoun,
        TokenCategory::Verb,
        TokenCategory::Sep,
        TokenCategory::Cls,
        TokenCategory::Punctuation,
        TokenCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenCategory::Noun => "noun",
            TokenCategory::Pronoun => "pronoun",
            TokenCategory::Verb => "verb",
            TokenCategory::Sep => "sep",
            TokenCategory::Cls => "cls",
            TokenCategory::Punctuation => "punctuation",
            TokenCategory::Other => "other",
        }
    }
}

/// One token position. `subtoken_index == 0` marks the first piece of a word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub token_text: String,
    pub category: TokenCategory,
    pub word_index: u32,
    pub subtoken_index: u32,
}

impl TokenAnnotation {
    pub fn new(token_text: impl Into<String>, category: TokenCategory, word_index: u32, subtoken_index: u32) -> Self {
        Self { token_text: token_text.into(), category, word_index, subtoken_index }
    }

    pub fn is_first_subtoken(&self) -> bool {
        self.subtoken_index == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn element_size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Nullspace tolerance matching the storage precision.
    pub fn default_rel_tol(self) -> f64 {
        match self {
            Precision::F32 => DEFAULT_REL_TOL_F32,
            Precision::F64 => DEFAULT_REL_TOL_F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub format_version: u32,
    pub task_name: String,
    /// e.g. `pretrained` or `finetuned`.
    pub checkpoint_tag: String,
    pub precision: Precision,
    /// Attention payloads hold effective attention rather than softmax output.
    pub effective: bool,
    pub records: Vec<HeadRecord>,
}

impl Bundle {
    pub fn new(task_name: impl Into<String>, checkpoint_tag: impl Into<String>, precision: Precision) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task_name: task_name.into(),
            checkpoint_tag: checkpoint_tag.into(),
            precision,
            effective: false,
            records: Vec::new(),
        }
    }

    pub fn with_records(mut self, records: Vec<HeadRecord>) -> Self {
        self.records = records;
        self
    }

    /// Checks that every `(layer, head)` uses a single `d_v`.
    pub fn validate(&self) -> Result<(), FormatError> {
        let mut seen = std::collections::HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            let prev = *seen.entry((r.layer(), r.head())).or_insert(r.d_v());
            if prev != r.d_v() {
                return Err(FormatError::ShapeMismatch {
                    record: i,
                    detail: format!(
                        "layer {} head {} has d_v {} but an earlier record has {prev}",
                        r.layer(),
                        r.head(),
                        r.d_v()
                    ),
                });
            }
        }
        Ok(())
    }

    fn flags(&self) -> u32 {
        let mut flags = 0;
        if self.precision == Precision::F64 {
            flags |= FLAG_F64;
        }
        if self.effective {
            flags |= FLAG_EFFECTIVE;
        }
        flags
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected \"EATN\", found {found:02x?}")]
    BadMagic { offset: usize, found: Vec<u8> },

    #[error("unsupported format version {found} (reader supports {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },

    #[error("unknown flag bits {flags:#x}")]
    UnknownFlags { flags: u32 },

    #[error("truncated {what} at offset {offset}: need {needed} bytes, {available} left")]
    Truncated { what: &'static str, offset: usize, needed: u64, available: usize },

    #[error("invalid UTF-8 in {what} at offset {offset}")]
    InvalidUtf8 { what: &'static str, offset: usize },

    #[error("record {record}: {detail}")]
    ShapeMismatch { record: usize, detail: String },

    #[error("record {record}: {found} annotations for sequence length {expected}")]
    AnnotationMismatch { record: usize, expected: usize, found: usize },

    #[error("record {record}: malformed annotation JSON: {message}")]
    InvalidAnnotations { record: usize, message: String },

    #[error("record {record}: non-finite value in {what}")]
    NonFinite { record: usize, what: &'static str },

    #[error("{count} trailing bytes after last record at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },

    #[error("cannot encode {0}")]
    Unencodable(String),
}

pub fn encode_bundle(bundle: &Bundle) -> Result<Vec<u8>> {
    if bundle.format_version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: bundle.format_version }.into());
    }
    bundle.validate()?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&bundle.flags().to_le_bytes());
    put_str(&mut out, &bundle.task_name, "task name")?;
    put_str(&mut out, &bundle.checkpoint_tag, "checkpoint tag")?;
    put_u32(&mut out, bundle.records.len(), "record count")?;

    for (i, r) in bundle.records.iter().enumerate() {
        out.extend_from_slice(&r.layer().to_le_bytes());
        out.extend_from_slice(&r.head().to_le_bytes());
        put_u32(&mut out, r.seq_len(), "sequence length")?;
        put_u32(&mut out, r.d_v(), "value dimension")?;
        put_matrix(&mut out, r.a(), bundle.precision, i, "attention matrix")?;
        put_matrix(&mut out, r.v(), bundle.precision, i, "value matrix")?;
        match r.annotations() {
            Some(ann) => {
                let json = serde_json::to_string(ann)
                    .map_err(|e| FormatError::Unencodable(format!("annotations of record {i}: {e}")))?;
                put_str(&mut out, &json, "annotation block")?;
            }
            None => out.extend_from_slice(&0u32.to_le_bytes()),
        }
    }
    Ok(out)
}

/// Writes `bundle` and returns the number of bytes written.
pub fn write_bundle<W: Write>(bundle: &Bundle, mut dest: W) -> Result<u64> {
    let bytes = encode_bundle(bundle)?;
    dest.write_all(&bytes)?;
    dest.flush()?;
    Ok(bytes.len() as u64)
}

pub fn write_bundle_file(bundle: &Bundle, path: impl AsRef<Path>) -> Result<u64> {
    let file = File::create(path)?;
    write_bundle(bundle, BufWriter::new(file))
}

pub fn read_bundle<R: Read>(mut source: R) -> Result<Bundle> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    Ok(decode_bundle(&bytes)?)
}

pub fn read_bundle_file(path: impl AsRef<Path>) -> Result<Bundle> {
    read_bundle(File::open(path)?)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        let offset = magic.iter().zip(MAGIC.iter()).position(|(a, b)| a != b).unwrap_or(0);
        return Err(FormatError::BadMagic { offset, found: magic.to_vec() });
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { found: version });
    }
    let flags = cur.u32("flags")?;
    if flags & !KNOWN_FLAGS != 0 {
        return Err(FormatError::UnknownFlags { flags });
    }
    let precision = if flags & FLAG_F64 != 0 { Precision::F64 } else { Precision::F32 };
    let task_name = cur.string("task name")?;
    let checkpoint_tag = cur.string("checkpoint tag")?;
    let count = cur.u32("record count")? as usize;

    // Each record needs at least its fixed 16-byte header; cap the
    // preallocation so a corrupted count cannot demand huge memory.
    let mut records = Vec::with_capacity(count.min(cur.remaining() / 16));
    for i in 0..count {
        let layer = cur.u16("record header")?;
        let head = cur.u16("record header")?;
        let seq_len = cur.u32("record header")? as usize;
        let d_v = cur.u32("record header")? as usize;
        let a = cur.matrix(seq_len, seq_len, precision, i, "attention matrix")?;
        let v = cur.matrix(seq_len, d_v, precision, i, "value matrix")?;
        let ann_len = cur.u32("annotation length")? as usize;
        let ann_offset = cur.pos;
        let annotations = if ann_len == 0 {
            None
        } else {
            let raw = cur.take(ann_len, "annotation block")?;
            let text = std::str::from_utf8(raw)
                .map_err(|_| FormatError::InvalidUtf8 { what: "annotation block", offset: ann_offset })?;
            let parsed: Vec<TokenAnnotation> = serde_json::from_str(text)
                .map_err(|e| FormatError::InvalidAnnotations { record: i, message: e.to_string() })?;
            if parsed.len() != seq_len {
                return Err(FormatError::AnnotationMismatch { record: i, expected: seq_len, found: parsed.len() });
            }
            Some(parsed)
        };
        let record = HeadRecord::new(layer, head, a, v, annotations)
            .map_err(|e| FormatError::ShapeMismatch { record: i, detail: e.to_string() })?;
        records.push(record);
    }
    if cur.remaining() != 0 {
        return Err(FormatError::TrailingBytes { offset: cur.pos, count: cur.remaining() });
    }

    let bundle = Bundle {
        format_version: version,
        task_name,
        checkpoint_tag,
        precision,
        effective: flags & FLAG_EFFECTIVE != 0,
        records,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn put_u32(out: &mut Vec<u8>, value: usize, what: &str) -> Result<(), FormatError> {
    let v = u32::try_from(value).map_err(|_| FormatError::Unencodable(format!("{what} {value} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<(), FormatError> {
    put_u32(out, s.len(), what)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_matrix(
    out: &mut Vec<u8>,
    m: &DenseMatrix,
    precision: Precision,
    record: usize,
    what: &'static str,
) -> Result<(), FormatError> {
    match precision {
        Precision::F64 => m.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Precision::F32 => {
            for &x in m.data() {
                let narrow = x as f32;
                if !narrow.is_finite() {
                    return Err(FormatError::Unencodable(format!("record {record}: {what} value {x:e} overflows f32")));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if n > self.remaining() {
            return Err(FormatError::Truncated {
                what,
                offset: self.pos,
                needed: n as u64,
                available: self.remaining(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, FormatError> {
        let len = self.u32(what)? as usize;
        let offset = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::InvalidUtf8 { what, offset })
    }

    fn matrix(
        &mut self,
        rows: usize,
        cols: usize,
        precision: Precision,
        record: usize,
        what: &'static str,
    ) -> Result<DenseMatrix, FormatError> {
        let size = precision.element_size() as u64;
        let needed = (rows as u64).saturating_mul(cols as u64).saturating_mul(size);
        if needed > self.remaining() as u64 {
            return Err(FormatError::Truncated { what, offset: self.pos, needed, available: self.remaining() });
        }
        let raw = self.take(needed as usize, what)?;
        let data: Vec<f64> = match precision {
            Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Precision::F32 => {
                raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect()
            }
        };
        DenseMatrix::new(rows, cols, data).map_err(|_| FormatError::NonFinite { record, what })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample_record(layer: u16, head: u16, annotated: bool) -> HeadRecord {
        let a = DenseMatrix::from_rows(&[[0.25, 0.75], [0.5, 0.5]]).unwrap();
        let v = DenseMatrix::from_rows(&[[1.5, -2.0, 0.1], [0.0, 3.25, 1e-300]]).unwrap();
        let ann = annotated.then(|| {
            vec![
                TokenAnnotation::new("[CLS]", TokenCategory::Cls, 0, 0),
                TokenAnnotation::new("naïve \"quoted\"", TokenCategory::Noun, 1, 0),
            ]
        });
        HeadRecord::new(layer, head, a, v, ann).unwrap()
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let b = Bundle::new("rte", "pretrained", Precision::F64);
        let bytes = encode_bundle(&b).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 3 + 4 + 10 + 4);
        assert_eq!(&bytes[..4], b"EATN");
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn header_layout_is_exact() {
        let mut b = Bundle::new("t", "x", Precision::F64).with_records(vec![sample_record(3, 7, false)]);
        b.effective = true;
        let bytes = encode_bundle(&b).unwrap();
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(bytes[16], b't');
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes());
        assert_eq!(bytes[21], b'x');
        assert_eq!(&bytes[22..26], &1u32.to_le_bytes());
        assert_eq!(&bytes[26..28], &3u16.to_le_bytes());
        assert_eq!(&bytes[28..30], &7u16.to_le_bytes());
        assert_eq!(&bytes[30..34], &2u32.to_le_bytes());
        assert_eq!(&bytes[34..38], &3u32.to_le_bytes());
        assert_eq!(&bytes[38..46], &0.25f64.to_le_bytes());
        // 4 + 6 elements of 8 bytes, then an empty annotation block.
        assert_eq!(bytes.len(), 38 + 80 + 4);
        assert_eq!(&bytes[118..122], &0u32.to_le_bytes());
    }

    #[test]
    fn round_trip_with_annotations() {
        let b = Bundle::new("mrpc", "finetuned", Precision::F64)
            .with_records(vec![sample_record(0, 0, true), sample_record(0, 1, false)]);
        let mut buf = Vec::new();
        let n = write_bundle(&b, &mut buf).unwrap();
        assert_eq!(n as usize, buf.len());
        let back = read_bundle(buf.as_slice()).unwrap();
        assert_eq!(back, b);
        assert_eq!(encode_bundle(&back).unwrap(), buf);
    }

    #[test]
    fn f32_payloads_are_widened() {
        let b = Bundle::new("sst2", "pretrained", Precision::F32).with_records(vec![sample_record(1, 1, false)]);
        let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
        let r = &back.records[0];
        assert_eq!(r.v().get(0, 2), f64::from(0.1f32));
        // 1e-300 underflows to zero in f32
        assert_eq!(r.v().get(1, 2), 0.0);
        assert_eq!(r.a(), b.records[0].a());
        assert_eq!(back.precision.default_rel_tol(), 1e-5);
    }

    #[test]
    fn f32_overflow_is_unencodable() {
        let a = DenseMatrix::identity(1);
        let v = DenseMatrix::from_rows(&[[1e300]]).unwrap();
        let b = Bundle::new("t", "x", Precision::F32).with_records(vec![HeadRecord::new(0, 0, a, v, None).unwrap()]);
        assert!(matches!(encode_bundle(&b), Err(Error::Format(FormatError::Unencodable(_)))));
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let mut bytes = encode_bundle(&Bundle::new("t", "x", Precision::F64)).unwrap();
        bytes[2] = b'X';
        match decode_bundle(&bytes) {
            Err(FormatError::BadMagic { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn version_and_flags_are_checked() {
        let mut bytes = encode_bundle(&Bundle::new("t", "x", Precision::F64)).unwrap();
        bytes[4] = 2;
        assert_eq!(decode_bundle(&bytes), Err(FormatError::UnsupportedVersion { found: 2 }));
        bytes[4] = 1;
        bytes[9] = 0x80;
        assert!(matches!(decode_bundle(&bytes), Err(FormatError::UnknownFlags { .. })));
    }

    #[test]
    fn truncated_matrix_yields_no_partial_record() {
        let b = Bundle::new("t", "x", Precision::F64)
            .with_records(vec![sample_record(0, 0, false), sample_record(0, 1, false)]);
        let bytes = encode_bundle(&b).unwrap();
        // Cut inside the second record's value matrix.
        let cut = &bytes[..bytes.len() - 4 - 8];
        match decode_bundle(cut) {
            Err(FormatError::Truncated { what, .. }) => assert_eq!(what, "value matrix"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn annotation_errors_are_distinct() {
        let b = Bundle::new("t", "x", Precision::F64).with_records(vec![sample_record(0, 0, true)]);
        let bytes = encode_bundle(&b).unwrap();
        let ann_start = 4 + 4 + 4 + 5 + 5 + 4 + 12 + 80 + 4;
        let mut broken = bytes.clone();
        broken[ann_start] = b'{';
        assert!(matches!(decode_bundle(&broken), Err(FormatError::InvalidAnnotations { record: 0, .. })));

        // A one-element annotation array for a length-2 sequence.
        let one = serde_json::to_string(&[TokenAnnotation::new("a", TokenCategory::Other, 0, 0)]).unwrap();
        let mut short = bytes[..ann_start - 4].to_vec();
        short.extend_from_slice(&(one.len() as u32).to_le_bytes());
        short.extend_from_slice(one.as_bytes());
        assert_eq!(decode_bundle(&short), Err(FormatError::AnnotationMismatch { record: 0, expected: 2, found: 1 }));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let b = Bundle::new("t", "x", Precision::F64).with_records(vec![sample_record(0, 0, false)]);
        let mut bytes = encode_bundle(&b).unwrap();
        let a_start = 4 + 4 + 4 + 5 + 5 + 4 + 12;
        bytes[a_start..a_start + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_bundle(&bytes), Err(FormatError::NonFinite { record: 0, .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_bundle(&Bundle::new("t", "x", Precision::F64)).unwrap();
        bytes.push(0);
        assert!(matches!(decode_bundle(&bytes), Err(FormatError::TrailingBytes { count: 1, .. })));
    }

    #[test]
    fn inconsistent_d_v_per_head_rejected() {
        let r1 = sample_record(0, 0, false);
        let r2 = HeadRecord::new(0, 0, DenseMatrix::identity(2), DenseMatrix::zeros(2, 1), None).unwrap();
        let b = Bundle::new("t", "x", Precision::F64).with_records(vec![r1, r2]);
        assert!(matches!(encode_bundle(&b), Err(Error::Format(FormatError::ShapeMismatch { record: 1, .. }))));
    }

    #[test]
    fn huge_declared_sizes_do_not_allocate() {
        let mut bytes = encode_bundle(&Bundle::new("t", "x", Precision::F64)).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_bundle(&bytes), Err(FormatError::Truncated { .. })));
    }
}
