//! Toy single-head self-attention sublayer.
//!
//! `Q = Z·W_Q`, `K = Z·W_K`, `V = Z·W_V`, `A = softmax(QKᵀ/√d_k)`, `Z' = AV`.
//! Used to generate ground-truth `(A, V)` pairs and as the baseline workload
//! for the overhead benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decomposition::HeadRecord;
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, NullspaceBasis};
use crate::tensor_io::{TokenAnnotation, TokenCategory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublayerConfig {
    pub d_s: usize,
    pub d_model: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl SublayerConfig {
    /// BERT-base head geometry at sequence length `d_s`.
    pub fn bert_base(d_s: usize, seed: u64) -> Self {
        Self { d_s, d_model: 768, d_q: 64, d_k: 64, d_v: 64, n_heads: 12, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_q != self.d_k {
            return Err(Error::arg(format!("d_q ({}) must equal d_k ({})", self.d_q, self.d_k)));
        }
        let dims = [self.d_s, self.d_model, self.d_q, self.d_k, self.d_v, self.n_heads];
        if dims.contains(&0) {
            return Err(Error::arg("all sublayer dimensions must be >= 1"));
        }
        if self.n_heads > usize::from(u16::MAX) {
            return Err(Error::arg("n_heads must fit in u16"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublayerWeights {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

impl SublayerWeights {
    /// Standard normal entries scaled by `1/√d_model`.
    pub fn random(cfg: &SublayerConfig, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        Self {
            w_q: gaussian_matrix(cfg.d_model, cfg.d_q, scale, rng),
            w_k: gaussian_matrix(cfg.d_model, cfg.d_k, scale, rng),
            w_v: gaussian_matrix(cfg.d_model, cfg.d_v, scale, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub a: DenseMatrix,
    pub z: DenseMatrix,
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = Vec::with_capacity(m.rows() * m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|x| (x - max).exp()));
        let total: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|x| *x /= total);
    }
    DenseMatrix::from_vec_unchecked(m.rows(), m.cols(), out)
}

pub fn forward(z_prev: &DenseMatrix, w: &SublayerWeights) -> Result<ForwardPass> {
    if w.w_q.cols() != w.w_k.cols() {
        return Err(Error::arg(format!("query width {} differs from key width {}", w.w_q.cols(), w.w_k.cols())));
    }
    let q = z_prev.matmul(&w.w_q)?;
    let k = z_prev.matmul(&w.w_k)?;
    let v = z_prev.matmul(&w.w_v)?;
    let logits = q.matmul_transposed(&k)?.scale(1.0 / (w.w_k.cols() as f64).sqrt());
    let a = softmax_rows(&logits);
    let z = a.matmul(&v)?;
    Ok(ForwardPass { q, k, v, a, z })
}

/// Seeded synthetic heads: for every example a fresh standard-normal input
/// `Z` (d_s × d_model) is pushed through each head's weights. Weights are
/// drawn once per head. Records are ordered example-major, head-minor, all in
/// layer 0, and carry synthetic token annotations.
pub fn synthesize_heads(cfg: &SublayerConfig, n_examples: usize) -> Result<Vec<HeadRecord>> {
    cfg.validate()?;
    if n_examples == 0 {
        return Err(Error::arg("at least one example is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<SublayerWeights> = (0..cfg.n_heads).map(|_| SublayerWeights::random(cfg, &mut rng)).collect();

    let mut records = Vec::with_capacity(n_examples * cfg.n_heads);
    for _ in 0..n_examples {
        let z_prev = gaussian_matrix(cfg.d_s, cfg.d_model, 1.0, &mut rng);
        let annotations = synthetic_annotations(cfg.d_s, &mut rng);
        for (h, w) in weights.iter().enumerate() {
            let pass = forward(&z_prev, w)?;
            records.push(HeadRecord::new(0, h as u16, pass.a, pass.v, Some(annotations.clone()))?);
        }
    }
    Ok(records)
}

/// `[CLS] tokens… [SEP]` with random categories; about one word in four is
/// split into two subtokens.
pub fn synthetic_annotations(len: usize, rng: &mut impl Rng) -> Vec<TokenAnnotation> {
    const BODY: [TokenCategory; 5] = [
        TokenCategory::Noun,
        TokenCategory::Pronoun,
        TokenCategory::Verb,
        TokenCategory::Punctuation,
        TokenCategory::Other,
    ];
    let mut out = Vec::with_capacity(len);
    out.push(TokenAnnotation::new("[CLS]", TokenCategory::Cls, 0, 0));
    let mut word = 0u32;
    while out.len() + 1 < len {
        word += 1;
        let category = BODY[rng.random_range(0..BODY.len())];
        out.push(TokenAnnotation::new(format!("w{word}"), category, word, 0));
        let splittable = !matches!(category, TokenCategory::Punctuation);
        if splittable && out.len() + 1 < len && rng.random_bool(0.25) {
            out.push(TokenAnnotation::new(format!("##w{word}"), category, word, 1));
        }
    }
    if len >= 2 {
        out.push(TokenAnnotation::new("[SEP]", TokenCategory::Sep, word + 1, 0));
    }
    out.truncate(len);
    out
}

pub fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let x: f64 = rng.sample(StandardNormal);
        x * scale
    })
}

/// A matrix whose rows are random combinations of the basis vectors, so that
/// every row lies in the nullspace (`Ã·V = 0`). Zero when the basis is empty.
pub fn random_nullspace_rows(basis: &NullspaceBasis, n_rows: usize, rng: &mut impl Rng) -> DenseMatrix {
    let d = basis.ambient_dim;
    let mut out = DenseMatrix::zeros(n_rows, d);
    for i in 0..n_rows {
        for u in &basis.vectors {
            let c: f64 = rng.sample(StandardNormal);
            for (j, x) in u.iter().enumerate() {
                out.set(i, j, out.get(i, j) + c * x);
            }
        }
    }
    out
}
