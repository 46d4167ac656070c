use effattn::analysis::{
    classify_pattern, cosine_similarity, finetune_drift, pattern_census, pattern_features, token_attention_map,
    token_relevance, PatternConfig, PatternLabelKind, TargetToken,
};
use effattn::attention_sim::{gaussian_matrix, softmax_rows, synthesize_heads, synthetic_annotations, SublayerConfig};
use effattn::{AttentionKind, Bundle, DenseMatrix, HeadRecord, Precision, TokenAnnotation, TokenCategory};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn permute(a: &DenseMatrix, p: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), a.cols(), |i, j| a.get(p[i], p[j]))
}

fn annotated(cats: &[(TokenCategory, u32, u32)]) -> Vec<TokenAnnotation> {
    cats.iter().enumerate().map(|(i, &(c, w, s))| TokenAnnotation::new(format!("t{i}"), c, w, s)).collect()
}

/// Record whose CLS row (row 0) is `row`; other rows are uniform.
fn cls_record(head: u16, row: &[f64], ann: Vec<TokenAnnotation>) -> HeadRecord {
    let n = row.len();
    let a = DenseMatrix::from_fn(n, n, |i, j| if i == 0 { row[j] } else { 1.0 / n as f64 });
    HeadRecord::new(11, head, a, DenseMatrix::identity(n), Some(ann)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_invariant_features(n in 2usize..24, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = softmax_rows(&gaussian_matrix(n, n, 2.0, &mut rng));
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng);
        let f = pattern_features(&a, None, 1).unwrap();
        let g = pattern_features(&permute(&a, &p), None, 1).unwrap();
        prop_assert!((f.column_concentration - g.column_concentration).abs() <= 1e-12);
        prop_assert!((f.entropy - g.entropy).abs() <= 1e-12);
    }

    #[test]
    fn kinds_agree_when_nullspace_is_trivial(n in 1usize..16, extra in 0usize..8, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = softmax_rows(&gaussian_matrix(n, n, 1.0, &mut rng));
        let v = gaussian_matrix(n, n + extra, 1.0, &mut rng);
        let r = HeadRecord::new(0, 0, a, v, None).unwrap();
        let cfg = PatternConfig::default();
        let s = pattern_census(std::slice::from_ref(&r), AttentionKind::Standard, TOL, &cfg).unwrap();
        let e = pattern_census(std::slice::from_ref(&r), AttentionKind::Effective, TOL, &cfg).unwrap();
        prop_assert_eq!(s.labels[0].1.label, e.labels[0].1.label);
    }

    #[test]
    fn token_map_matches_brute_force(seed: u64, n_examples in 1usize..4) {
        let cfg = SublayerConfig { d_s: 10, d_model: 24, d_q: 6, d_k: 6, d_v: 4, n_heads: 3, seed };
        let records = synthesize_heads(&cfg, n_examples).unwrap();
        for kind in [AttentionKind::Standard, AttentionKind::Effective] {
            for target in [TargetToken::Cls, TargetToken::Sep] {
                let map = token_attention_map(&records, target, kind, TOL).unwrap();
                for head in 0..3u16 {
                    // Independent recomputation straight from the definition.
                    let mut per_example = Vec::new();
                    for r in records.iter().filter(|r| r.head() == head) {
                        let a = r.attention(kind, TOL).unwrap();
                        let ann = r.annotations().unwrap();
                        let is_target = |i: usize| ann[i].category == target.category();
                        let mut vals = Vec::new();
                        for i in (0..a.rows()).filter(|&i| !is_target(i)) {
                            let best = (0..a.cols()).filter(|&j| is_target(j)).map(|j| a.get(i, j)).reduce(f64::max);
                            vals.push(best.unwrap());
                        }
                        per_example.push(vals.iter().sum::<f64>() / vals.len() as f64);
                    }
                    let expected = per_example.iter().sum::<f64>() / per_example.len() as f64;
                    prop_assert!((map.get(0, head).unwrap() - expected).abs() <= 1e-12);
                }
                if kind == AttentionKind::Effective {
                    let (lo, hi) = map.value_range.unwrap();
                    prop_assert!(map.cells.iter().all(|c| lo <= c.value && c.value <= hi));
                }
            }
        }
    }

    #[test]
    fn drift_matches_direct_formula(seed: u64) {
        let cfg = SublayerConfig { d_s: 9, d_model: 20, d_q: 5, d_k: 5, d_v: 4, n_heads: 2, seed };
        let pre = synthesize_heads(&cfg, 2).unwrap();
        let fin = synthesize_heads(&SublayerConfig { seed: seed.wrapping_add(1), ..cfg }, 2).unwrap();
        let pb = Bundle::new("t", "pretrained", Precision::F64).with_records(pre.clone());
        let fb = Bundle::new("t", "finetuned", Precision::F64).with_records(fin.clone());
        for kind in [AttentionKind::Standard, AttentionKind::Effective] {
            let map = finetune_drift(&pb, &fb, kind, None).unwrap();
            for head in 0..2u16 {
                let cos: Vec<f64> = pre
                    .iter()
                    .zip(&fin)
                    .filter(|(r, _)| r.head() == head)
                    .map(|(x, y)| {
                        let (a, b) = (x.attention(kind, TOL).unwrap(), y.attention(kind, TOL).unwrap());
                        let ab: f64 = a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum();
                        ab / (a.frobenius_norm() * b.frobenius_norm())
                    })
                    .collect();
                let expected = cos.iter().sum::<f64>() / cos.len() as f64;
                prop_assert!((map.get(0, head).unwrap().cosine.unwrap() - expected).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn drift_of_bundle_with_itself_is_one() {
    let cfg = SublayerConfig { n_heads: 4, ..SublayerConfig::bert_base(24, 8) };
    let b = Bundle::new("t", "x", Precision::F64).with_records(synthesize_heads(&cfg, 3).unwrap());
    for kind in [AttentionKind::Standard, AttentionKind::Effective] {
        for cell in finetune_drift(&b, &b, kind, None).unwrap().cells {
            assert!((cell.cosine.unwrap() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn drift_reports_unmatched_keys() {
    let cfg = SublayerConfig { d_s: 6, d_model: 12, d_q: 4, d_k: 4, d_v: 3, n_heads: 2, seed: 1 };
    let a = Bundle::new("t", "x", Precision::F64).with_records(synthesize_heads(&cfg, 2).unwrap());
    let b = Bundle::new("t", "y", Precision::F64).with_records(synthesize_heads(&cfg, 1).unwrap());
    let msg = finetune_drift(&a, &b, AttentionKind::Standard, None).unwrap_err().to_string();
    assert!(msg.contains("pretrained-only"), "{msg}");
}

#[test]
fn cosine_edge_cases() {
    assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), None);
    assert!((cosine_similarity(&[1.0, 2.0], &[-2.0, -4.0]).unwrap() + 1.0).abs() <= 1e-15);
}

#[test]
fn relevance_takes_max_over_tokens_of_a_category() {
    use TokenCategory::*;
    let ann = annotated(&[(Cls, 0, 0), (Noun, 1, 0), (Verb, 2, 0), (Noun, 3, 0), (Sep, 4, 0)]);
    let r = cls_record(0, &[0.1, 0.1, 0.3, 0.4, 0.1], ann);
    let t = token_relevance(&[r], AttentionKind::Standard, TOL).unwrap();
    assert_eq!(t.get(0, Noun).unwrap().weight, Some(0.4));
    assert_eq!(t.get(0, Verb).unwrap().weight, Some(0.3));
}

#[test]
fn relevance_uses_first_subtoken_only() {
    use TokenCategory::*;
    let ann = annotated(&[(Cls, 0, 0), (Noun, 1, 0), (Noun, 1, 1), (Sep, 2, 0)]);
    let r = cls_record(0, &[0.1, 0.2, 0.6, 0.1], ann);
    let t = token_relevance(&[r], AttentionKind::Standard, TOL).unwrap();
    assert_eq!(t.get(0, Noun).unwrap().weight, Some(0.2));
}

#[test]
fn relevance_absent_category_is_missing_not_zero() {
    use TokenCategory::*;
    let ann = annotated(&[(Cls, 0, 0), (Noun, 1, 0), (Sep, 2, 0)]);
    let r = cls_record(0, &[0.2, 0.5, 0.3], ann);
    let t = token_relevance(&[r], AttentionKind::Standard, TOL).unwrap();
    let cell = t.get(0, Pronoun).unwrap();
    assert_eq!(cell.weight, None);
    assert_eq!(cell.examples, 0);
}

#[test]
fn relevance_averages_over_examples() {
    use TokenCategory::*;
    let ann = annotated(&[(Cls, 0, 0), (Verb, 1, 0), (Sep, 2, 0)]);
    let r1 = cls_record(2, &[0.2, 0.2, 0.6], ann.clone());
    let r2 = cls_record(2, &[0.2, 0.6, 0.2], ann);
    let t = token_relevance(&[r1, r2], AttentionKind::Standard, TOL).unwrap();
    let cell = t.get(2, Verb).unwrap();
    assert!((cell.weight.unwrap() - 0.4).abs() <= 1e-15);
    assert_eq!(cell.examples, 2);
}

/// Fixture matrices with a known label. Blocks are wide enough (≥ 8) that
/// the ±1 band holds less than half of their mass.
fn labelled_fixtures() -> Vec<(HeadRecord, PatternLabelKind)> {
    let mut out = Vec::new();
    for n in [16usize, 24, 40] {
        let v = DenseMatrix::identity(n);
        out.push((
            HeadRecord::new(0, 0, DenseMatrix::identity(n), v.clone(), None).unwrap(),
            PatternLabelKind::Diagonal,
        ));
        let col = DenseMatrix::from_fn(n, n, |_, j| f64::from(j == n / 3));
        out.push((HeadRecord::new(0, 1, col, v.clone(), None).unwrap(), PatternLabelKind::Vertical));
        // Two segments: [CLS] a b [SEP] c d [SEP] ...
        let b = n / 2;
        let block = DenseMatrix::from_fn(n, n, |i, j| {
            if (i < b) == (j < b) {
                1.0 / if i < b { b } else { n - b } as f64
            } else {
                0.0
            }
        });
        let mut cats = vec![TokenCategory::Noun; n];
        cats[0] = TokenCategory::Cls;
        cats[b - 1] = TokenCategory::Sep;
        cats[n - 1] = TokenCategory::Sep;
        let ann =
            cats.iter().enumerate().map(|(i, &c)| TokenAnnotation::new(format!("w{i}"), c, i as u32, 0)).collect();
        out.push((HeadRecord::new(0, 2, block, v, Some(ann)).unwrap(), PatternLabelKind::Block));
    }
    out
}

#[test]
fn census_classifies_constructed_fixtures() {
    let fixtures = labelled_fixtures();
    let records: Vec<HeadRecord> = fixtures.iter().map(|(r, _)| r.clone()).collect();
    let census = pattern_census(&records, AttentionKind::Standard, TOL, &PatternConfig::default()).unwrap();
    for ((_, expected), (_, got)) in fixtures.iter().zip(&census.labels) {
        assert_eq!(got.label, *expected);
    }
    let third = 100.0 / 3.0;
    for label in [PatternLabelKind::Diagonal, PatternLabelKind::Vertical, PatternLabelKind::Block] {
        assert!((census.percentage(label) - third).abs() < 1e-9);
    }
}

#[test]
fn census_half_and_half() {
    let n = 8;
    let v = DenseMatrix::identity(n);
    let records = vec![
        HeadRecord::new(0, 0, DenseMatrix::identity(n), v.clone(), None).unwrap(),
        HeadRecord::new(0, 1, DenseMatrix::from_fn(n, n, |_, j| f64::from(j == 0)), v, None).unwrap(),
    ];
    let c = pattern_census(&records, AttentionKind::Standard, TOL, &PatternConfig::default()).unwrap();
    assert_eq!(c.total, 2);
    assert_eq!(c.percentage(PatternLabelKind::Diagonal), 50.0);
    assert_eq!(c.percentage(PatternLabelKind::Vertical), 50.0);
    assert_eq!(c.percentage(PatternLabelKind::Heterogeneous), 0.0);
}

#[test]
fn shipped_thresholds_file_parses() {
    let cfg = PatternConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../config/thresholds.toml")).unwrap();
    assert_eq!(cfg, PatternConfig::default());
    let p = classify_pattern(&DenseMatrix::identity(5), None, &cfg).unwrap();
    assert_eq!(p.label, PatternLabelKind::Diagonal);
}

#[test]
fn synthetic_annotations_are_well_formed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for len in [2usize, 5, 40] {
        let ann = synthetic_annotations(len, &mut rng);
        assert_eq!(ann.len(), len);
        assert_eq!(ann[0].category, TokenCategory::Cls);
        assert_eq!(ann[len - 1].category, TokenCategory::Sep);
    }
}
