use effattn::attention_sim::{gaussian_matrix, synthesize_heads, synthetic_annotations, SublayerConfig};
use effattn::decomposition::HeadRecord;
use effattn::tensor_io::{decode_bundle, encode_bundle, read_bundle_file, write_bundle_file, Bundle, Precision};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bundle(seed: u64) -> Bundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let precision = if rng.random_bool(0.5) { Precision::F64 } else { Precision::F32 };
    let n_heads = rng.random_range(1..4u16);
    let n_examples = rng.random_range(0..3usize);
    let mut records = Vec::new();
    let d_v: Vec<usize> = (0..n_heads).map(|_| rng.random_range(1..6)).collect();
    for _ in 0..n_examples {
        let ds = rng.random_range(1..9);
        let annotated = rng.random_bool(0.5);
        let ann = annotated.then(|| synthetic_annotations(ds, &mut rng));
        for h in 0..n_heads {
            let mut a = gaussian_matrix(ds, ds, 1.0, &mut rng);
            let mut v = gaussian_matrix(ds, d_v[h as usize], 1.0, &mut rng);
            if precision == Precision::F32 {
                // Payloads that are exactly representable survive bitwise.
                a = DenseMatrixExt::narrowed(&a);
                v = DenseMatrixExt::narrowed(&v);
            }
            records.push(HeadRecord::new(rng.random_range(0..12), h, a, v, ann.clone()).unwrap());
        }
    }
    let mut b = Bundle::new(format!("task-{seed}"), "pretrained", precision).with_records(records);
    b.effective = rng.random_bool(0.3);
    b
}

trait DenseMatrixExt {
    fn narrowed(&self) -> Self;
}

impl DenseMatrixExt for effattn::DenseMatrix {
    fn narrowed(&self) -> Self {
        effattn::DenseMatrix::new(self.rows(), self.cols(), self.data().iter().map(|&x| f64::from(x as f32)).collect())
            .unwrap()
    }
}

fn bitwise_equal(a: &Bundle, b: &Bundle) -> bool {
    a.task_name == b.task_name
        && a.checkpoint_tag == b.checkpoint_tag
        && a.precision == b.precision
        && a.effective == b.effective
        && a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.layer() == y.layer()
                && x.head() == y.head()
                && x.annotations() == y.annotations()
                && x.a().shape() == y.a().shape()
                && x.v().shape() == y.v().shape()
                && x.a().data().iter().zip(y.a().data()).all(|(p, q)| p.to_bits() == q.to_bits())
                && x.v().data().iter().zip(y.v().data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bitwise_identity(seed: u64) {
        let b = random_bundle(seed);
        let bytes = encode_bundle(&b).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        prop_assert!(bitwise_equal(&b, &back));
        prop_assert_eq!(encode_bundle(&back).unwrap(), bytes);
    }

    #[test]
    fn header_mutations_never_panic(seed: u64, flips in prop::collection::vec((0usize..64, any::<u8>()), 1..6)) {
        let bytes = encode_bundle(&random_bundle(seed)).unwrap();
        let mut mutated = bytes.clone();
        for (pos, mask) in flips {
            if pos < mutated.len() {
                mutated[pos] ^= mask;
            }
        }
        // Either a clean error or a valid bundle; never a panic.
        let _ = decode_bundle(&mutated);
    }

    #[test]
    fn every_truncation_is_rejected(seed: u64, cut in 0.0f64..1.0) {
        let bytes = encode_bundle(&random_bundle(seed)).unwrap();
        let len = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(decode_bundle(&bytes[..len.min(bytes.len() - 1)]).is_err());
    }
}

#[test]
fn bert_sized_record_count_survives() {
    let mut records = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(144);
    for layer in 0..12u16 {
        for head in 0..12u16 {
            let a = gaussian_matrix(4, 4, 1.0, &mut rng);
            let v = gaussian_matrix(4, 2, 1.0, &mut rng);
            records.push(HeadRecord::new(layer, head, a, v, None).unwrap());
        }
    }
    let b = Bundle::new("rte", "pretrained", Precision::F64).with_records(records);
    let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
    assert_eq!(back.records.len(), 144);
    assert_eq!(back, b);
}

#[test]
fn file_round_trip_of_synthetic_heads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.eatn");
    let cfg = SublayerConfig { d_s: 12, d_model: 32, d_q: 8, d_k: 8, d_v: 8, n_heads: 3, seed: 1 };
    let b = Bundle::new("synthetic", "pretrained", Precision::F64).with_records(synthesize_heads(&cfg, 2).unwrap());
    let n = write_bundle_file(&b, &path).unwrap();
    assert_eq!(n, std::fs::metadata(&path).unwrap().len());
    assert!(bitwise_equal(&read_bundle_file(&path).unwrap(), &b));
}

#[test]
fn writer_is_deterministic() {
    let b = random_bundle(77);
    assert_eq!(encode_bundle(&b).unwrap(), encode_bundle(&b.clone()).unwrap());
}
