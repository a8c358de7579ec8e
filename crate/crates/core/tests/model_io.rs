use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roteq::equicheck::measure;
use roteq::io::{decode_checkpoint, decode_rtqt, encode_checkpoint, encode_rtqt, load_checkpoint, save_checkpoint};
use roteq::network::{Model, ModelConfig};
use roteq::real::Dtype;
use roteq::tensor::Tensor4;

fn small(r: usize) -> ModelConfig {
    ModelConfig {
        layer_multipliers: vec![1, 2],
        ..ModelConfig::roteqnet(2, r, 3, 2)
    }
    .resolved()
    .unwrap()
}

fn input(seed: u64, c: usize, h: usize, w: usize) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn([1, c, h, w], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn parameter_ratio_between_reference_sizes() {
    let rot = Model::<f32>::zeros(&ModelConfig::roteqnet(3, 8, 6, 4))
        .unwrap()
        .parameter_count();
    let base = Model::<f32>::zeros(&ModelConfig::baseline(12, 6, 4))
        .unwrap()
        .parameter_count();
    let ratio = base as f64 / rot as f64;
    assert!((5.0..=20.0).contains(&ratio), "{base} / {rot} = {ratio}");
    assert!((5e4..2e5).contains(&(rot as f64)), "{rot}");
    assert!((5e5..2e6).contains(&(base as f64)), "{base}");
}

#[test]
fn shape_contract_and_softmax_rows() {
    let model = Model::<f32>::init(&ModelConfig::roteqnet(1, 4, 3, 2), 3).unwrap();
    for (h, w) in [(64, 64), (128, 128), (128, 256)] {
        let p = model.forward_dense(&input(1, 2, h, w)).unwrap();
        assert_eq!(p.dims(), [1, 3, h, w]);
        for i in 0..h * w {
            let s: f32 = (0..3).map(|c| p.plane(0, c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn random_weight_quarter_turn_equivariance_across_orientations() {
    let x = input(5, 2, 64, 64);
    for r in [4, 8, 16] {
        let model = Model::<f32>::init(&small(r), 9).unwrap();
        for angle in [90.0, 180.0, 270.0] {
            let rec = measure(&model, &[&x], angle).unwrap();
            assert!(rec.agreement >= 0.995, "R={r} angle={angle}: {}", rec.agreement);
            assert!(rec.field_error < 1e-5, "R={r} angle={angle}: {}", rec.field_error);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::<f32>::init(&small(8), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rtqc");
    save_checkpoint(&path, &model).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoints_cross_precision() {
    let model = Model::<f32>::init(&small(4), 2).unwrap();
    let bytes = encode_checkpoint(&model).unwrap();
    let (wide, stored) = decode_checkpoint::<f64>(&bytes).unwrap();
    assert_eq!(stored, Dtype::F32);
    // f32 -> f64 -> f32 is lossless
    let narrow: Model<f32> = wide.cast();
    assert_eq!(encode_checkpoint(&narrow).unwrap(), bytes);
    // both precisions predict the same labels
    let x = input(4, 2, 64, 64);
    let a = model.forward_dense(&x).unwrap();
    let b = wide.forward_dense(&x.cast::<f64>()).unwrap();
    assert!(a.cast::<f64>().max_abs_diff(&b) < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rtqt_round_trips_f32(dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
        let mut bytes = Vec::new();
        encode_rtqt(&dims, &data, &mut bytes).unwrap();
        let raw = decode_rtqt(&mut &bytes[..]).unwrap();
        prop_assert_eq!(raw.dims(), &dims[..]);
        let back: Vec<f32> = raw.to_vec();
        prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rtqt_round_trips_f64(data in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut bytes = Vec::new();
        encode_rtqt(&[data.len()], &data, &mut bytes).unwrap();
        let back: Vec<f64> = decode_rtqt(&mut &bytes[..]).unwrap().to_vec();
        prop_assert!(back.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
