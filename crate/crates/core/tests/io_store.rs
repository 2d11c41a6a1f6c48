use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use unirecon::io_store::{
    load_checkpoint, read_checkpoint_manifest, read_tensor, save_checkpoint, write_tensor, CheckpointMeta, Stage, Tensor, Variant,
    CHECKPOINT_MANIFEST,
};
use unirecon::{Architecture, CascadeModel, Error, ParamScope};

fn meta(stage: Stage, variant: Variant) -> CheckpointMeta {
    CheckpointMeta {
        stage,
        variant,
        distill_layer: None,
        trained_on: vec!["brainish".into()],
    }
}

#[test]
fn random_320_square_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..320 * 320).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
    let t = Tensor::new(vec![320, 320], data).unwrap();
    let dir = tempdir().unwrap();
    let path = write_tensor(dir.path(), "x", &t).unwrap();
    let back = read_tensor(&path).unwrap();
    assert_eq!(back.shape(), &[320, 320]);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&t));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn any_finite_tensor_round_trips(shape in prop::collection::vec(1usize..5, 1..=4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff)).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let dir = tempdir().unwrap();
        let back = read_tensor(&write_tensor(dir.path(), "t", &t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), shape.as_slice());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn independent_model_round_trip_restores_every_parameter() {
    let model = CascadeModel::<f32>::new(Architecture::d5c5(), 11).unwrap();
    let dir = tempdir().unwrap();
    let manifest = save_checkpoint(&model, meta(Stage::S1, Variant::Independent), dir.path()).unwrap();
    assert_eq!(manifest.parameter_count, 144_650);
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.model.count_parameters(ParamScope::Total), 144_650);
    assert_eq!(ck.meta, meta(Stage::S1, Variant::Independent));
    for i in 0..model.tensor_count() {
        assert_eq!(ck.model.param_name(i), model.param_name(i));
        let a: Vec<u32> = ck.model.param(i).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = model.param(i).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
}

#[test]
fn universal_model_keeps_registry_and_frozen_flags() {
    let mut model = CascadeModel::<f32>::universal(Architecture::d5c5(), &["brainish", "kneeish"], 2).unwrap();
    model.bank_mut().unwrap().gamma_mut(1, 2).unwrap()[7] = 1.5;
    model.set_trainable(0, false);
    let dir = tempdir().unwrap();
    save_checkpoint(&model, meta(Stage::S2, Variant::Universal), dir.path()).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.model.anatomies(), ["brainish", "kneeish"]);
    assert_eq!(ck.model.count_parameters(ParamScope::Total), 144_650 + 2 * 1_280);
    assert_eq!(ck.model.bank().unwrap().gamma(1, 2).unwrap()[7], 1.5);
    assert!(!ck.model.is_trainable(0));
    assert!(ck.model.is_trainable(1));
}

#[test]
fn empty_directory_is_a_manifest_error() {
    let dir = tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Manifest(_))));
}

#[test]
fn dangling_tensor_reference_is_an_error() {
    let model = CascadeModel::<f32>::new(Architecture::d5c5(), 0).unwrap();
    let dir = tempdir().unwrap();
    save_checkpoint(&model, meta(Stage::S1, Variant::Independent), dir.path()).unwrap();
    fs::remove_file(dir.path().join("params/cascade3.conv2.weight.tnsr")).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("cascade3.conv2.weight"), "{err}");
}

#[test]
fn shape_mismatch_is_never_reshaped() {
    let model = CascadeModel::<f32>::new(Architecture::d5c5(), 0).unwrap();
    let dir = tempdir().unwrap();
    save_checkpoint(&model, meta(Stage::S1, Variant::Independent), dir.path()).unwrap();
    // same element count, different shape
    let bias = Tensor::new(vec![2, 16], vec![0.0; 32]).unwrap();
    write_tensor(&dir.path().join("params"), "cascade1.conv1.bias", &bias).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Shape(_))));

    save_checkpoint(&model, meta(Stage::S1, Variant::Independent), dir.path()).unwrap();
    load_checkpoint(dir.path()).unwrap();
    let mut manifest = read_checkpoint_manifest(dir.path()).unwrap();
    manifest.params[0].shape = vec![32, 2, 9];
    fs::write(dir.path().join(CHECKPOINT_MANIFEST), toml::to_string(&manifest).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Shape(_))));
}
