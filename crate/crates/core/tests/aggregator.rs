//! Aggregator behaviour: order invariance, normalization, precision parity
//! and checkpoint stability.

mod common;

use common::{permutation_deviation, unit_f32};
use ovclf::aggregator::{aggregate_with, init_model, AggregatorConfig, AggregatorModel};
use ovclf::numerics::{l2_norm_f64, ParamSet};
use proptest::prelude::*;

fn tiny(seed: u64) -> AggregatorConfig {
    AggregatorConfig {
        blocks: 2,
        dim: 16,
        mlp_dim: 32,
        heads: 4,
        seed,
    }
}

#[test]
fn output_ignores_exemplar_order() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        for k in [2, 3, 5] {
            worst = worst.max(permutation_deviation(seed * 31 + k as u64, k));
        }
    }
    assert!(worst < 1e-5, "largest deviation {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_unit_vectors(seed in any::<u64>(), k in 1usize..12) {
        let model = init_model(tiny(seed)).unwrap();
        let mut r = common::rng(seed);
        let set: Vec<Vec<f32>> = (0..k).map(|_| unit_f32(&mut r, 16)).collect();
        let out = model.aggregate(&set).unwrap();
        prop_assert_eq!(out.len(), 16);
        prop_assert!((l2_norm_f64(&out) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_and_double_precision_agree(seed in any::<u64>(), k in 1usize..6) {
        let model = init_model(tiny(seed)).unwrap();
        let p64: ParamSet<f64> = model.params().cast();
        let mut r = common::rng(seed ^ 1);
        let set: Vec<Vec<f32>> = (0..k).map(|_| unit_f32(&mut r, 16)).collect();
        let a = model.aggregate(&set).unwrap();
        let b = aggregate_with(model.config(), &p64, &set).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((*x as f64 - y).abs() < 1e-5);
        }
    }
}

#[test]
fn parameter_count_matches_layout() {
    let config = AggregatorConfig::default();
    assert_eq!(config.param_count(), 12_601_856);
    assert_eq!(init_model(config).unwrap().param_count(), 12_601_856);
    assert_eq!(init_model(tiny(0)).unwrap().param_count(), tiny(0).param_count());
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(init_model(tiny(5)).unwrap(), init_model(tiny(5)).unwrap());
    assert_ne!(init_model(tiny(5)).unwrap(), init_model(tiny(6)).unwrap());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let model = init_model(tiny(11)).unwrap();
    let bytes = model.to_bytes().unwrap();
    let back = AggregatorModel::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    model.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    let set = vec![unit_f32(&mut common::rng(1), 16); 3];
    let a = model.aggregate(&set).unwrap();
    let b = AggregatorModel::load(&p).unwrap().aggregate(&set).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = init_model(tiny(1)).unwrap().to_bytes().unwrap();
    assert!(AggregatorModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(AggregatorModel::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(AggregatorModel::from_bytes(&extra).is_err());
}

#[test]
fn bad_inputs_are_rejected() {
    let model = init_model(tiny(2)).unwrap();
    assert!(matches!(
        model.aggregate::<Vec<f32>>(&[]),
        Err(ovclf::Error::Parameter(_))
    ));
    assert!(matches!(
        model.aggregate(&[vec![1.0f32; 8]]),
        Err(ovclf::Error::Validation(_))
    ));
    let bad = AggregatorConfig { heads: 3, ..tiny(0) };
    assert!(matches!(init_model(bad), Err(ovclf::Error::Config(_))));
    let zero = AggregatorConfig { blocks: 0, ..tiny(0) };
    assert!(init_model(zero).is_err());
}

#[test]
fn large_sets_stay_finite() {
    let model = init_model(tiny(3)).unwrap();
    let mut r = common::rng(3);
    let set: Vec<Vec<f32>> = (0..200).map(|_| unit_f32(&mut r, 16)).collect();
    let out = model.aggregate(&set).unwrap();
    assert!(out.iter().all(|x| x.is_finite()));
}
