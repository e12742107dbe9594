//! Finite-difference gradient checks on toy instances of every family, and
//! property tests of the batch-level invariants.

use hypowatch_core::classical::ClassWeights;
use hypowatch_core::dataset::SequenceBatch;
use hypowatch_core::rng::rng_from_seed;
use hypowatch_nn::gradcheck::gradcheck;
use hypowatch_nn::{build, Family, Init, ModelSpec};
use proptest::prelude::*;
use rand::Rng;

fn toy_batch(n: usize, channels: usize, length: usize, seed: u64) -> SequenceBatch {
    let mut rng = rng_from_seed(seed);
    let data = (0..n * channels * length).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| (i % 2) as f64).collect();
    SequenceBatch { n, channels, length, data, labels }
}

fn toy_spec(family: Family) -> ModelSpec {
    let mut spec = match family {
        Family::Mlp => ModelSpec::new(family, 24, 1),
        _ => ModelSpec::new(family, 2, 12),
    };
    spec.hidden = 4;
    spec.cnn.channels = 3;
    spec.tcn.channels = 3;
    spec.mlp.layers = vec![5, 3];
    spec
}

#[test]
fn every_family_passes_gradcheck() {
    let started = std::time::Instant::now();
    for family in Family::ALL {
        let spec = toy_spec(family);
        let net = build(&spec, 11, Init::Glorot).unwrap();
        let batch = if family == Family::Mlp { toy_batch(2, 24, 1, 3) } else { toy_batch(2, 2, 12, 3) };
        let cw = ClassWeights { w_pos: 3.0, w_neg: 0.6 };
        let report = gradcheck(&net, &batch, cw, 1e-5).unwrap();
        assert_eq!(report.checked, net.n_params());
        assert!(report.max_rel_err < 1e-4, "{}: {:?}", family.name(), report);
    }
    assert!(started.elapsed().as_secs() < 30);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predictions_are_probabilities_and_per_row(seed in 0u64..1000, fam in 0usize..5) {
        let family = Family::ALL[fam];
        let spec = toy_spec(family);
        let net = build(&spec, seed, Init::Glorot).unwrap();
        let batch = if family == Family::Mlp { toy_batch(5, 24, 1, seed) } else { toy_batch(5, 2, 12, seed) };
        let p = net.predict_proba(&batch).unwrap();
        prop_assert_eq!(p.len(), 5);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        // Scoring one row alone must give the same value as inside the batch.
        let row = batch.sample(2).to_vec();
        let single = SequenceBatch { n: 1, channels: batch.channels, length: batch.length, data: row, labels: vec![0.0] };
        prop_assert!((net.predict_proba(&single).unwrap()[0] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn document_round_trip_preserves_predictions(seed in 0u64..1000, fam in 0usize..5) {
        let family = Family::ALL[fam];
        let net = build(&toy_spec(family), seed, Init::Glorot).unwrap();
        let batch = if family == Family::Mlp { toy_batch(3, 24, 1, seed) } else { toy_batch(3, 2, 12, seed) };
        let back = hypowatch_nn::Net::from_document(&net.to_document().unwrap()).unwrap();
        prop_assert_eq!(net.predict_proba(&batch).unwrap(), back.predict_proba(&batch).unwrap());
    }
}
