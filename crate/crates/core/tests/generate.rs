use diti_core::ddpm::{DenoiserModel, NetConfig, SamplingSequence};
use diti_core::diti::{make_partition, EncoderDecoder, PartitionKind};
use diti_core::generate::{
    counterfactual, lerp_subset, manipulate, reconstruct, slerp, FeatureStats, SparseClassifier,
};
use diti_core::schedule::VarianceSchedule;
use diti_core::seed;
use diti_core::synth::{Dataset, SyntheticSpec};
use diti_tensor::Tensor;
use proptest::prelude::*;

fn small() -> NetConfig {
    NetConfig {
        hidden: vec![32],
        ..NetConfig::default()
    }
}

/// Untrained models with a non-zero decoder so the guidance matters.
fn models() -> (DenoiserModel, EncoderDecoder, VarianceSchedule, Tensor, Tensor) {
    let s = VarianceSchedule::linear(100, 1e-4, 0.02).unwrap();
    let mut rng = seed::stream(5, "generate");
    let dm = DenoiserModel::new(256, small(), &mut rng).unwrap();
    let p = make_partition(PartitionKind::Balanced, 4, 16, 100).unwrap();
    let mut ed = EncoderDecoder::new(256, p, &small(), &small(), &mut rng).unwrap();
    let last = ed.decoder.layers.last_mut().unwrap();
    last.weight = Tensor::randn(last.weight.shape(), 0.05, &mut rng);
    let ds = Dataset::generate(&SyntheticSpec::reference(20, 5)).unwrap();
    let a = ds.batch(&(0..4).collect::<Vec<_>>());
    let b = ds.batch(&(4..8).collect::<Vec<_>>());
    (dm, ed, s, a, b)
}

#[test]
fn zero_strength_edits_reproduce_the_reconstruction() {
    let (dm, ed, s, a, b) = models();
    let seq = SamplingSequence::uniform(11, 100).unwrap();
    let rec = reconstruct(&dm, &ed, &a, &s, &seq).unwrap();
    assert!(rec.data().iter().all(|v| v.is_finite()));
    for subsets in [vec![1], vec![2, 3], vec![1, 2, 3, 4]] {
        let cf = counterfactual(&a, &b, &subsets, 0.0, &dm, &ed, &s, &seq).unwrap();
        assert_eq!(cf.data(), rec.data(), "subsets {subsets:?}");
    }
    let full = counterfactual(&a, &b, &[1, 2, 3, 4], 1.0, &dm, &ed, &s, &seq).unwrap();
    assert_ne!(full.data(), rec.data());

    let z = ed.encode(&a).unwrap();
    let stats = FeatureStats::from_features(&z).unwrap();
    let clf = SparseClassifier {
        weight: (0..16).map(|j| if j < 4 { 1.0 } else { 0.0 }).collect(),
        bias: 0.0,
        active: (0..16).map(|j| j < 4).collect(),
        budget: 4,
    };
    let m = manipulate(&a, &clf, &stats, 0.0, &dm, &ed, &s, &seq).unwrap();
    assert_eq!(m.data(), rec.data());
    assert!(counterfactual(&a, &ds_rows(&b, 3), &[1], 0.5, &dm, &ed, &s, &seq).is_err());
}

fn ds_rows(t: &Tensor, n: usize) -> Tensor {
    Tensor::new(vec![n, 256], t.data()[..n * 256].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn slerp_stays_on_the_sphere(
        a in prop::collection::vec(-1.0f32..1.0, 8),
        b in prop::collection::vec(-1.0f32..1.0, 8),
        lam in 0.0f64..1.0,
    ) {
        let unit = |v: Vec<f32>| {
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            Tensor::row(v.iter().map(|x| x / n).collect()).unwrap()
        };
        prop_assume!(a.iter().any(|x| x.abs() > 0.1) && b.iter().any(|x| x.abs() > 0.1));
        let (a, b) = (unit(a), unit(b));
        let dot: f32 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        prop_assume!(dot > -0.99);
        let m = slerp(&a, &b, lam).unwrap();
        prop_assert!((m.norm() - 1.0).abs() < 1e-4, "norm {}", m.norm());
        let start = slerp(&a, &b, 0.0).unwrap();
        prop_assert_eq!(start.data(), a.data());
    }

    #[test]
    fn lerp_subset_only_moves_selected_dims(
        z in prop::collection::vec(-3.0f32..3.0, 16),
        z2 in prop::collection::vec(-3.0f32..3.0, 16),
        pick in prop::collection::btree_set(1usize..=4, 1..=4),
        lam in 0.0f64..=1.0,
    ) {
        let p = make_partition(PartitionKind::Balanced, 4, 16, 100).unwrap();
        let subsets: Vec<usize> = pick.into_iter().collect();
        let out = lerp_subset(&z, &z2, &subsets, &p, lam).unwrap();
        for j in 0..16 {
            let i = 1 + j / 4;
            if subsets.contains(&i) {
                let (lo, hi) = (z[j].min(z2[j]), z[j].max(z2[j]));
                prop_assert!(out[j] >= lo - 1e-6 && out[j] <= hi + 1e-6);
            } else {
                prop_assert_eq!(out[j], z[j]);
            }
        }
    }
}
