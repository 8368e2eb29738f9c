use std::sync::OnceLock;

use diti_core::ddpm::{self, DenoiserModel, NetConfig, OptimConfig};
use diti_core::diti::{self, make_partition, mask_feature, EncoderDecoder, FeatureSource, PartitionKind, PartitionSpec};
use diti_core::schedule::VarianceSchedule;
use diti_core::seed;
use diti_core::synth::{Dataset, SyntheticSpec};
use diti_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn small() -> NetConfig {
    NetConfig {
        hidden: vec![64, 64],
        ..NetConfig::default()
    }
}

fn opt(iterations: usize) -> OptimConfig {
    OptimConfig {
        learning_rate: 1e-3,
        iterations,
        batch_size: 32,
        grad_clip: Some(1.0),
    }
}

struct Setup {
    data: Tensor,
    s: VarianceSchedule,
    dm: DenoiserModel,
}

/// Briefly trained denoiser on a small synthetic set.
fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let ds = Dataset::generate(&SyntheticSpec::reference(500, 9)).unwrap();
        let s = VarianceSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut rng = seed::stream(9, "init/dm");
        let mut dm = DenoiserModel::new(256, NetConfig::default(), &mut rng).unwrap();
        let data = ds.batch(&ds.train);
        ddpm::train_dm(&mut dm, &data, &s, &opt(1500), 9).unwrap();
        Setup { data, s, dm }
    })
}

fn fresh_ed(p: PartitionSpec, seed_: u64) -> EncoderDecoder {
    let mut rng = seed::stream(seed_, "init/diti");
    EncoderDecoder::new(256, p, &small(), &small(), &mut rng).unwrap()
}

fn partition() -> PartitionSpec {
    make_partition(PartitionKind::Balanced, 8, 64, 100).unwrap()
}

#[test]
fn detach_leaves_only_the_current_subset_trainable() {
    let st = setup();
    let p = partition();
    let mut ed = fresh_ed(p.clone(), 1);
    let mut rng = seed::stream(1, "locality");
    let last = ed.decoder.layers.last_mut().unwrap();
    last.weight = Tensor::randn(last.weight.shape(), 0.05, &mut rng).with_requires_grad(true);
    for detach in [true, false] {
        for t in [1usize, 13, 40, 77, 100] {
            let x0 = diti_core::synth::gather_rows(&st.data, &[t]);
            let eps = Tensor::randn(&[1, 256], 1.0, &mut rng);
            let tape = Tape::new();
            let g = diti::diti_graph(&tape, &st.dm, &ed, &x0, &[t], &eps, &st.s, detach, FeatureSource::Encoder).unwrap();
            tape.backward(g.loss).unwrap();
            // the encoder's output bias receives exactly dL/dz
            let mut enc = ed.encoder.clone();
            enc.collect_grads(&tape, g.encoder.as_ref().unwrap());
            let grad = enc.layers.last().unwrap().bias.grad.clone().unwrap();
            let cur = p.dims_of(p.subset_of(t).unwrap()).unwrap();
            for (j, &v) in grad.iter().enumerate() {
                if cur.contains(&j) || (!detach && j < cur.start) {
                    continue;
                }
                assert_eq!(v, 0.0, "detach {detach}, t {t}, dim {j}");
            }
            assert!(grad[cur].iter().any(|&v| v != 0.0));
            let mut probe = st.dm.net.clone();
            probe.collect_grads(&tape, &g.dm);
            assert!(probe.params().iter().all(|p| p.grad.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
        }
    }
}

#[test]
fn training_is_deterministic_and_leaves_the_denoiser_untouched() {
    let st = setup();
    let before: Vec<Vec<u32>> = st.dm.net.params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect();
    let run = || {
        let mut ed = fresh_ed(partition(), 2);
        let rep = diti::train_diti(&st.dm, &mut ed, &st.data, &st.s, &opt(60), true, None, 2).unwrap();
        (rep, ed.encode(&st.data).unwrap())
    };
    let (a, za) = run();
    let (b, zb) = run();
    assert_eq!(a, b);
    assert_eq!(za.data(), zb.data());
    let after: Vec<Vec<u32>> = st.dm.net.params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(before, after);
}

#[test]
fn zero_decoder_reduces_to_rescaled_denoiser_loss() {
    let st = setup();
    let mut rng = seed::stream(3, "reduction");
    let rows = 12;
    let idx: Vec<usize> = (0..rows).collect();
    let x0 = diti_core::synth::gather_rows(&st.data, &idx);
    let ts: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=100)).collect();
    let eps = Tensor::randn(&[rows, 256], 1.0, &mut rng);
    let ed = fresh_ed(partition(), 3);
    let with = diti::diti_loss_batch(&st.dm, Some(&ed), &x0, &ts, &eps, &st.s, None).unwrap();
    let without = diti::diti_loss_batch(&st.dm, None, &x0, &ts, &eps, &st.s, None).unwrap();
    let dm = ddpm::dm_loss_batch(&st.dm, &x0, &ts, &eps, &st.s).unwrap();
    for r in 0..rows {
        let t = ts[r];
        let want = dm[r] * st.s.lambda(t) / st.s.snr(t);
        assert_eq!(with[r], without[r], "zero-initialised decoder must add nothing");
        assert!((without[r] - want).abs() <= 1e-9 * want.max(1e-12), "t {t}: {} vs {want}", without[r]);
    }
}

#[test]
fn detach_converges_more_slowly() {
    let st = setup();
    let trace = |detach: bool| {
        let mut ed = fresh_ed(partition(), 4);
        diti::train_diti(&st.dm, &mut ed, &st.data, &st.s, &opt(1500), detach, None, 4).unwrap().smoothed(300)
    };
    let (with, without) = (trace(true), trace(false));
    let n = with.len() - 1;
    assert!(with[n] > without[n], "detach {} vs plain {} at iteration {}", with[n], without[n], n + 1);
}

proptest! {
    #[test]
    fn masking_is_idempotent_and_monotone(
        z in prop::collection::vec(-2.0f32..2.0, 64),
        t in 1usize..=100,
        u in 1usize..=100,
        k in prop::sample::select(vec![1usize, 2, 4, 8, 16]),
    ) {
        let p = make_partition(PartitionKind::Balanced, k, 64, 100).unwrap();
        let m = mask_feature(&z, &p, t).unwrap();
        prop_assert_eq!(&mask_feature(&m, &p, t).unwrap(), &m);
        let (lo, hi) = (t.min(u), t.max(u));
        let a = mask_feature(&z, &p, lo).unwrap();
        let b = mask_feature(&z, &p, hi).unwrap();
        for j in 0..64 {
            if a[j] != 0.0 {
                prop_assert!(b[j] != 0.0, "dim {} visible at {} but not at {}", j, lo, hi);
            }
        }
        prop_assert_eq!(mask_feature(&z, &p, 100).unwrap(), z);
    }

    #[test]
    fn every_step_maps_to_one_subset(k in 1usize..=20, t in 1usize..=100) {
        let d = 20 * 3;
        prop_assume!(d % k == 0);
        let p = make_partition(PartitionKind::Balanced, k, d, 100).unwrap();
        let i = p.subset_of(t).unwrap();
        prop_assert!(p.t_range(i).unwrap().contains(&t));
        prop_assert_eq!((1..=k).filter(|&j| p.t_range(j).unwrap().contains(&t)).count(), 1);
        prop_assert_eq!(p.subset_dims.iter().sum::<usize>(), d);
    }
}

#[test]
fn invalid_partitions_are_rejected() {
    assert!(make_partition(PartitionKind::Balanced, 0, 64, 100).is_err());
    assert!(make_partition(PartitionKind::Balanced, 7, 64, 100).is_err());
    assert!(make_partition(PartitionKind::Balanced, 8, 64, 4).is_err());
    assert!(make_partition(PartitionKind::Imbalanced, 4, 64, 100).is_err());
    assert!(make_partition(PartitionKind::Imbalanced, 5, 3, 100).is_err());
    assert!(make_partition(PartitionKind::Imbalanced, 5, 64, 5).is_err());
    let p = make_partition(PartitionKind::Imbalanced, 5, 64, 100).unwrap();
    assert!(p.subset_of(0).is_err());
    assert!(p.subset_of(101).is_err());
    assert!(mask_feature(&[0.0; 63], &p, 10).is_err());
}
