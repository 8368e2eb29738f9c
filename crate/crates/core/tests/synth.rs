use std::collections::HashSet;

use diti_core::synth::{self, Dataset, FactorRecord, SyntheticSpec};
use diti_core::theory;
use proptest::prelude::*;

fn spec() -> SyntheticSpec {
    SyntheticSpec::reference(300, 5)
}

#[test]
fn base_image_matches_golden_file() {
    let spec = spec();
    let img = synth::render_pixels(&spec, &FactorRecord::zeros(&spec)).unwrap();
    let golden: Vec<f32> = include_str!("data/base_image.csv")
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f32>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(golden.len(), 256);
    for (i, (a, b)) in img.iter().zip(&golden).enumerate() {
        assert!((a - b).abs() <= 1e-6, "pixel {i}: {a} vs golden {b}");
    }
    // background floor, the horizontal bar, and the blob centre
    assert_eq!(img[15 * 16 + 15], -0.9);
    assert_eq!(img[2 * 16 + 10], 0.0);
    assert_eq!(img[10 * 16 + 4], 0.0);
}

#[test]
fn grid_of_factor_vectors_is_injective() {
    let spec = spec();
    let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut seen = HashSet::new();
    for a in levels {
        for b in levels {
            for c in levels {
                for d in levels {
                    let r = FactorRecord::new(&spec, vec![a, b, c, d]).unwrap();
                    let img = synth::render_pixels(&spec, &r).unwrap();
                    let key: Vec<u32> = img.iter().map(|v| v.to_bits()).collect();
                    assert!(seen.insert(key), "{:?} collides with an earlier image", [a, b, c, d]);
                }
            }
        }
    }
    assert_eq!(seen.len(), 625);
}

#[test]
fn dataset_is_byte_identical_across_runs() {
    let a = Dataset::generate(&spec()).unwrap();
    let b = Dataset::generate(&spec()).unwrap();
    let bits = |d: &Dataset| d.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.factors_csv(), b.factors_csv());
    assert_eq!((a.train.clone(), a.test.clone()), (b.train, b.test));
    let other = Dataset::generate(&SyntheticSpec::reference(300, 6)).unwrap();
    assert_ne!(bits(&a), bits(&other));
}

#[test]
fn dominance_holds_along_the_rank_chain() {
    let spec = spec();
    let deltas = synth::granularity_profile(&spec, 1000, 17).unwrap();
    let mut order: Vec<usize> = (0..spec.num_factors()).collect();
    order.sort_by_key(|&i| spec.factors[i].granularity_rank);
    for w in order.windows(2) {
        assert!(theory::stochastic_dominance(&deltas[w[1]], &deltas[w[0]]).unwrap());
    }
    let corner = order[0];
    assert!(deltas[corner].iter().all(|&d| d <= 2.0 * 4f64.sqrt()));
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let spec = spec();
    let mut r = FactorRecord::zeros(&spec);
    r.factors[2] = 1.5;
    assert!(synth::render_pixels(&spec, &r).is_err());
    let ok = FactorRecord::zeros(&spec);
    assert!(synth::apply_group_action(&spec, &ok, 4, 0.5).is_err());
    assert!(synth::apply_group_action(&spec, &ok, 0, -0.1).is_err());
}

fn record() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, 4)
}

proptest! {
    #[test]
    fn interventions_stay_inside_footprints(f in record(), i in 0usize..4, v in 0.0f64..=1.0) {
        let spec = spec();
        let r = FactorRecord::new(&spec, f).unwrap();
        let g = synth::apply_group_action(&spec, &r, i, v).unwrap();
        let a = synth::render_pixels(&spec, &r).unwrap();
        let b = synth::render_pixels(&spec, &g).unwrap();
        let mask = spec.footprint(i);
        for p in 0..a.len() {
            if !mask[p] {
                prop_assert_eq!(a[p].to_bits(), b[p].to_bits(), "pixel {} outside footprint of {}", p, i);
            }
        }
    }

    #[test]
    fn group_actions_commute(f in record(), i in 0usize..4, j in 0usize..4, u in 0.0f64..=1.0, v in 0.0f64..=1.0) {
        prop_assume!(i != j);
        let spec = spec();
        let r = FactorRecord::new(&spec, f).unwrap();
        let ij = synth::apply_group_action(&spec, &synth::apply_group_action(&spec, &r, i, u).unwrap(), j, v).unwrap();
        let ji = synth::apply_group_action(&spec, &synth::apply_group_action(&spec, &r, j, v).unwrap(), i, u).unwrap();
        prop_assert_eq!(ij, ji);
    }

    #[test]
    fn identity_action_and_range(f in record(), i in 0usize..4) {
        let spec = spec();
        let r = FactorRecord::new(&spec, f).unwrap();
        let same = synth::apply_group_action(&spec, &r, i, r.factors[i]).unwrap();
        prop_assert_eq!(&same, &r);
        let img = synth::render_pixels(&spec, &r).unwrap();
        prop_assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
