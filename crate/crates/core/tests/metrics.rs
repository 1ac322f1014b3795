mod common;

use common::auroc_oracle;
use mnp_core::metrics::{auroc, ece, ECE_BINS};
use mnp_core::tensor::Tensor;
use proptest::prelude::*;

fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

#[test]
fn ece_two_samples_in_one_bin() {
    let pred = rows(&[vec![0.8, 0.2], vec![0.8, 0.2]]);
    let truth = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!((ece(&pred, &truth, ECE_BINS).unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn ece_of_confident_correct_predictions_is_zero() {
    let p = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(ece(&p, &p, ECE_BINS).unwrap(), 0.0);
}

#[test]
fn ece_of_one_sample_is_its_gap() {
    let pred = rows(&[vec![0.3, 0.7]]);
    let wrong = rows(&[vec![1.0, 0.0]]);
    assert!((ece(&pred, &wrong, ECE_BINS).unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn ece_weights_bins_by_size() {
    // Bin of 0.9: two samples, one correct, gap 0.4. Bin of 0.6: one correct sample, gap 0.4.
    let pred = rows(&[vec![0.9, 0.1], vec![0.9, 0.1], vec![0.4, 0.6]]);
    let truth = rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
    assert!((ece(&pred, &truth, ECE_BINS).unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn auroc_reference_example() {
    assert_eq!(auroc(&[0.1, 0.2], &[0.15, 0.3]).unwrap(), 0.75);
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // Coarse values make ties common.
    prop::collection::vec((0i32..20).prop_map(|v| v as f64 / 4.0), 1..40)
}

proptest! {
    #[test]
    fn auroc_matches_pairwise_enumeration(id in scores(), ood in scores()) {
        prop_assert!((auroc(&id, &ood).unwrap() - auroc_oracle(&id, &ood)).abs() < 1e-12);
    }

    #[test]
    fn swapping_roles_complements_auroc(id in scores(), ood in scores()) {
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps(id in scores(), ood in scores()) {
        let f = |v: &Vec<f64>| v.iter().map(|x| (x * 0.7).exp()).collect::<Vec<_>>();
        prop_assert!((auroc(&id, &ood).unwrap() - auroc(&f(&id), &f(&ood)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ece_lies_in_the_unit_interval(p in prop::collection::vec(0.0f64..1.0, 1..30), flip in prop::collection::vec(any::<bool>(), 30)) {
        let pred = rows(&p.iter().map(|&v| vec![v, 1.0 - v]).collect::<Vec<_>>());
        let truth = rows(&(0..p.len()).map(|i| if flip[i] { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect::<Vec<_>>());
        let e = ece(&pred, &truth, ECE_BINS).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }
}
