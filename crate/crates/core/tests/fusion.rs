mod common;

use common::fusion_oracle;
use mnp_core::encoding::mba_fuse_values;
use mnp_core::tensor::Tensor;
use proptest::prelude::*;

type Part = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn part(n: usize) -> impl Strategy<Value = Part> {
    let mean = || prop::collection::vec(-5.0f64..5.0, n);
    let var = || prop::collection::vec(0.01f64..10.0, n);
    (mean(), var(), mean(), var())
}

fn parts() -> impl Strategy<Value = (usize, Vec<Part>)> {
    (1usize..=4, 1usize..=3, prop::sample::select(vec![1usize, 8])).prop_flat_map(|(m, rows, d)| {
        (Just(d), prop::collection::vec(part(rows * d), m))
    })
}

fn fuse(d: usize, ps: &[Part]) -> (Vec<f64>, Vec<f64>) {
    let t = |v: &Vec<f64>| Tensor::matrix(v.len() / d, d, v.clone()).unwrap();
    let input: Vec<_> = ps.iter().map(|(r, s, u, q)| (t(r), t(s), t(u), t(q))).collect();
    let out = mba_fuse_values(&input).unwrap();
    (out.mean.into_data(), out.variance.into_data())
}

proptest! {
    #[test]
    fn matches_precision_weighted_oracle((d, ps) in parts()) {
        let (mean, var) = fuse(d, &ps);
        let (om, ov) = fusion_oracle(&ps);
        for k in 0..mean.len() {
            prop_assert!((mean[k] - om[k]).abs() < 1e-10);
            prop_assert!((var[k] - ov[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn modality_order_does_not_matter((d, ps) in parts()) {
        let mut rev = ps.clone();
        rev.reverse();
        let (a, av) = fuse(d, &ps);
        let (b, bv) = fuse(d, &rev);
        for k in 0..a.len() {
            prop_assert!((a[k] - b[k]).abs() < 1e-10);
            prop_assert!((av[k] - bv[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_variance_is_below_every_input_variance((d, ps) in parts()) {
        let (_, var) = fuse(d, &ps);
        for (_, s, _, q) in &ps {
            for k in 0..var.len() {
                prop_assert!(var[k] < s[k] && var[k] < q[k]);
            }
        }
    }
}

#[test]
fn two_equal_experts_halve_the_variance() {
    let one = |v: f64| Tensor::row(vec![v]);
    let out = mba_fuse_values(&[(one(1.0), one(2.0), one(3.0), one(2.0))]).unwrap();
    assert_eq!(out.variance.into_data(), vec![1.0]);
    assert_eq!(out.mean.into_data(), vec![2.0]);
}
