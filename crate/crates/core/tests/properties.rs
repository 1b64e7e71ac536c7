//! Invariants of the box transform and the softmax head.

use advkit::attack::{box_transform, l2_distance};
use advkit::autodiff::softmax;
use advkit::Tensor;
use proptest::prelude::*;

fn image(values: Vec<f64>) -> Tensor<f64> {
    Tensor::new(vec![values.len(), 1, 1], values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn box_output_stays_open(xs in prop::collection::vec(0.0f64..=1.0, 1..32), seed in any::<u64>()) {
        let w: Vec<f64> = (0..xs.len()).map(|i| ((seed.rotate_left(i as u32) % 2001) as f64 - 1000.0) / 100.0).collect();
        let y = box_transform(&image(xs), &image(w)).unwrap();
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_w_is_identity(xs in prop::collection::vec(0.0f64..=1.0, 1..32)) {
        let x = image(xs);
        let y = box_transform(&x, &Tensor::zeros(x.shape())).unwrap();
        prop_assert!(l2_distance(&x, &y).unwrap() / (x.len() as f64).sqrt() < 1e-4);
        prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn box_is_monotone_in_w(x in 0.0f64..=1.0, a in -8.0f64..8.0, b in -8.0f64..8.0) {
        let f = |w: f64| box_transform(&image(vec![x]), &image(vec![w])).unwrap().data()[0];
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f(lo) <= f(hi));
    }

    #[test]
    fn softmax_normalises(z in prop::collection::vec(-50.0f64..50.0, 10)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + 3.5).collect();
        let q = softmax(&shifted);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
