mod common;

use lio::rng::Rng;
use lio::scl::{ground_truth_polar, select_reference};
use lio::tensor::Tensor;
use proptest::prelude::*;

fn grid(n: usize, values: &[f64]) -> Tensor {
    Tensor::new(vec![n, n], values[..n * n].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn angle_loss_ignores_a_common_rotation(
        n in 1usize..7,
        seed in any::<u64>(),
        shift in -0.04f64..0.5,
    ) {
        let mut rng = Rng::new(seed);
        let truth = common::random_field(&mut rng, n);
        // gaps in [0.05, 0.45] stay on the same branch after the shift
        let gaps = common::random_tensor(&mut rng, &[n, n], 0.05, 0.45);
        let pred = Tensor::new(vec![n, n], truth.theta.data().iter().zip(gaps.data()).map(|(t, d)| t + d).collect()).unwrap();
        let mask = common::random_tensor(&mut rng, &[n, n], 0.01, 1.0);
        let a = common::angle_loss(&pred, &truth, &mask).unwrap();
        let b = common::angle_loss(&pred.map(|t| t + shift), &truth, &mask).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn losses_ignore_mask_scale(
        n in 1usize..7,
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = Rng::new(seed);
        let truth = common::random_field(&mut rng, n);
        let gamma = common::random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let theta = common::random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let mask = common::random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let (d1, a1) = common::scl_losses(&gamma, &theta, &truth, &mask).unwrap();
        let (d2, a2) = common::scl_losses(&gamma, &theta, &truth, &mask.map(|v| v * scale)).unwrap();
        prop_assert!((d1 - d2).abs() <= 1e-12 && (a1 - a2).abs() <= 1e-12);
    }

    #[test]
    fn correlation_ignores_positive_cell_order(
        n in 1usize..7,
        c in 1usize..9,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let f = common::random_tensor(&mut rng, &[n, n, c], -1.0, 1.0);
        let pos = common::random_tensor(&mut rng, &[n, n, c], -1.0, 1.0);
        let mut order: Vec<usize> = (0..n * n).collect();
        rng.shuffle(&mut order);
        let shuffled: Vec<f64> = order.iter().flat_map(|&k| pos.data()[k * c..(k + 1) * c].to_vec()).collect();
        let shuffled = Tensor::new(vec![n, n, c], shuffled).unwrap();
        prop_assert!(common::correlation(&f, &pos).bit_eq(&common::correlation(&f, &shuffled)));
    }

    #[test]
    fn constant_angle_gap_costs_nothing(
        n in 1usize..7,
        seed in any::<u64>(),
        gap_64ths in 0u32..64,
        weights in proptest::collection::vec(0.0f64..1.0, 36),
    ) {
        let mut rng = Rng::new(seed);
        // dyadic angles keep every subtraction exact
        let theta = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.below(64) as f64 / 64.0).collect()).unwrap();
        let truth = lio::scl::PolarField { gamma: Tensor::zeros(&[n, n]), theta, reference: (0, 0) };
        let d = gap_64ths as f64 / 64.0;
        let pred = truth.theta.map(|t| if t + d < 1.0 { t + d } else { t + d - 1.0 });
        let mut mask = grid(n, &weights);
        mask.data_mut()[0] += 0.1;
        prop_assert_eq!(common::angle_loss(&pred, &truth, &mask), Some(0.0));
    }

    #[test]
    fn reference_is_the_mask_argmax(n in 1usize..9, values in proptest::collection::vec(0.0f64..1.0, 64)) {
        let mask = grid(n, &values);
        let (x, y) = select_reference(&mask);
        let best = mask.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(mask.at(&[x, y]), best);
        let field = ground_truth_polar(n, (x, y)).unwrap();
        prop_assert_eq!(field.gamma.at(&[x, y]), 0.0);
    }
}

#[test]
fn polar_ranges_hold_up_to_sixteen() {
    for n in 1..=16 {
        let gamma_max = (n as f64 - 1.0) / n as f64;
        for x in 0..n {
            for y in 0..n {
                let p = ground_truth_polar(n, (x, y)).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        let (g, t) = (p.gamma.at(&[i, j]), p.theta.at(&[i, j]));
                        assert!((0.0..=gamma_max + 1e-15).contains(&g), "N={n} gamma {g}");
                        if (i, j) != (x, y) {
                            assert!(t > 0.0 && t <= 1.0, "N={n} theta {t}");
                        }
                    }
                }
            }
        }
    }
}
