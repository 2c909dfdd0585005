#![allow(dead_code)]

use lio::backbone::{bias_name, weight_name, FeatureGrid};
use lio::heads::HeadNames;
use lio::params::Params;
use lio::rng::Rng;
use lio::scl::{self, PolarField, PolarPrediction};
use lio::tensor::{Graph, Tensor};
use lio::{oel, oracle};

pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

/// Angle loss of predicted angles against a truth field, with mask weights.
pub fn angle_loss(theta_pred: &Tensor, truth: &PolarField, mask: &Tensor) -> Option<f64> {
    let mut g = Graph::new();
    let pred = PolarPrediction {
        gamma: g.constant(truth.gamma.clone()),
        theta: g.constant(theta_pred.clone()),
    };
    scl::angle_loss(&mut g, &pred, truth, mask).unwrap().map(|a| g.value(a.loss).item())
}

/// `(distance, angle)` losses.
pub fn scl_losses(gamma_pred: &Tensor, theta_pred: &Tensor, truth: &PolarField, mask: &Tensor) -> Option<(f64, f64)> {
    let mut g = Graph::new();
    let pred = PolarPrediction {
        gamma: g.constant(gamma_pred.clone()),
        theta: g.constant(theta_pred.clone()),
    };
    scl::scl_loss(&mut g, &pred, truth, mask)
        .unwrap()
        .map(|l| (g.value(l.distance).item(), g.value(l.angle).item()))
}

pub fn correlation(f: &Tensor, f_pos: &Tensor) -> Tensor {
    oel::correlation_mask(&FeatureGrid::new(f.clone()).unwrap(), &FeatureGrid::new(f_pos.clone()).unwrap()).unwrap()
}

/// Truth field around a random reference cell.
pub fn random_field(rng: &mut Rng, n: usize) -> PolarField {
    let reference = (rng.below(n), rng.below(n));
    scl::ground_truth_polar(n, reference).unwrap()
}

/// Largest absolute deviation between each crate operation and its
/// scalar-loop oracle over `instances` random cases with `N <= 8`, `C <= 16`.
pub fn oracle_deviations(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut worst = [0.0f64; 7];
    for _ in 0..instances {
        let n = 1 + rng.below(8);
        let c = 1 + rng.below(16);
        let c1 = 1 + rng.below(16);
        let f = random_tensor(&mut rng, &[n, n, c], -1.0, 1.0);
        let positives: Vec<Tensor> =
            (0..1 + rng.below(5)).map(|_| random_tensor(&mut rng, &[n, n, c], -1.0, 1.0)).collect();

        let phi = correlation(&f, &positives[0]);
        worst[0] = worst[0].max(phi.max_abs_diff(&oracle::correlation(&f, &positives[0])));

        let grids: Vec<FeatureGrid> = positives.iter().map(|p| FeatureGrid::new(p.clone()).unwrap()).collect();
        let m = oel::pseudo_mask(&FeatureGrid::new(f.clone()).unwrap(), &grids).unwrap();
        worst[1] = worst[1].max(m.max_abs_diff(&oracle::pseudo_mask(&f, &positives)));

        let names = HeadNames::new(n);
        let mut params = Params::new();
        let mask_w = random_tensor(&mut rng, &[1, 1, c, 1], -1.0, 1.0);
        let mask_b = rng.range(-0.2, 0.4);
        params.insert(weight_name(&names.mask), mask_w.clone());
        params.insert(bias_name(&names.mask), Tensor::vector(vec![mask_b]));
        let proj_w = random_tensor(&mut rng, &[1, 1, c, c1], -1.0, 1.0);
        let proj_b = random_tensor(&mut rng, &[c1], -0.2, 0.2);
        params.insert(weight_name(&names.proj), proj_w.clone());
        params.insert(bias_name(&names.proj), proj_b.clone());
        let polar_w = random_tensor(&mut rng, &[2 * c1, 2], -1.0, 1.0);
        let polar_b = random_tensor(&mut rng, &[2], 0.0, 0.5);
        params.insert(weight_name(&names.polar), polar_w.clone());
        params.insert(bias_name(&names.polar), polar_b.clone());

        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let m_pred = oel::mask_head(&mut g, &bound, &names, fv).unwrap();
        let m_pred_val = g.value(m_pred).clone();
        worst[2] = worst[2].max(m_pred_val.max_abs_diff(&oracle::mask_head(&f, mask_w.data(), mask_b)));

        let reference = (rng.below(n), rng.below(n));
        let h = scl::project(&mut g, &bound, &names, fv).unwrap();
        let pred = scl::scl_head(&mut g, &bound, &names, h, reference).unwrap();
        let h_oracle = oracle::pointwise(&f, proj_w.data(), proj_b.data());
        let (gamma_o, theta_o) = oracle::scl_head(&h_oracle, polar_w.data(), polar_b.data(), reference);
        worst[3] = worst[3]
            .max(g.value(pred.gamma).max_abs_diff(&gamma_o))
            .max(g.value(pred.theta).max_abs_diff(&theta_o));

        // losses on independent random inputs so that every branch is hit
        let truth = scl::ground_truth_polar(n, reference).unwrap();
        let gamma_p = random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let theta_p = random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let weights = random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let target = random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let o = oracle::losses(&gamma_p, &theta_p, &truth.gamma, &truth.theta, &weights, &target);

        let mut g = Graph::new();
        let mv = g.constant(weights.clone());
        let l = oel::oel_loss(&mut g, mv, &target).unwrap();
        let oel_val = g.value(l).item();
        worst[4] = worst[4].max((oel_val - o.oel).abs());
        let (dis, ang) = scl_losses(&gamma_p, &theta_p, &truth, &weights).unwrap();
        worst[5] = worst[5].max((dis - o.distance.unwrap()).abs());
        worst[6] = worst[6].max((ang - o.angle.unwrap()).abs());
    }
    let names = ["region_correlation", "pseudo_mask", "mask_head", "scl_head", "l_oel", "l_dis", "l_angle"];
    names.into_iter().zip(worst).collect()
}
