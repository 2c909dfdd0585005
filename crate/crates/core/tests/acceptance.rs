//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 are empirical and are reported without failing the run;
//! every other criterion is a hard requirement.

mod common;

use std::time::Instant;

use lio::backbone::{self, is_backbone_param};
use lio::dataset::{generate, SplitDatasets, SyntheticSpec};
use lio::experiment::{self, median, RunSummary};
use lio::gradcheck::{self, GradCheckOptions};
use lio::heads::{self, is_head_param, HeadNames};
use lio::params::Params;
use lio::rng::Rng;
use lio::scl::{self, ground_truth_polar, PolarField};
use lio::tensor::{Graph, Tensor};
use lio::trainer::{inference, Checkpoint, LrDecay, TrainConfig, Trainer};
use lio::{oel, Result};

/// Five seeds of the budget protocol must fit in about half an hour on one
/// core, which allows ten epochs; the decay keeps its relative position.
const BUDGET_EPOCHS: usize = 10;
const BUDGET_DECAY: LrDecay = LrDecay { every: 8, factor: 0.1 };
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let report = gradcheck::run(&GradCheckOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(outcome(
        report.passed() && secs <= 120.0,
        format!(
            "{} checks x {} instances, max rel error {worst:.2e} (tol 1e-4), {secs:.1}s (limit 120s){}",
            report.checks.len(),
            GradCheckOptions::default().instances,
            if report.passed() { String::new() } else { format!(", failing: {:?}", report.failures()) }
        ),
    ))
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let devs = common::oracle_deviations(100, 2024);
    let secs = start.elapsed().as_secs_f64();
    let worst = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    let bad: Vec<_> = devs.iter().filter(|d| d.1 > 1e-12).map(|d| d.0).collect();
    outcome(
        bad.is_empty() && secs <= 60.0,
        format!("7 operations x 100 instances, max abs deviation {worst:.1e} (tol 1e-12), {secs:.2}s; over tolerance: {bad:?}"),
    )
}

fn polar() -> Result<Outcome> {
    let p = ground_truth_polar(2, (0, 0))?;
    let closed = [
        (p.gamma.at(&[1, 1]), 0.5),
        (p.theta.at(&[1, 1]), 0.125),
        (p.theta.at(&[1, 0]), 1.0),
    ];
    let worst_closed = closed.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut violations = 0;
    for n in 1..=16usize {
        let g_max = (n as f64 - 1.0) / n as f64;
        for r in 0..n * n {
            let f = ground_truth_polar(n, (r / n, r % n))?;
            for k in 0..n * n {
                let (g, t) = (f.gamma.data()[k], f.theta.data()[k]);
                if !(0.0..=g_max).contains(&g) || (k != r && !(t > 0.0 && t <= 1.0)) {
                    violations += 1;
                }
            }
        }
    }
    Ok(outcome(
        worst_closed <= 1e-12 && violations == 0,
        format!("closed-form error {worst_closed:.1e}; range violations for N<=16: {violations}"),
    ))
}

fn invariances() -> Outcome {
    let mut rng = Rng::new(77);
    let (mut shift_dev, mut scale_dev, mut perm_mismatch, mut const_nonzero) = (0.0f64, 0.0f64, 0, 0);
    for _ in 0..200 {
        let n = 1 + rng.below(8);
        let truth = common::random_field(&mut rng, n);
        let mask = common::random_tensor(&mut rng, &[n, n], 0.01, 1.0);

        let gaps = common::random_tensor(&mut rng, &[n, n], 0.05, 0.45);
        let theta = Tensor::new(vec![n, n], truth.theta.data().iter().zip(gaps.data()).map(|(t, d)| t + d).collect()).unwrap();
        let shift = rng.range(-0.04, 0.5);
        let a = common::angle_loss(&theta, &truth, &mask).unwrap();
        let b = common::angle_loss(&theta.map(|t| t + shift), &truth, &mask).unwrap();
        shift_dev = shift_dev.max((a - b).abs());

        let gamma = common::random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let theta = common::random_tensor(&mut rng, &[n, n], 0.0, 1.0);
        let k = 10f64.powf(rng.range(-3.0, 3.0));
        let (d1, a1) = common::scl_losses(&gamma, &theta, &truth, &mask).unwrap();
        let (d2, a2) = common::scl_losses(&gamma, &theta, &truth, &mask.map(|v| v * k)).unwrap();
        scale_dev = scale_dev.max((d1 - d2).abs()).max((a1 - a2).abs());

        let c = 1 + rng.below(16);
        let f = common::random_tensor(&mut rng, &[n, n, c], -1.0, 1.0);
        let pos = common::random_tensor(&mut rng, &[n, n, c], -1.0, 1.0);
        let mut order: Vec<usize> = (0..n * n).collect();
        rng.shuffle(&mut order);
        let shuffled = Tensor::new(vec![n, n, c], order.iter().flat_map(|&q| pos.data()[q * c..(q + 1) * c].to_vec()).collect()).unwrap();
        if !common::correlation(&f, &pos).bit_eq(&common::correlation(&f, &shuffled)) {
            perm_mismatch += 1;
        }

        let dyadic = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.below(64) as f64 / 64.0).collect()).unwrap();
        let field = PolarField { gamma: Tensor::zeros(&[n, n]), theta: dyadic, reference: (0, 0) };
        let d = rng.below(64) as f64 / 64.0;
        let pred = field.theta.map(|t| if t + d < 1.0 { t + d } else { t + d - 1.0 });
        if common::angle_loss(&pred, &field, &mask) != Some(0.0) {
            const_nonzero += 1;
        }
    }
    outcome(
        shift_dev <= 1e-9 && scale_dev <= 1e-12 && perm_mismatch == 0 && const_nonzero == 0,
        format!(
            "200 cases each: (a) rotation {shift_dev:.1e} (tol 1e-9), (b) mask scale {scale_dev:.1e} (tol 1e-12), \
             (c) permutation mismatches {perm_mismatch}, (d) nonzero constant-gap losses {const_nonzero}"
        ),
    )
}

/// Logits computed inside a graph that also carries every head, as during
/// training.
fn training_mode_logits(config: &TrainConfig, params: &Params, image: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(image.clone());
    let out = backbone::forward(&mut g, &config.backbone, &bound, x, None)?;
    for &side in config.stages() {
        let names = HeadNames::new(side);
        let f = out.stages[config.backbone.stage_index(side)?];
        oel::mask_head(&mut g, &bound, &names, f)?;
        let h = scl::project(&mut g, &bound, &names, f)?;
        scl::scl_head(&mut g, &bound, &names, h, (0, 0))?;
    }
    Ok(g.value(out.logits.expect("full forward")).data().to_vec())
}

fn inference_op_count(config: &TrainConfig, params: &Params, image: &Tensor) -> Result<usize> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    backbone::forward(&mut g, &config.backbone, &bound, x, None)?;
    Ok(g.op_count())
}

fn detachment() -> Result<Outcome> {
    let data = generate(&SyntheticSpec { train_per_class: 6, val_per_class: 3, seed: 5, ..SyntheticSpec::default() })?;
    let config = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
    let mut t = Trainer::new(config.clone())?;
    t.fit(&data.train, None, None)?;
    let ck = t.checkpoint();
    let mut poisoned = ck.clone();
    for (name, v) in poisoned.params.iter_mut() {
        if is_head_param(name) {
            v.data_mut().fill(f64::NAN);
        }
    }
    let mut backbone_only = ck.params.clone();
    backbone_only.retain(is_backbone_param);
    let plain = config.plain();

    let (mut worst, mut poison_changes, mut op_mismatch) = (0.0f64, 0, 0);
    for s in &data.val.samples {
        let image = s.image_tensor(data.val.image_size);
        let (_, z) = inference(&image, &ck)?;
        let train_z = training_mode_logits(&config, &ck.params, &image)?;
        worst = z.iter().zip(&train_z).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        if inference(&image, &poisoned)?.1 != z {
            poison_changes += 1;
        }
        if inference_op_count(&config, &ck.params, &image)? != inference_op_count(&plain, &backbone_only, &image)? {
            op_mismatch += 1;
        }
    }
    let deployed = backbone_only.scalar_count();
    let never = heads::parameter_count(&plain.backbone, None)?;
    let plain_init = plain.init_params()?.scalar_count();
    Ok(outcome(
        worst <= 1e-12 && poison_changes == 0 && op_mismatch == 0 && deployed == never && deployed == plain_init,
        format!(
            "logit deviation {worst:.1e} (tol 1e-12); NaN heads changed {poison_changes} predictions; \
             op-count mismatches {op_mismatch}; inference params {deployed} vs baseline {never}"
        ),
    ))
}

fn baseline_reduction() -> Result<Outcome> {
    let start = Instant::now();
    let data = generate(&SyntheticSpec::default())?;
    let zero = TrainConfig { alpha: 0.0, beta: 0.0, epochs: 2, ..TrainConfig::default() };
    let dir = tempfile::tempdir()?;
    let mut a = Trainer::new(zero.clone())?;
    a.fit(&data.train, None, Some(&dir.path().join("zero")))?;
    let mut b = Trainer::new(zero.plain())?;
    b.fit(&data.train, None, Some(&dir.path().join("plain")))?;
    let ca = Checkpoint::load_backbone(&dir.path().join("zero/final.lioc"))?;
    let cb = Checkpoint::load(&dir.path().join("plain/final.lioc"))?;
    let full = Checkpoint::load(&dir.path().join("zero/final.lioc"))?;
    let mut heads_now = full.params.clone();
    heads_now.retain(is_head_param);
    let mut heads_init = zero.init_params()?;
    heads_init.retain(is_head_param);
    let secs = start.elapsed().as_secs_f64();
    let backbone_equal = ca.params.bit_eq(&cb.params);
    let heads_untouched = heads_now.bit_eq(&heads_init);
    Ok(outcome(
        backbone_equal && heads_untouched && secs <= 300.0,
        format!(
            "2 epochs on 2000 images: backbone bit-identical {backbone_equal}, heads untouched {heads_untouched}, {secs:.0}s (limit 300s)"
        ),
    ))
}

fn budget_config(seed: u64, positives: usize) -> TrainConfig {
    TrainConfig {
        seed,
        positives,
        epochs: BUDGET_EPOCHS,
        lr_decay: Some(BUDGET_DECAY),
        ..TrainConfig::default()
    }
}

fn learning_effect(data: &[SplitDatasets], lio_runs: &[RunSummary]) -> Result<Outcome> {
    let start = Instant::now();
    let mut plain_runs = Vec::new();
    for (d, &seed) in data.iter().zip(&SEEDS) {
        plain_runs.push(experiment::run(&budget_config(seed, 3).plain(), d)?);
    }
    let secs = start.elapsed().as_secs_f64() + lio_runs.iter().map(|r| r.seconds).sum::<f64>();
    let gains: Vec<f64> = lio_runs.iter().zip(&plain_runs).map(|(l, p)| 100.0 * (l.val_accuracy - p.val_accuracy)).collect();
    let iou_gains: Vec<f64> = lio_runs.iter().map(|r| r.mask_iou.unwrap() - r.untrained_mask_iou.unwrap()).collect();
    let (gain, iou_gain) = (median(&gains), median(&iou_gains));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let lio_acc: Vec<f64> = lio_runs.iter().map(|r| r.val_accuracy).collect();
    let plain_acc: Vec<f64> = plain_runs.iter().map(|r| r.val_accuracy).collect();
    let iou: Vec<f64> = lio_runs.iter().map(|r| r.mask_iou.unwrap()).collect();
    let untrained: Vec<f64> = lio_runs.iter().map(|r| r.untrained_mask_iou.unwrap()).collect();
    Ok(outcome(
        gain >= 1.0 && iou_gain >= 0.15 && secs <= 1800.0,
        format!(
            "{BUDGET_EPOCHS} epochs x 5 seeds: median top-1 gain {gain:+.2}pp (need >= 1.0) \
             [heads {} | plain {}]; median IoU gain {iou_gain:+.3} (need >= 0.15) [trained {} | reset heads {}]; {secs:.0}s (limit 1800s)",
            fmt(&lio_acc),
            fmt(&plain_acc),
            fmt(&iou),
            fmt(&untrained),
        ),
    ))
}

fn positive_trend(data: &[SplitDatasets], p3: &[RunSummary]) -> Result<Outcome> {
    let mut medians = Vec::new();
    for p in [1, 5] {
        let mut ious = Vec::new();
        for (d, &seed) in data.iter().zip(&SEEDS) {
            ious.push(experiment::run(&budget_config(seed, p), d)?.mask_iou.unwrap());
        }
        medians.push(median(&ious));
    }
    let m3 = median(&p3.iter().map(|r| r.mask_iou.unwrap()).collect::<Vec<_>>());
    Ok(outcome(
        m3 >= medians[0],
        format!("median mask IoU P=1 {:.4}, P=3 {m3:.4}, P=5 {:.4} (need P=3 >= P=1)", medians[0], medians[1]),
    ))
}

fn overhead() -> Result<Outcome> {
    let config = TrainConfig::default();
    let backbone = config.backbone.parameter_count();
    let total = heads::parameter_count(&config.backbone, config.heads.as_ref())?;
    let ratio = (total - backbone) as f64 / backbone as f64;
    Ok(outcome(
        ratio <= 0.02,
        format!("heads {} / backbone {backbone} = {:.2}% (limit 2%)", total - backbone, 100.0 * ratio),
    ))
}

fn report(id: usize, title: &str, hard: bool, r: Result<Outcome>) -> bool {
    let r = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    let tag = if r.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {title}: {}", r.detail);
    r.passed || !hard
}

fn main() {
    // `cargo test --test acceptance -- 1 5 9` runs a subset
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| picked.is_empty() || picked.contains(&id);
    let mut ok = true;
    if want(1) {
        ok &= report(1, "gradient correctness", true, gradients());
    }
    if want(2) {
        ok &= report(2, "oracle equivalence", true, Ok(oracles()));
    }
    if want(3) {
        ok &= report(3, "polar field", true, polar());
    }
    if want(4) {
        ok &= report(4, "invariances", true, Ok(invariances()));
    }
    if want(5) {
        ok &= report(5, "detachment parity", true, detachment());
    }
    if want(6) {
        ok &= report(6, "zero-weight reduction", true, baseline_reduction());
    }
    if want(7) || want(8) {
        let data: Vec<SplitDatasets> = SEEDS
            .iter()
            .map(|&seed| generate(&SyntheticSpec { seed, ..SyntheticSpec::default() }).expect("default spec is valid"))
            .collect();
        let p3: Result<Vec<RunSummary>> =
            data.iter().zip(&SEEDS).map(|(d, &s)| experiment::run(&budget_config(s, 3), d)).collect();
        match p3 {
            Ok(p3) => {
                if want(7) {
                    ok &= report(7, "learning effect", false, learning_effect(&data, &p3));
                }
                if want(8) {
                    ok &= report(8, "positive-count trend", false, positive_trend(&data, &p3));
                }
            }
            Err(e) => println!("[FAIL] 7/8. training runs failed: {e}"),
        }
    }
    if want(9) {
        ok &= report(9, "parameter overhead", true, overhead());
    }
    if !ok {
        std::process::exit(1);
    }
}
