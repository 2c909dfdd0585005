use super::*;
use crate::dataset::{generate, SyntheticSpec};
use crate::heads::is_head_param;

fn toy_config() -> TrainConfig {
    TrainConfig {
        backbone: BackboneConfig {
            input_size: 16,
            channels: vec![4, 8],
            stem_stride: 2,
            stage_strides: vec![1, 2],
            num_classes: 2,
            seed: 0,
        },
        heads: Some(HeadConfig {
            stages: vec![4],
            proj_channels: 8,
        }),
        batch_size: 4,
        epochs: 2,
        lr: 0.05,
        ..TrainConfig::default()
    }
}

fn toy_data(per_class: usize) -> Dataset {
    generate(&SyntheticSpec {
        num_classes: 2,
        train_per_class: per_class,
        val_per_class: 1,
        image_size: 16,
        clutter_density: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap()
    .train
}

#[test]
fn lone_image_is_its_own_positive() {
    let groups = vec![vec![0], vec![1, 2]];
    let mut rng = Rng::new(0);
    assert_eq!(sample_positives(&groups, 0, 0, 3, &mut rng), vec![0, 0, 0]);
}

#[test]
fn enough_images_give_distinct_non_anchor_positives() {
    let groups = vec![(0..4).collect::<Vec<_>>()];
    let mut rng = Rng::new(1);
    for _ in 0..50 {
        let mut p = sample_positives(&groups, 0, 2, 3, &mut rng);
        assert!(!p.contains(&2));
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 3);
    }
}

#[test]
fn few_images_fall_back_to_replacement() {
    let groups = vec![vec![0, 1, 2]];
    let mut rng = Rng::new(2);
    let p = sample_positives(&groups, 0, 0, 3, &mut rng);
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|&i| i == 1 || i == 2));
}

#[test]
fn batches_are_seed_deterministic_and_same_class() {
    let data = toy_data(5);
    let a = sample_batch_with_positives(&data, 4, 3, &mut Rng::new(7)).unwrap();
    let b = sample_batch_with_positives(&data, 4, 3, &mut Rng::new(7)).unwrap();
    assert_eq!(a, b);
    for item in &a {
        let label = data.samples[item.anchor].label;
        assert!(item.positives.iter().all(|&p| data.samples[p].label == label));
    }
    let empty = Dataset { samples: vec![], class_names: vec![], image_size: 16 };
    assert!(matches!(sample_batch_with_positives(&empty, 4, 3, &mut Rng::new(0)), Err(Error::Contract(_))));
}

#[test]
fn total_decomposes() {
    assert!((LossBundle::combine(2.0, 0.3, 0.4, 0.1, 0.1) - 2.07).abs() < 1e-12);
    let cfg = toy_config();
    let data = toy_data(3);
    let params = cfg.init_params().unwrap();
    let batch = sample_batch_with_positives(&data, 4, 3, &mut Rng::new(3)).unwrap();
    let obj = batch_objective(&cfg, &params, &data, &batch, ObjectiveOptions::default()).unwrap();
    let l = &obj.losses;
    assert!((l.total - (l.cls + l.alpha * l.oel + l.beta * l.scl)).abs() < 1e-12);
    assert_eq!(l.per_stage.len(), 1);
    assert!(l.cls > 0.0 && l.oel > 0.0);
}

#[test]
fn two_stages_sum_their_terms() {
    let cfg = attach_stages(&toy_config(), &[8, 4]).unwrap();
    let data = toy_data(3);
    let params = cfg.init_params().unwrap();
    let batch = sample_batch_with_positives(&data, 2, 3, &mut Rng::new(4)).unwrap();
    let l = batch_objective(&cfg, &params, &data, &batch, ObjectiveOptions::default()).unwrap().losses;
    assert_eq!(l.per_stage.len(), 2);
    let oel: f64 = l.per_stage.iter().map(|s| s.oel).sum();
    assert!((l.oel - oel).abs() < 1e-15);
    assert!(attach_stages(&toy_config(), &[5]).is_err());
}

#[test]
fn zero_weights_match_plain_training() {
    let data = toy_data(4);
    let lio = TrainConfig { alpha: 0.0, beta: 0.0, ..toy_config() };
    let mut a = Trainer::new(lio.clone()).unwrap();
    let mut b = Trainer::new(lio.plain()).unwrap();
    a.fit(&data, None, None).unwrap();
    b.fit(&data, None, None).unwrap();
    let mut backbone_a = a.params.clone();
    backbone_a.retain(|n| !is_head_param(n));
    assert!(backbone_a.bit_eq(&b.params));
    let mut heads_a = a.params.clone();
    heads_a.retain(is_head_param);
    let mut heads_init = lio.init_params().unwrap();
    heads_init.retain(is_head_param);
    assert!(heads_a.bit_eq(&heads_init));
}

#[test]
fn training_is_deterministic_and_moves_heads() {
    let data = toy_data(4);
    let mut a = Trainer::new(toy_config()).unwrap();
    let mut b = Trainer::new(toy_config()).unwrap();
    let ha = a.fit(&data, Some(&data), None).unwrap();
    b.fit(&data, Some(&data), None).unwrap();
    assert!(a.params.bit_eq(&b.params));
    assert_eq!(ha.len(), 2);
    assert!(ha[1].mask_iou.is_some());
    let init = toy_config().init_params().unwrap();
    assert!(!a.params.get("lio.4.mask.weight").unwrap().bit_eq(init.get("lio.4.mask.weight").unwrap()));
}

#[test]
fn fit_writes_checkpoints_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(2);
    let mut t = Trainer::new(toy_config()).unwrap();
    t.fit(&data, Some(&data), Some(dir.path())).unwrap();
    for f in ["epoch-001.lioc", "epoch-002.lioc", "final.lioc", "metrics.csv", "scl_diagnostics.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(lines.count(), 2);
    let ck = Checkpoint::load(&dir.path().join("final.lioc")).unwrap();
    assert!(ck.params.bit_eq(&t.params));
    assert_eq!(ck.epoch, 2);
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let data = toy_data(2);
    let mut t = Trainer::new(toy_config()).unwrap();
    t.params.get_mut("classifier.bias").unwrap().data_mut()[0] = f64::NAN;
    let before = t.params.clone();
    let batch = sample_batch_with_positives(&data, 2, 3, &mut Rng::new(0)).unwrap();
    assert!(matches!(t.train_step(&data, &batch), Err(Error::NonFinite { .. })));
    assert!(t.params.bit_eq(&before));
}

#[test]
fn poisoned_heads_never_reach_predictions() {
    let cfg = toy_config();
    let data = toy_data(2);
    let params = cfg.init_params().unwrap();
    let mut poisoned = params.clone();
    for (name, t) in poisoned.iter_mut() {
        if is_head_param(name) {
            t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
    let b = cfg.seeded_backbone();
    for s in &data.samples {
        let img = s.image_tensor(16);
        let clean = eval::logits(&b, &params, &img).unwrap();
        let dirty = eval::logits(&b, &poisoned, &img).unwrap();
        assert!(dirty.iter().all(|v| v.is_finite()));
        assert_eq!(clean, dirty);
    }
}

#[test]
fn gt_mask_variant_uses_ground_truth_targets() {
    let cfg = TrainConfig { gt_mask: true, ..toy_config() };
    let data = toy_data(2);
    let params = cfg.init_params().unwrap();
    let batch = sample_batch_with_positives(&data, 2, 3, &mut Rng::new(5)).unwrap();
    let obj = batch_objective(&cfg, &params, &data, &batch, ObjectiveOptions::default()).unwrap();
    for (item, t) in batch.iter().zip(&obj.targets) {
        let gt = downsample_mask(data.samples[item.anchor].mask.as_ref().unwrap(), 16, 4).unwrap();
        assert_eq!(t[0].target, gt);
    }
}

#[test]
fn resume_continues_the_random_streams() {
    let data = toy_data(3);
    let mut t = Trainer::new(toy_config()).unwrap();
    t.run_epoch(&data, None).unwrap();
    let mut resumed = Trainer::resume(checkpoint::decode(&t.checkpoint().encode().unwrap(), Path::new("mem"), true).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 1);
    assert!(resumed.params.bit_eq(&t.params));
    assert_eq!(resumed.epoch_batches(&data).unwrap(), t.epoch_batches(&data).unwrap());

    let mut slim = t.checkpoint();
    slim.params.retain(|n| !is_head_param(n));
    assert!(matches!(Trainer::resume(slim), Err(Error::Contract(_))));
}
