//! Pseudo masks from same-class correlation.
//!
//! Takes one synthetic image, extracts its 8x8 feature grid from a backbone,
//! and averages its correlation against 1, 3 and 5 other images of the same
//! class. The result is printed next to the downsampled ground truth. Pass a
//! checkpoint path to use trained features instead of a fresh backbone.
//!
//!     cargo run --release --example pseudo_mask [-- runs/lio/final.lioc]

use lio::dataset::{downsample_mask, generate, SyntheticSpec};
use lio::oel::pseudo_mask;
use lio::tensor::Tensor;
use lio::trainer::eval::{binarize_at_mean, iou, stage_grid};
use lio::trainer::{Checkpoint, TrainConfig};

const SIDE: usize = 8;

fn show(label: &str, t: &Tensor) {
    let n = t.shape()[0];
    let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let ramp = [' ', '.', ':', '+', '#'];
    println!("{label}");
    for row in t.data().chunks(n) {
        let line: String = row
            .iter()
            .map(|&v| {
                let u = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
                ramp[((u * 4.0).round() as usize).min(4)]
            })
            .flat_map(|c| [c, c])
            .collect();
        println!("  |{line}|");
    }
}

fn main() -> lio::Result<()> {
    let (backbone, params) = match std::env::args().nth(1) {
        Some(path) => {
            let ck = Checkpoint::load_backbone(path.as_ref())?;
            (ck.config.seeded_backbone(), ck.params)
        }
        None => {
            let cfg = TrainConfig::default();
            (cfg.seeded_backbone(), cfg.init_params()?)
        }
    };
    let size = backbone.input_size;
    let data = generate(&SyntheticSpec {
        train_per_class: 8,
        val_per_class: 0,
        image_size: size,
        seed: 3,
        ..SyntheticSpec::default()
    })?
    .train;
    let grid = |i: usize| stage_grid(&backbone, &params, &data.samples[i].image_tensor(size), SIDE);

    // the class-0 image with the largest object, so the mask has room to show
    let class: Vec<usize> = data.indices_by_class()[0].clone();
    let area = |i: usize| data.samples[i].mask.as_ref().map_or(0, |m| m.iter().filter(|&&v| v > 0).count());
    let anchor = *class.iter().max_by_key(|&&i| area(i)).unwrap();
    let others: Vec<usize> = class.iter().copied().filter(|&i| i != anchor).collect();
    let f = grid(anchor)?;
    let gt = downsample_mask(data.samples[anchor].mask.as_ref().unwrap(), size, SIDE)?;
    let gt_bits: Vec<bool> = gt.data().iter().map(|&v| v > 0.5).collect();
    show("ground truth", &gt);
    for p in [1, 3, 5] {
        let positives = others[..p].iter().map(|&i| grid(i)).collect::<lio::Result<Vec<_>>>()?;
        let m = pseudo_mask(&f, &positives)?;
        let score = iou(&binarize_at_mean(&m), &gt_bits);
        show(&format!("pseudo mask, P = {p} (IoU {score:.3})"), &m);
    }
    Ok(())
}
