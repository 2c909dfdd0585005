//! Multi-seed comparison of training variants on the default synthetic set:
//! the plain classifier, both heads, each head alone, and the mask head
//! regressed onto ground-truth masks instead of pseudo masks.
//!
//!     cargo run --release --example ablation -- --seeds 0,1,2,3,4 --variants plain,full

use clap::Parser;
use lio::dataset::{generate, SyntheticSpec};
use lio::experiment::{median, run};
use lio::trainer::TrainConfig;

#[derive(Parser)]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "plain,full,oel,scl,gt-mask")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

fn variant(name: &str, base: &TrainConfig) -> TrainConfig {
    match name {
        "plain" => base.plain(),
        "full" => base.clone(),
        "oel" => TrainConfig { beta: 0.0, ..base.clone() },
        "scl" => TrainConfig { alpha: 0.0, ..base.clone() },
        "gt-mask" => TrainConfig { gt_mask: true, ..base.clone() },
        other => panic!("unknown variant `{other}`"),
    }
}

fn main() -> lio::Result<()> {
    let args = Args::parse();
    let mut table: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for name in &args.variants {
        let (mut accs, mut ious) = (Vec::new(), Vec::new());
        for &seed in &args.seeds {
            let data = generate(&SyntheticSpec { seed, ..SyntheticSpec::default() })?;
            let base = TrainConfig { seed, epochs: args.epochs, ..TrainConfig::default() };
            let r = run(&variant(name, &base), &data)?;
            println!(
                "{name:>8} seed {seed}: val acc {:.4}, mask IoU {}, untrained-head IoU {} ({:.0}s)",
                r.val_accuracy,
                r.mask_iou.map_or("-".into(), |v| format!("{v:.4}")),
                r.untrained_mask_iou.map_or("-".into(), |v| format!("{v:.4}")),
                r.seconds
            );
            accs.push(r.val_accuracy);
            ious.extend(r.mask_iou);
        }
        table.push((name.clone(), accs, ious));
    }

    println!("\n{:>8}  {:>10}  {:>10}", "variant", "median acc", "median IoU");
    for (name, accs, ious) in &table {
        let iou = if ious.is_empty() { "-".into() } else { format!("{:.4}", median(ious)) };
        println!("{name:>8}  {:>10.4}  {iou:>10}", median(accs));
    }
    if let (Some(plain), Some(full)) = (
        table.iter().find(|t| t.0 == "plain"),
        table.iter().find(|t| t.0 == "full"),
    ) {
        let gains: Vec<f64> = full.1.iter().zip(&plain.1).map(|(a, b)| 100.0 * (a - b)).collect();
        println!("\nper-seed accuracy gain of full over plain (pp): {gains:.2?}; median {:.2}", median(&gains));
    }
    Ok(())
}
