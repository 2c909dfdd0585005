//! How the number of same-class positives behind each pseudo mask affects
//! the learned mask quality and accuracy.
//!
//!     cargo run --release --example positive_count -- --counts 1,3,5 --seeds 0,1,2

use clap::Parser;
use lio::dataset::{generate, SyntheticSpec};
use lio::experiment::{median, run};
use lio::trainer::TrainConfig;

#[derive(Parser)]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

fn main() -> lio::Result<()> {
    let args = Args::parse();
    for &p in &args.counts {
        let (mut ious, mut accs) = (Vec::new(), Vec::new());
        for &seed in &args.seeds {
            let data = generate(&SyntheticSpec { seed, ..SyntheticSpec::default() })?;
            let config = TrainConfig { positives: p, seed, epochs: args.epochs, ..TrainConfig::default() };
            let r = run(&config, &data)?;
            ious.push(r.mask_iou.expect("heads attached"));
            accs.push(r.val_accuracy);
        }
        println!("P = {p}: median mask IoU {:.4}, median val acc {:.4}", median(&ious), median(&accs));
    }
    Ok(())
}
