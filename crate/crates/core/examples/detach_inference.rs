//! The heads exist only for training. This trains a small model for one
//! epoch, then shows that
//!
//! * predictions from the full checkpoint and from its backbone alone agree,
//! * poisoning every head tensor with NaN changes nothing,
//! * the deployable parameter count equals that of a never-augmented model.
//!
//!     cargo run --release --example detach_inference

use lio::dataset::{generate, SyntheticSpec};
use lio::heads::{self, is_head_param};
use lio::trainer::{inference, Checkpoint, TrainConfig, Trainer};

fn main() -> lio::Result<()> {
    let data = generate(&SyntheticSpec {
        train_per_class: 20,
        val_per_class: 4,
        seed: 1,
        ..SyntheticSpec::default()
    })?;
    let config = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(config.clone())?;
    trainer.fit(&data.train, None, None)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.lioc");
    trainer.checkpoint().save(&path)?;
    let full = Checkpoint::load(&path)?;
    let slim = Checkpoint::load_backbone(&path)?;
    let mut poisoned = full.clone();
    for (name, t) in poisoned.params.iter_mut() {
        if is_head_param(name) {
            t.data_mut().fill(f64::NAN);
        }
    }

    let mut worst = 0.0f64;
    for s in &data.val.samples {
        let image = s.image_tensor(data.val.image_size);
        let (class, a) = inference(&image, &full)?;
        let (_, b) = inference(&image, &slim)?;
        let (_, c) = inference(&image, &poisoned)?;
        assert_eq!(b, c);
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
        print!("{class} ");
    }
    println!("\nmax logit difference full vs backbone-only: {worst:e}");

    let backbone = config.backbone.parameter_count();
    let with_heads = heads::parameter_count(&config.backbone, config.heads.as_ref())?;
    let plain = heads::parameter_count(&config.plain().backbone, None)?;
    println!(
        "backbone-only checkpoint holds {} params ({} in the plain model); heads add {} ({:.2}%) during training",
        slim.params.iter().map(|(_, t)| t.len()).sum::<usize>(),
        plain,
        with_heads - backbone,
        100.0 * (with_heads - backbone) as f64 / backbone as f64
    );
    Ok(())
}

