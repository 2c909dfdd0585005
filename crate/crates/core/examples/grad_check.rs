//! Checks every analytic gradient against central differences, then shows
//! that a deliberately corrupted backward rule is caught and named.
//!
//!     cargo run --release --example grad_check

use std::time::Instant;

use lio::gradcheck::{run, GradCheckOptions};
use lio::tensor::OpKind;

fn main() -> lio::Result<()> {
    let start = Instant::now();
    let report = run(&GradCheckOptions::default())?;
    println!("{report}");
    println!("took {:.1?}\n", start.elapsed());

    let corrupted = run(&GradCheckOptions {
        instances: 3,
        fault: Some(OpKind::Conv2d),
        ..GradCheckOptions::default()
    })?;
    println!("with a corrupted conv2d backward, failing checks: {:?}", corrupted.failures());
    Ok(())
}
