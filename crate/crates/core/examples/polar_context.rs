//! Polar coordinates around a reference cell, and what the angle loss does
//! with a rotated prediction.
//!
//!     cargo run --example polar_context

use lio::scl::{ground_truth_polar, scl_loss, select_reference, wrapped_gaps, PolarPrediction};
use lio::tensor::{Graph, Tensor};

fn print_grid(name: &str, t: &Tensor) {
    println!("{name}:");
    let n = t.shape()[0];
    for row in t.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:6.3}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> lio::Result<()> {
    let n = 5;
    // a mask peaking at (1, 3) picks that cell as the reference
    let mut mask = Tensor::full(&[n, n], 0.1);
    mask.data_mut()[n + 3] = 0.9;
    let reference = select_reference(&mask);
    let field = ground_truth_polar(n, reference)?;
    println!("reference cell {reference:?}");
    print_grid("gamma", &field.gamma);
    print_grid("theta", &field.theta);

    // Rotating every predicted angle by the same amount leaves the angle
    // loss at zero: only relative structure is supervised.
    for shift in [0.0, 0.2, 0.45] {
        let rotated = field.theta.map(|t| (t + shift).fract());
        let gaps = wrapped_gaps(rotated.data(), field.theta.data());
        let mut g = Graph::new();
        let pred = PolarPrediction {
            gamma: g.constant(field.gamma.clone()),
            theta: g.constant(rotated),
        };
        let l = scl_loss(&mut g, &pred, &field, &mask)?.expect("mask has mass");
        println!(
            "shift {shift:.2}: gap spread {:.2e}, distance loss {:.2e}, angle loss {:.2e}",
            gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - gaps.iter().cloned().fold(f64::INFINITY, f64::min),
            g.value(l.distance).item(),
            g.value(l.angle).item(),
        );
    }
    Ok(())
}
