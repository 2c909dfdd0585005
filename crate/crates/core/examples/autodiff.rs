//! The tape: build a tiny two-layer expression, differentiate it, and
//! compare one entry against a central difference.
//!
//!     cargo run --example autodiff

use lio::tensor::{Graph, Tensor};

fn loss(x: &Tensor, w: &Tensor) -> lio::Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let w = g.param(w.clone());
    let h = g.matmul(x, w)?;
    let h = g.relu(h);
    let h = g.square(h);
    let l = g.mean(h)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item(), grads.wrt(w).clone()))
}

fn main() -> lio::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w = Tensor::new(vec![3, 2], vec![0.2, -0.4, 0.7, 0.1, -0.3, 0.9])?;
    let (value, grad) = loss(&x, &w)?;
    println!("loss = {value:.6}");
    println!("dloss/dw = {:?}", grad.data());

    let h = 1e-6;
    let (mut up, mut down) = (w.clone(), w.clone());
    up.data_mut()[1] += h;
    down.data_mut()[1] -= h;
    let numeric = (loss(&x, &up)?.0 - loss(&x, &down)?.0) / (2.0 * h);
    println!("w[0,1]: analytic {:.9}, central difference {numeric:.9}", grad.data()[1]);
    Ok(())
}
