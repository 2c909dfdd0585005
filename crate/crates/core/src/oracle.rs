//! Scalar-loop reference implementations.
//!
//! Everything here is a direct transcription of the defining formulas with
//! plain nested loops. Review rule: this module may use `Tensor` as a data
//! container and `Params` as a name map, nothing else from the crate. The
//! `imports_are_restricted` test enforces it.

use std::f64::consts::PI;

use crate::params::Params;
use crate::tensor::Tensor;

/// `phi[i,j] = (1/C) max_{i',j'} <f[i,j], f'[i',j']>` over `[N, N, C]` grids.
pub fn correlation(f: &Tensor, f_pos: &Tensor) -> Tensor {
    let (n, c) = (f.shape()[0], f.shape()[2]);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            for ip in 0..n {
                for jp in 0..n {
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += f.at(&[i, j, k]) * f_pos.at(&[ip, jp, k]);
                    }
                    if dot > best {
                        best = dot;
                    }
                }
            }
            out[i * n + j] = best / c as f64;
        }
    }
    Tensor::new(vec![n, n], out).unwrap()
}

pub fn pseudo_mask(f: &Tensor, positives: &[Tensor]) -> Tensor {
    let n = f.shape()[0];
    let mut acc = vec![0.0; n * n];
    for p in positives {
        let phi = correlation(f, p);
        for k in 0..n * n {
            acc[k] += phi.data()[k];
        }
    }
    for v in &mut acc {
        *v /= positives.len() as f64;
    }
    Tensor::new(vec![n, n], acc).unwrap()
}

/// Pointwise layer `ReLU(sum_c f[i,j,c] w[c,o] + b[o])`, weights `[C, O]`.
pub fn pointwise(f: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let (n, c) = (f.shape()[0], f.shape()[2]);
    let o = b.len();
    let mut out = vec![0.0; n * n * o];
    for i in 0..n {
        for j in 0..n {
            for q in 0..o {
                let mut s = b[q];
                for k in 0..c {
                    s += f.at(&[i, j, k]) * w[k * o + q];
                }
                out[(i * n + j) * o + q] = s.max(0.0);
            }
        }
    }
    Tensor::new(vec![n, n, o], out).unwrap()
}

/// One-channel mask head, `[N, N]`.
pub fn mask_head(f: &Tensor, w: &[f64], b: f64) -> Tensor {
    let n = f.shape()[0];
    pointwise(f, w, &[b]).reshape(&[n, n]).unwrap()
}

/// Polar regression from a projected grid `h`; `w` is `[2*C1, 2]`.
/// Returns `(gamma', theta')`.
pub fn scl_head(h: &Tensor, w: &[f64], b: &[f64], reference: (usize, usize)) -> (Tensor, Tensor) {
    let (n, c1) = (h.shape()[0], h.shape()[2]);
    let (x, y) = reference;
    let mut gamma = vec![0.0; n * n];
    let mut theta = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut out = [b[0], b[1]];
            for (q, o) in out.iter_mut().enumerate() {
                for k in 0..c1 {
                    *o += h.at(&[i, j, k]) * w[k * 2 + q];
                    *o += h.at(&[x, y, k]) * w[(c1 + k) * 2 + q];
                }
            }
            gamma[i * n + j] = out[0].max(0.0);
            theta[i * n + j] = out[1].max(0.0);
        }
    }
    (
        Tensor::new(vec![n, n], gamma).unwrap(),
        Tensor::new(vec![n, n], theta).unwrap(),
    )
}

/// Closed-form polar field: `(gamma, theta)`.
pub fn polar(n: usize, reference: (usize, usize)) -> (Tensor, Tensor) {
    let (x, y) = (reference.0 as f64, reference.1 as f64);
    let mut gamma = vec![0.0; n * n];
    let mut theta = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (x - i as f64, y - j as f64);
            gamma[i * n + j] = (a * a + b * b).sqrt() / (2f64.sqrt() * n as f64);
            let ang = if a == 0.0 && b == 0.0 { 0.0 } else { b.atan2(a) };
            theta[i * n + j] = (ang + PI) / (2.0 * PI);
        }
    }
    (
        Tensor::new(vec![n, n], gamma).unwrap(),
        Tensor::new(vec![n, n], theta).unwrap(),
    )
}

/// Direct-convolution reference. Input `[H, W, Cin]`, kernel `[k, k, Cin, Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, same: bool) -> Tensor {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let (ho, pt) = extent(h, k, stride, same);
    let (wo, pl) = extent(w, k, stride, same);
    let mut out = vec![0.0; ho * wo * cout];
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += input.at(&[iy as usize, ix as usize, ci]) * kernel.at(&[ky, kx, ci, co]);
                        }
                    }
                }
                out[(oy * wo + ox) * cout + co] = s;
            }
        }
    }
    Tensor::new(vec![ho, wo, cout], out).unwrap()
}

fn extent(n: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = n.div_ceil(stride);
        let pad = ((out - 1) * stride + k).saturating_sub(n);
        (out, pad / 2)
    } else {
        ((n - k) / stride + 1, 0)
    }
}

/// `x W + b` for `x[d]`, `W[d, m]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let m = b.len();
    (0..m)
        .map(|q| b[q] + (0..x.len()).map(|p| x[p] * w[p * m + q]).sum::<f64>())
        .collect()
}

/// `-sum_k l_k log softmax(z)_k`
pub fn softmax_cross_entropy(z: &[f64], target: &[f64]) -> f64 {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
    z.iter().zip(target).map(|(v, t)| -t * (v - lse)).sum()
}

/// The three auxiliary losses of one image. Weighted terms are `None` when
/// the mask has no mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub distance: Option<f64>,
    pub angle: Option<f64>,
    pub oel: f64,
}

/// Transcription of the three losses. `m_target` is the pseudo mask, `m_pred`
/// the head's mask (also used as the weight).
pub fn losses(
    gamma_pred: &Tensor,
    theta_pred: &Tensor,
    gamma: &Tensor,
    theta: &Tensor,
    m_pred: &Tensor,
    m_target: &Tensor,
) -> Losses {
    let cells = m_pred.len();
    let mut oel = 0.0;
    for k in 0..cells {
        let d = m_pred.data()[k] - m_target.data()[k];
        oel += d * d;
    }
    oel /= cells as f64;

    let mass: f64 = m_pred.data().iter().sum();
    if mass <= 1e-8 {
        return Losses {
            distance: None,
            angle: None,
            oel,
        };
    }

    let mut dis = 0.0;
    for k in 0..cells {
        let d = gamma_pred.data()[k] - gamma.data()[k];
        dis += m_pred.data()[k] * d * d;
    }
    let distance = (dis / mass).sqrt();

    let gap = |k: usize| {
        let d = theta_pred.data()[k] - theta.data()[k];
        if d >= 0.0 {
            d
        } else {
            1.0 + d
        }
    };
    let mut mean = 0.0;
    for k in 0..cells {
        mean += m_pred.data()[k] * gap(k);
    }
    mean /= mass;
    let mut var = 0.0;
    for k in 0..cells {
        let d = gap(k) - mean;
        var += m_pred.data()[k] * d * d;
    }
    let angle = (var / mass).sqrt();

    Losses {
        distance: Some(distance),
        angle: Some(angle),
        oel,
    }
}

/// Central-difference gradient of `loss` at `params`, one scalar at a time.
pub fn finite_difference_grad(mut loss: impl FnMut(&Params) -> f64, params: &Params, step: f64) -> Params {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = params.clone();
    let mut grads = Params::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let mut g = vec![0.0; len];
        for (idx, slot) in g.iter_mut().enumerate() {
            let orig = params.get(&name).unwrap().data()[idx];
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig + step;
            let up = loss(&probe);
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig - step;
            let down = loss(&probe);
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let shape = params.get(&name).unwrap().shape().to_vec();
        grads.insert(name, Tensor::new(shape, g).unwrap());
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn imports_are_restricted() {
        let src = include_str!("oracle.rs");
        let body = src.split("#[cfg(test)]").next().unwrap();
        for line in body.lines().filter(|l| l.trim_start().starts_with("use crate")) {
            assert!(
                line.contains("crate::tensor::Tensor;") || line.contains("crate::params::Params;"),
                "forbidden import: {line}"
            );
        }
    }

    #[test]
    fn single_cell_is_scaled_dot() {
        let f = t(&[1, 1, 2], &[1.0, 2.0]);
        let p = t(&[1, 1, 2], &[3.0, 4.0]);
        assert_eq!(correlation(&f, &p).data(), &[5.5]);
    }

    #[test]
    fn zero_positive_gives_zero() {
        let f = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::zeros(&[2, 2, 1]);
        assert!(correlation(&f, &z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_predictions_give_zero_losses() {
        let (g, th) = polar(3, (1, 1));
        let m = Tensor::full(&[3, 3], 0.4);
        let l = losses(&g, &th, &g, &th, &m, &m);
        assert_eq!(l, Losses { distance: Some(0.0), angle: Some(0.0), oel: 0.0 });
    }

    #[test]
    fn uniform_weights_give_plain_rms_and_std() {
        let gp = t(&[1, 2], &[0.3, 0.1]);
        let g = t(&[1, 2], &[0.0, 0.0]);
        let tp = t(&[1, 2], &[0.5, 0.7]);
        let th = t(&[1, 2], &[0.4, 0.4]);
        let m = Tensor::full(&[1, 2], 3.0);
        let l = losses(&gp, &tp, &g, &th, &m, &m);
        assert!((l.distance.unwrap() - (0.05f64).sqrt()).abs() < 1e-15);
        assert!((l.angle.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fd_of_quadratic_is_exact() {
        let mut p = Params::new();
        p.insert("x", t(&[2], &[1.5, -2.0]));
        let g = finite_difference_grad(|p| p.get("x").unwrap().data().iter().map(|v| v * v).sum(), &p, 1e-6);
        let d = g.get("x").unwrap().data();
        assert!((d[0] - 3.0).abs() < 1e-8 && (d[1] + 4.0).abs() < 1e-8);
        let zero = finite_difference_grad(|_| 0.0, &p, 1e-6);
        assert!(zero.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
