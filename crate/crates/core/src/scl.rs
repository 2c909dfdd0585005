//! Spatial context learning.
//!
//! The cell with the largest predicted mask value becomes the reference
//! `(x, y)`. Every cell `(i, j)` then gets polar coordinates relative to it:
//!
//! ```text
//! gamma[i,j] = sqrt((x-i)^2 + (y-j)^2) / (sqrt(2) * N)
//! theta[i,j] = (atan2(y-j, x-i) + pi) / (2 pi)
//! ```
//!
//! with `atan2(0, 0) = 0`, so the reference cell has `gamma = 0` and
//! `theta = 0.5`. Indices are `(row, column)`, 0-based.
//!
//! A shared dense layer reads `concat(h[i,j], h[x,y])` from a projected grid
//! `h` and predicts `(gamma', theta')` for each cell. Two losses weighted by
//! the predicted mask `m'` (a stop-gradient weight) supervise it: the
//! weighted RMS of `gamma' - gamma`, and the weighted standard deviation of
//! the wrapped angle gaps.

use std::f64::consts::PI;

use crate::backbone::{bias_name, weight_name};
use crate::error::{Error, Result};
use crate::heads::HeadNames;
use crate::params::Bound;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Total mask mass at or below which an image is skipped by the losses.
pub const DEGENERATE_MASS: f64 = 1e-8;

/// Ground-truth polar coordinates around a reference cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarField {
    pub gamma: Tensor,
    pub theta: Tensor,
    pub reference: (usize, usize),
}

pub fn ground_truth_polar(n: usize, reference: (usize, usize)) -> Result<PolarField> {
    let (x, y) = reference;
    if x >= n || y >= n {
        return Err(Error::contract(format!(
            "reference ({x}, {y}) outside a {n}x{n} grid"
        )));
    }
    let norm = 2f64.sqrt() * n as f64;
    let mut gamma = Vec::with_capacity(n * n);
    let mut theta = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dx = x as f64 - i as f64;
            let dy = y as f64 - j as f64;
            gamma.push((dx * dx + dy * dy).sqrt() / norm);
            let angle = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
            theta.push((angle + PI) / (2.0 * PI));
        }
    }
    Ok(PolarField {
        gamma: Tensor::new(vec![n, n], gamma)?,
        theta: Tensor::new(vec![n, n], theta)?,
        reference,
    })
}

/// Row-major argmax of an `[N, N]` mask; the first maximum wins ties.
pub fn select_reference(mask: &Tensor) -> (usize, usize) {
    let n = mask.shape()[1];
    let mut best = 0;
    for (i, &v) in mask.data().iter().enumerate() {
        if v > mask.data()[best] {
            best = i;
        }
    }
    (best / n, best % n)
}

/// Gap between the largest and second-largest mask values; the reference
/// choice is stable under perturbations smaller than this.
pub fn reference_margin(mask: &Tensor) -> f64 {
    let (x, y) = select_reference(mask);
    let n = mask.shape()[1];
    let top = mask.data()[x * n + y];
    let second = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != x * n + y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    top - second
}

/// `h = ReLU(conv1x1(f) + b)`, shape `[N, N, C1]`.
pub fn project(g: &mut Graph, params: &Bound, names: &HeadNames, f: Var) -> Result<Var> {
    let w = params.var(&weight_name(&names.proj))?;
    let b = params.var(&bias_name(&names.proj))?;
    let y = g.conv2d(f, w, 1, Padding::Same)?;
    let y = g.add(y, b)?;
    Ok(g.relu(y))
}

/// Predicted polar coordinates, each `[N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct PolarPrediction {
    pub gamma: Var,
    pub theta: Var,
}

pub fn scl_head(
    g: &mut Graph,
    params: &Bound,
    names: &HeadNames,
    h: Var,
    reference: (usize, usize),
) -> Result<PolarPrediction> {
    let s = g.shape(h).to_vec();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::shape("scl_head", format!("expected [N, N, C1], got {s:?}")));
    }
    let (n, c1) = (s[0], s[2]);
    let (x, y) = reference;
    if x >= n || y >= n {
        return Err(Error::contract(format!("reference ({x}, {y}) outside a {n}x{n} grid")));
    }
    let w = params.var(&weight_name(&names.polar))?;
    let b = params.var(&bias_name(&names.polar))?;
    let cells = g.reshape(h, &[n * n, c1])?;
    let anchor = g.select(cells, 0, x * n + y)?;
    let anchor = g.broadcast_to(anchor, &[n * n, c1])?;
    let pairs = g.concat(cells, anchor, 1)?;
    let out = g.matmul(pairs, w)?;
    let out = g.add(out, b)?;
    let out = g.relu(out);
    let gamma = g.narrow(out, 1, 0, 1)?;
    let gamma = g.reshape(gamma, &[n, n])?;
    let theta = g.narrow(out, 1, 1, 1)?;
    let theta = g.reshape(theta, &[n, n])?;
    Ok(PolarPrediction { gamma, theta })
}

/// `m' / sum(m')`, or `None` when the mask is degenerate.
fn normalized_weights(mask: &Tensor) -> Option<Tensor> {
    let mass: f64 = mask.data().iter().sum();
    if !(mass > DEGENERATE_MASS) {
        return None;
    }
    Some(mask.map(|v| v / mass))
}

fn check_shapes(g: &Graph, pred: Var, truth: &Tensor, mask: &Tensor, op: &'static str) -> Result<()> {
    if g.shape(pred) != truth.shape() || truth.shape() != mask.shape() {
        return Err(Error::shape(
            op,
            format!(
                "prediction {:?}, truth {:?}, mask {:?}",
                g.shape(pred),
                truth.shape(),
                mask.shape()
            ),
        ));
    }
    Ok(())
}

/// `sqrt(sum m' (gamma' - gamma)^2 / sum m')`; `None` for a degenerate mask.
pub fn distance_loss(g: &mut Graph, pred: &PolarPrediction, truth: &PolarField, mask: &Tensor) -> Result<Option<Var>> {
    check_shapes(g, pred.gamma, &truth.gamma, mask, "distance_loss")?;
    let Some(weights) = normalized_weights(mask) else {
        return Ok(None);
    };
    let target = g.constant(truth.gamma.clone());
    let w = g.constant(weights);
    let diff = g.sub(pred.gamma, target)?;
    let sq = g.square(diff);
    let weighted = g.mul(sq, w)?;
    let total = g.sum(weighted)?;
    Ok(Some(g.sqrt(total)?))
}

/// Angle loss node plus range diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct AngleLoss {
    pub loss: Var,
    /// Cells whose wrapped gap falls outside `[0, 1)`.
    pub gap_out_of_range: usize,
    /// Cells whose predicted angle falls outside `[0, 1)`.
    pub theta_out_of_range: usize,
}

/// Wrapped gaps: `theta' - theta` when nonnegative, else `1 + theta' - theta`.
pub fn wrapped_gaps(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let d = p - t;
            if d >= 0.0 {
                d
            } else {
                1.0 + d
            }
        })
        .collect()
}

/// Weighted standard deviation of the wrapped angle gaps; `None` for a
/// degenerate mask.
pub fn angle_loss(g: &mut Graph, pred: &PolarPrediction, truth: &PolarField, mask: &Tensor) -> Result<Option<AngleLoss>> {
    check_shapes(g, pred.theta, &truth.theta, mask, "angle_loss")?;
    let Some(weights) = normalized_weights(mask) else {
        return Ok(None);
    };
    let predicted = g.value(pred.theta).data().to_vec();
    let gaps = wrapped_gaps(&predicted, truth.theta.data());

    // The gap is theta' minus a constant on either branch. Gaps are also
    // taken relative to a pivot gap (a constant shift, which the deviation
    // ignores) so that equal gaps cancel exactly.
    let pivot = weights
        .data()
        .iter()
        .position(|&w| w > 0.0)
        .map_or(0.0, |k| gaps[k]);
    let mut margin = f64::INFINITY;
    let offsets: Vec<f64> = predicted
        .iter()
        .zip(truth.theta.data())
        .zip(weights.data())
        .map(|((&p, &t), &w)| {
            let d = p - t;
            if w > 0.0 {
                margin = margin.min(d.abs());
            }
            let wrap = if d >= 0.0 { 0.0 } else { 1.0 };
            t - wrap + pivot
        })
        .collect();
    g.note_margin(margin);

    let offsets = g.constant(Tensor::new(truth.theta.shape().to_vec(), offsets)?);
    let w = g.constant(weights);
    let shifted = g.sub(pred.theta, offsets)?;
    let weighted = g.mul(shifted, w)?;
    let mean = g.sum(weighted)?;
    let dev = g.sub(shifted, mean)?;
    let sq = g.square(dev);
    let weighted_sq = g.mul(sq, w)?;
    let var = g.sum(weighted_sq)?;
    let loss = g.sqrt(var)?;

    Ok(Some(AngleLoss {
        loss,
        gap_out_of_range: gaps.iter().filter(|&&d| !(0.0..1.0).contains(&d)).count(),
        theta_out_of_range: predicted.iter().filter(|&&t| !(0.0..1.0).contains(&t)).count(),
    }))
}

/// Both spatial-context losses for one image.
#[derive(Clone, Copy, Debug)]
pub struct SclLoss {
    pub distance: Var,
    pub angle: Var,
    /// `distance + angle`
    pub total: Var,
    pub gap_out_of_range: usize,
    pub theta_out_of_range: usize,
}

pub fn scl_loss(g: &mut Graph, pred: &PolarPrediction, truth: &PolarField, mask: &Tensor) -> Result<Option<SclLoss>> {
    let Some(distance) = distance_loss(g, pred, truth, mask)? else {
        return Ok(None);
    };
    let Some(angle) = angle_loss(g, pred, truth, mask)? else {
        return Ok(None);
    };
    let total = g.add(distance, angle.loss)?;
    Ok(Some(SclLoss {
        distance,
        angle: angle.loss,
        total,
        gap_out_of_range: angle.gap_out_of_range,
        theta_out_of_range: angle.theta_out_of_range,
    }))
}
