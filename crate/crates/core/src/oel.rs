//! Object-extent learning.
//!
//! For an anchor grid `f` and a positive grid `f'` of the same class, the
//! correlation mask is
//!
//! ```text
//! phi[i,j] = (1/C) * max over (i',j') of <f[i,j], f'[i',j']>
//! ```
//!
//! The pseudo mask `M` is the mean of `phi` over the `P` positives and serves
//! as a stop-gradient regression target for a one-channel 1x1 conv head whose
//! ReLU output `m'` is trained with a mean-square error.

use crate::backbone::{bias_name, weight_name, FeatureGrid};
use crate::error::{Error, Result};
use crate::heads::HeadNames;
use crate::params::{Bound, Params};
use crate::tensor::{Graph, Padding, ReduceKind, Tensor, Var};

/// Differentiable correlation mask `[N, N]` between two `[N, N, C]` grids.
pub fn region_correlation(g: &mut Graph, f: Var, f_pos: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(f).to_vec(), g.shape(f_pos).to_vec());
    if sa.len() != 3 || sb.len() != 3 {
        return Err(Error::shape("region_correlation", format!("{sa:?} and {sb:?}")));
    }
    if sa[2] != sb[2] {
        return Err(Error::shape(
            "region_correlation",
            format!("channel mismatch: {} vs {}", sa[2], sb[2]),
        ));
    }
    if sa[..2] != sb[..2] {
        return Err(Error::shape(
            "region_correlation",
            format!("grid sides differ ({sa:?} vs {sb:?}); resample first"),
        ));
    }
    let (n, c) = (sa[0], sa[2]);
    let a = g.reshape(f, &[n * n, c])?;
    let b = g.reshape(f_pos, &[n * n, c])?;
    let bt = g.transpose(b)?;
    let dots = g.matmul(a, bt)?;
    let best = g.reduce(ReduceKind::Max, dots, &[1])?;
    let phi = g.scale(best, 1.0 / c as f64);
    g.reshape(phi, &[n, n])
}

/// Correlation mask of two feature grids, evaluated outside any training graph.
pub fn correlation_mask(f: &FeatureGrid, f_pos: &FeatureGrid) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(f.tensor().clone());
    let b = g.constant(f_pos.tensor().clone());
    let phi = region_correlation(&mut g, a, b)?;
    Ok(g.value(phi).clone())
}

/// `M = (1/P) * sum_p phi(f, positives[p])`, as a constant `[N, N]` tensor.
///
/// The result carries no graph connection, which is what makes it a
/// stop-gradient target.
pub fn pseudo_mask(f: &FeatureGrid, positives: &[FeatureGrid]) -> Result<Tensor> {
    if positives.is_empty() {
        return Err(Error::contract("pseudo mask needs at least one positive grid"));
    }
    let n = f.side();
    let mut acc = vec![0.0; n * n];
    // fixed positive order keeps the sum bit-reproducible
    for pos in positives {
        let phi = correlation_mask(f, pos)?;
        for (a, v) in acc.iter_mut().zip(phi.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / positives.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![n, n], acc)
}

/// Predicted mask `m' = ReLU(conv1x1(f) + b)`, shape `[N, N]`.
pub fn mask_head(g: &mut Graph, params: &Bound, names: &HeadNames, f: Var) -> Result<Var> {
    let w = params.var(&weight_name(&names.mask))?;
    let b = params.var(&bias_name(&names.mask))?;
    let y = g.conv2d(f, w, 1, Padding::Same)?;
    let y = g.add(y, b)?;
    let y = g.relu(y);
    let n = g.shape(f)[0];
    g.reshape(y, &[n, n])
}

/// [`mask_head`] on a plain feature grid.
pub fn predict_mask(params: &Params, names: &HeadNames, f: &FeatureGrid) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(f.tensor().clone());
    let m = mask_head(&mut g, &bound, names, x)?;
    Ok(g.value(m).clone())
}

/// Mean over the `N x N` cells of `(m' - M)^2`.
pub fn oel_loss(g: &mut Graph, m_pred: Var, target: &Tensor) -> Result<Var> {
    if g.shape(m_pred) != target.shape() {
        return Err(Error::shape(
            "oel_loss",
            format!("prediction {:?} vs target {:?}", g.shape(m_pred), target.shape()),
        ));
    }
    let t = g.constant(target.clone());
    let diff = g.sub(m_pred, t)?;
    let sq = g.square(diff);
    g.mean(sq)
}
