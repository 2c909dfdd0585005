//! Seeded comparison runs on a fixed dataset.

use std::time::Instant;

use crate::dataset::{Dataset, SplitDatasets};
use crate::error::Result;
use crate::heads::is_head_param;
use crate::params::Params;
use crate::trainer::eval::{evaluate_params, EvalMode};
use crate::trainer::{TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub val_accuracy: f64,
    /// IoU of the trained mask head, when the model has one.
    pub mask_iou: Option<f64>,
    /// IoU with the trained backbone but the mask head reset to its
    /// initialization.
    pub untrained_mask_iou: Option<f64>,
    pub seconds: f64,
}

/// `params` with every head tensor replaced by its value at initialization.
pub fn reset_heads(config: &TrainConfig, params: &Params) -> Result<Params> {
    let mut out = params.clone();
    for (name, t) in config.init_params()?.iter() {
        if is_head_param(name) {
            out.insert(name, t.clone());
        }
    }
    Ok(out)
}

/// Trains `config` on `data.train` and evaluates once on `data.val`.
pub fn run(config: &TrainConfig, data: &SplitDatasets) -> Result<RunSummary> {
    let start = Instant::now();
    let mut t = Trainer::new(config.clone())?;
    t.fit(&data.train, None, None)?;
    let val_accuracy = evaluate_params(config, &t.params, &data.val, EvalMode::Accuracy)?
        .accuracy
        .unwrap_or(f64::NAN);
    let (mask_iou, untrained_mask_iou) = if config.heads.is_some() && data.val.has_masks() {
        (
            iou(config, &t.params, &data.val)?,
            iou(config, &reset_heads(config, &t.params)?, &data.val)?,
        )
    } else {
        (None, None)
    };
    Ok(RunSummary {
        seed: config.seed,
        val_accuracy,
        mask_iou,
        untrained_mask_iou,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn iou(config: &TrainConfig, params: &Params, data: &Dataset) -> Result<Option<f64>> {
    Ok(evaluate_params(config, params, data, EvalMode::MaskIou)?.mask_iou)
}

/// Median, averaging the two middle values for even lengths. NaN for an
/// empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
