//! Inference and evaluation. Only backbone tensors are bound here, so head
//! parameters cannot influence a prediction.

use super::{Checkpoint, TrainConfig};
use crate::backbone::{self, is_backbone_param, BackboneConfig, FeatureGrid};
use crate::dataset::{downsample_mask, Dataset};
use crate::error::{Error, Result};
use crate::heads::HeadNames;
use crate::oel;
use crate::params::Params;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Accuracy,
    MaskIou,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "accuracy" => Ok(EvalMode::Accuracy),
            "mask-iou" => Ok(EvalMode::MaskIou),
            other => Err(format!("unknown mode `{other}` (expected accuracy or mask-iou)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub samples: usize,
    pub accuracy: Option<f64>,
    pub mask_iou: Option<f64>,
}

/// Class logits of one `[H, W, 3]` image from backbone tensors only.
pub fn logits(config: &BackboneConfig, params: &Params, image: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.bind_where(&mut g, false, is_backbone_param);
    let x = g.constant(image.clone());
    let out = backbone::forward(&mut g, config, &bound, x, None)?;
    Ok(g.value(out.logits.expect("full forward")).data().to_vec())
}

/// Predicted class (lowest index on ties) and logits.
pub fn inference(image: &Tensor, checkpoint: &Checkpoint) -> Result<(usize, Vec<f64>)> {
    let z = logits(&checkpoint.config.seeded_backbone(), &checkpoint.params, image)?;
    Ok((backbone::argmax(&z), z))
}

/// Mask-head output `m'` on the stage with grid side `side`.
pub fn predicted_mask(config: &BackboneConfig, params: &Params, image: &Tensor, side: usize) -> Result<Tensor> {
    let grid = stage_grid(config, params, image, side)?;
    oel::predict_mask(params, &HeadNames::new(side), &grid)
}

/// Backbone feature grid of the stage with grid side `side`.
pub fn stage_grid(config: &BackboneConfig, params: &Params, image: &Tensor, side: usize) -> Result<FeatureGrid> {
    let stage = config.stage_index(side)?;
    let mut g = Graph::new();
    let bound = params.bind_where(&mut g, false, is_backbone_param);
    let x = g.constant(image.clone());
    let out = backbone::forward(&mut g, config, &bound, x, Some(stage))?;
    FeatureGrid::new(g.value(out.stages[stage]).clone())
}

/// Cells at or above the mask's own mean.
pub fn binarize_at_mean(mask: &Tensor) -> Vec<bool> {
    let mean = mask.data().iter().sum::<f64>() / mask.len() as f64;
    mask.data().iter().map(|&v| v >= mean).collect()
}

/// Intersection over union; two empty masks count as a perfect match.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn accuracy(config: &BackboneConfig, params: &Params, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("accuracy of an empty split"));
    }
    let mut correct = 0;
    for s in &data.samples {
        let z = logits(config, params, &s.image_tensor(data.image_size))?;
        if backbone::argmax(&z) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean IoU between the binarized `m'` at `side` and the downsampled
/// ground-truth masks.
pub fn mask_iou(config: &BackboneConfig, params: &Params, data: &Dataset, side: usize) -> Result<f64> {
    if !data.has_masks() {
        return Err(Error::contract("mask IoU needs ground-truth masks on every sample"));
    }
    let mut total = 0.0;
    for s in &data.samples {
        let m = predicted_mask(config, params, &s.image_tensor(data.image_size), side)?;
        let gt = downsample_mask(s.mask.as_ref().expect("checked"), data.image_size, side)?;
        let gt: Vec<bool> = gt.data().iter().map(|&v| v > 0.5).collect();
        total += iou(&binarize_at_mean(&m), &gt);
    }
    Ok(total / data.len() as f64)
}

/// Metrics of `params` on `data`. Mask IoU uses the first attached stage.
pub fn evaluate_params(config: &TrainConfig, params: &Params, data: &Dataset, mode: EvalMode) -> Result<Metrics> {
    let b = config.seeded_backbone();
    let mut m = Metrics {
        samples: data.len(),
        ..Default::default()
    };
    match mode {
        EvalMode::Accuracy => m.accuracy = Some(accuracy(&b, params, data)?),
        EvalMode::MaskIou => {
            let side = *config
                .stages()
                .first()
                .ok_or_else(|| Error::contract("mask IoU needs a model with an attached mask head"))?;
            m.mask_iou = Some(mask_iou(&b, params, data, side)?);
        }
    }
    Ok(m)
}

pub fn evaluate(data: &Dataset, checkpoint: &Checkpoint, mode: EvalMode) -> Result<Metrics> {
    evaluate_params(&checkpoint.config, &checkpoint.params, data, mode)
}
