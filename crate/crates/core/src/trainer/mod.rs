//! Joint training of the classifier and the attached heads.
//!
//! Per batch the objective is
//!
//! ```text
//! L = L_cls + alpha * sum_s L_oel(s) + beta * sum_s (L_dis(s) + L_angle(s))
//! ```
//!
//! where `s` runs over the attached stages and every term is a batch mean.
//! Images whose predicted mask has no mass contribute zero to the spatial
//! terms but still count in the batch size.

pub mod checkpoint;
pub mod eval;

use std::fs;
use std::path::Path;

use log::info;

use crate::backbone::{self, BackboneConfig, FeatureGrid};
use crate::dataset::{downsample_mask, Dataset};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadNames};
use crate::oel;
use crate::params::Params;
use crate::rng::{Rng, RngState};
use crate::scl;
use crate::tensor::{Graph, OpKind};

pub use checkpoint::Checkpoint;
pub use eval::{evaluate, inference, EvalMode, Metrics};

/// Rng streams of the training seed.
const SHUFFLE_STREAM: u64 = 1;
const POSITIVE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Architecture. Its `seed` is overwritten by [`TrainConfig::seed`].
    pub backbone: BackboneConfig,
    /// `None` trains the plain classifier with no heads at all.
    pub heads: Option<HeadConfig>,
    pub alpha: f64,
    pub beta: f64,
    /// Positive images per anchor.
    pub positives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: Option<LrDecay>,
    /// Rescale the gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Regress the mask head onto the ground-truth mask instead of the
    /// pseudo mask.
    pub gt_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            heads: Some(HeadConfig::default()),
            alpha: 0.1,
            beta: 0.1,
            positives: 3,
            batch_size: 16,
            epochs: 20,
            lr: 0.02,
            momentum: 0.9,
            lr_decay: None,
            grad_clip: Some(1.0),
            seed: 0,
            gt_mask: false,
        }
    }
}

impl TrainConfig {
    /// The plain classifier: same optimization settings, no heads.
    pub fn plain(&self) -> Self {
        Self {
            heads: None,
            alpha: 0.0,
            beta: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(h) = &self.heads {
            h.validate(&self.backbone)?;
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::contract(format!(
                "loss weights must be nonnegative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if self.positives == 0 {
            return Err(Error::contract("at least one positive image per anchor is required"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!("invalid lr {} / momentum {}", self.lr, self.momentum)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("gradient clip norm must be positive"));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(Error::contract("lr decay needs a positive period and factor"));
            }
        }
        Ok(())
    }

    /// Backbone config carrying the training seed.
    pub fn seeded_backbone(&self) -> BackboneConfig {
        BackboneConfig {
            seed: self.seed,
            ..self.backbone.clone()
        }
    }

    /// Attached stage sides, empty for the plain classifier.
    pub fn stages(&self) -> &[usize] {
        self.heads.as_ref().map_or(&[], |h| &h.stages)
    }

    /// Fresh backbone and head parameters.
    pub fn init_params(&self) -> Result<Params> {
        self.validate()?;
        let b = self.seeded_backbone();
        let mut params = backbone::init_params(&b)?;
        if let Some(h) = &self.heads {
            params.extend(h.init_params(&b)?);
        }
        Ok(params)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.factor.powi((epoch / d.every) as i32),
            None => self.lr,
        }
    }
}

/// Heads on each of `stages` (grid sides), keeping the rest of `config`.
pub fn attach_stages(config: &TrainConfig, stages: &[usize]) -> Result<TrainConfig> {
    let heads = HeadConfig {
        stages: stages.to_vec(),
        proj_channels: config.heads.as_ref().map_or(HeadConfig::default().proj_channels, |h| h.proj_channels),
    };
    heads.validate(&config.backbone)?;
    Ok(TrainConfig {
        heads: Some(heads),
        ..config.clone()
    })
}

// ----- sampling ---------------------------------------------------------------

/// One anchor and its positives, as dataset indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub anchor: usize,
    pub positives: Vec<usize>,
}

/// Draws `p` same-class positives for `anchor`.
///
/// With at least `p` other images in the class they are distinct and exclude
/// the anchor. Otherwise they are drawn with replacement from the other
/// images, or are copies of the anchor when it is alone in its class.
pub fn sample_positives(groups: &[Vec<usize>], label: usize, anchor: usize, p: usize, rng: &mut Rng) -> Vec<usize> {
    let mut others: Vec<usize> = groups[label].iter().copied().filter(|&i| i != anchor).collect();
    if others.is_empty() {
        return vec![anchor; p];
    }
    if others.len() < p {
        return (0..p).map(|_| others[rng.below(others.len())]).collect();
    }
    // partial Fisher-Yates
    for k in 0..p {
        let j = k + rng.below(others.len() - k);
        others.swap(k, j);
    }
    others.truncate(p);
    others
}

/// `batch_size` distinct random anchors, each with `p` positives.
pub fn sample_batch_with_positives(data: &Dataset, batch_size: usize, p: usize, rng: &mut Rng) -> Result<Vec<BatchItem>> {
    if data.is_empty() {
        return Err(Error::contract("cannot sample from an empty dataset"));
    }
    let groups = data.indices_by_class();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let take = batch_size.min(order.len());
    for k in 0..take {
        let j = k + rng.below(order.len() - k);
        order.swap(k, j);
    }
    Ok(order[..take]
        .iter()
        .map(|&anchor| BatchItem {
            anchor,
            positives: sample_positives(&groups, data.samples[anchor].label, anchor, p, rng),
        })
        .collect())
}

// ----- objective --------------------------------------------------------------

/// Stop-gradient quantities of one image at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTargets {
    /// Regression target of the mask head.
    pub target: crate::tensor::Tensor,
    /// Predicted mask values used as spatial-loss weights.
    pub weights: crate::tensor::Tensor,
    pub reference: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageLosses {
    pub side: usize,
    pub oel: f64,
    pub dis: f64,
    pub angle: f64,
}

/// Batch-mean loss components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub cls: f64,
    /// Summed over stages.
    pub oel: f64,
    pub dis: f64,
    pub angle: f64,
    /// `dis + angle`
    pub scl: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub per_stage: Vec<StageLosses>,
}

impl LossBundle {
    /// `cls + alpha * oel + beta * scl`
    pub fn combine(cls: f64, oel: f64, scl: f64, alpha: f64, beta: f64) -> f64 {
        cls + alpha * oel + beta * scl
    }
}

/// Range counters of the angle branch, accumulated over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SclDiagnostics {
    pub cells: usize,
    pub gap_out_of_range: usize,
    pub theta_out_of_range: usize,
    pub degenerate_images: usize,
}

impl SclDiagnostics {
    fn add(&mut self, other: &SclDiagnostics) {
        self.cells += other.cells;
        self.gap_out_of_range += other.gap_out_of_range;
        self.theta_out_of_range += other.theta_out_of_range;
        self.degenerate_images += other.degenerate_images;
    }
}

/// Knobs of [`batch_objective`] used by gradient checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveOptions<'a> {
    /// Reuse these stop-gradient quantities instead of recomputing them.
    pub frozen: Option<&'a [Vec<StageTargets>]>,
    pub want_grads: bool,
    pub fault: Option<OpKind>,
}

#[derive(Debug)]
pub struct BatchObjective {
    pub losses: LossBundle,
    /// Gradient of `losses.total`, keyed like the parameters.
    pub grads: Option<Params>,
    /// Per image, per attached stage.
    pub targets: Vec<Vec<StageTargets>>,
    /// Anchors classified correctly by the pre-update parameters.
    pub correct: usize,
    pub diagnostics: SclDiagnostics,
    /// Smallest distance to a non-differentiable point over the batch.
    pub kink_margin: f64,
}

/// Loss, gradients and detached targets of one batch.
pub fn batch_objective(
    config: &TrainConfig,
    params: &Params,
    data: &Dataset,
    batch: &[BatchItem],
    opts: ObjectiveOptions<'_>,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let bcfg = config.seeded_backbone();
    let stages = config.stages();
    let stage_idx: Vec<usize> = stages.iter().map(|&s| bcfg.stage_index(s)).collect::<Result<_>>()?;
    let deepest = stage_idx.iter().copied().max();
    let inv_b = 1.0 / batch.len() as f64;

    let mut grads = opts.want_grads.then(|| zeros_like(params));
    let mut per_stage: Vec<StageLosses> = stages.iter().map(|&side| StageLosses { side, ..Default::default() }).collect();
    let mut cls_sum = 0.0;
    let mut correct = 0;
    let mut diagnostics = SclDiagnostics::default();
    let mut all_targets = Vec::with_capacity(batch.len());
    let mut kink = f64::INFINITY;

    for (b, item) in batch.iter().enumerate() {
        let sample = &data.samples[item.anchor];
        let mut g = Graph::new();
        if let Some(kind) = opts.fault {
            g.inject_fault(kind);
        }
        let bound = params.bind(&mut g, true);
        let x = g.constant(sample.image_tensor(data.image_size));
        let out = backbone::forward(&mut g, &bcfg, &bound, x, None)?;
        let logits = out.logits.expect("full forward has logits");
        if backbone::argmax(g.value(logits).data()) == sample.label {
            correct += 1;
        }
        let cls = backbone::classification_loss(&mut g, &[logits], &[sample.label])?;
        cls_sum += g.value(cls).item();
        let mut total = g.scale(cls, inv_b);

        // positive grids are constants: computed outside the training graph
        let positive_grids: Vec<Vec<FeatureGrid>> = match (deepest, opts.frozen, config.gt_mask) {
            (Some(last), None, false) => item
                .positives
                .iter()
                .map(|&p| stage_grids(&bcfg, params, data, p, last))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };

        let mut image_targets = Vec::with_capacity(stages.len());
        for (k, (&side, &si)) in stages.iter().zip(&stage_idx).enumerate() {
            let names = HeadNames::new(side);
            let f = out.stages[si];
            let m = oel::mask_head(&mut g, &bound, &names, f)?;
            let targets = match opts.frozen {
                Some(frozen) => frozen[b][k].clone(),
                None => {
                    let target = if config.gt_mask {
                        let mask = sample
                            .mask
                            .as_ref()
                            .ok_or_else(|| Error::contract("ground-truth mask targets need masks on every sample"))?;
                        downsample_mask(mask, data.image_size, side)?
                    } else {
                        let anchor = FeatureGrid::new(g.value(f).clone())?;
                        let pos: Vec<FeatureGrid> = positive_grids.iter().map(|grids| grids[si].clone()).collect();
                        oel::pseudo_mask(&anchor, &pos)?
                    };
                    let weights = g.value(m).clone();
                    let reference = scl::select_reference(&weights);
                    StageTargets {
                        target,
                        weights,
                        reference,
                    }
                }
            };
            let l_oel = oel::oel_loss(&mut g, m, &targets.target)?;
            per_stage[k].oel += g.value(l_oel).item() * inv_b;
            let weighted = g.scale(l_oel, config.alpha * inv_b);
            total = g.add(total, weighted)?;

            let n = g.shape(f)[0];
            let truth = scl::ground_truth_polar(n, targets.reference)?;
            let h = scl::project(&mut g, &bound, &names, f)?;
            let pred = scl::scl_head(&mut g, &bound, &names, h, targets.reference)?;
            match scl::scl_loss(&mut g, &pred, &truth, &targets.weights)? {
                Some(l) => {
                    per_stage[k].dis += g.value(l.distance).item() * inv_b;
                    per_stage[k].angle += g.value(l.angle).item() * inv_b;
                    diagnostics.cells += n * n;
                    diagnostics.gap_out_of_range += l.gap_out_of_range;
                    diagnostics.theta_out_of_range += l.theta_out_of_range;
                    let weighted = g.scale(l.total, config.beta * inv_b);
                    total = g.add(total, weighted)?;
                }
                None => diagnostics.degenerate_images += 1,
            }
            image_targets.push(targets);
        }

        if let Some(acc) = grads.as_mut() {
            let gr = g.backward(total)?;
            for (name, var) in bound.iter() {
                let dst = acc.get_mut(name).expect("gradient slots match parameters");
                for (a, v) in dst.data_mut().iter_mut().zip(gr.wrt(var).data()) {
                    *a += v;
                }
            }
        }
        kink = kink.min(g.kink_margin());
        all_targets.push(image_targets);
    }

    let cls = cls_sum * inv_b;
    let oel: f64 = per_stage.iter().map(|s| s.oel).sum();
    let dis: f64 = per_stage.iter().map(|s| s.dis).sum();
    let angle: f64 = per_stage.iter().map(|s| s.angle).sum();
    let scl = dis + angle;
    let losses = LossBundle {
        cls,
        oel,
        dis,
        angle,
        scl,
        total: LossBundle::combine(cls, oel, scl, config.alpha, config.beta),
        alpha: config.alpha,
        beta: config.beta,
        per_stage,
    };
    Ok(BatchObjective {
        losses,
        grads,
        targets: all_targets,
        correct,
        diagnostics,
        kink_margin: kink,
    })
}

/// Feature grids of stages `0..=last` for one image, outside any training graph.
fn stage_grids(bcfg: &BackboneConfig, params: &Params, data: &Dataset, index: usize, last: usize) -> Result<Vec<FeatureGrid>> {
    let mut g = Graph::new();
    let bound = params.bind_where(&mut g, false, backbone::is_backbone_param);
    let x = g.constant(data.samples[index].image_tensor(data.image_size));
    let out = backbone::forward(&mut g, bcfg, &bound, x, Some(last))?;
    out.stages.iter().map(|&v| FeatureGrid::new(g.value(v).clone())).collect()
}

fn zeros_like(params: &Params) -> Params {
    let mut z = Params::new();
    for (name, t) in params.iter() {
        z.insert(name, crate::tensor::Tensor::zeros(t.shape()));
    }
    z
}

// ----- optimization -------------------------------------------------------------

/// Summary of one optimization step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossBundle,
    pub correct: usize,
    pub batch_size: usize,
    pub diagnostics: SclDiagnostics,
}

/// Per-epoch record, one metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Means of the per-step bundles.
    pub losses: LossBundle,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub mask_iou: Option<f64>,
    pub diagnostics: SclDiagnostics,
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "l_cls", "l_oel", "l_dis", "l_angle", "l_scl", "total", "train_acc", "val_acc", "mask_iou",
];

pub const DIAGNOSTICS_HEADER: [&str; 5] = [
    "epoch", "cells", "gap_out_of_range", "theta_out_of_range", "degenerate_images",
];

/// SGD with momentum over a dataset, owning parameters and rng state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: Params,
    velocity: Params,
    shuffle_rng: Rng,
    positive_rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let params = config.init_params()?;
        Ok(Self {
            velocity: zeros_like(&params),
            shuffle_rng: Rng::with_stream(config.seed, SHUFFLE_STREAM),
            positive_rng: Rng::with_stream(config.seed, POSITIVE_STREAM),
            params,
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// random streams pick up where they stopped; momentum starts from zero
    /// because checkpoints do not store it.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let Checkpoint { config, params, epoch, rng } = checkpoint;
        config.validate()?;
        let [shuffle, positive] = <[RngState; 2]>::try_from(rng)
            .map_err(|r| Error::contract(format!("expected 2 rng states, checkpoint has {}", r.len())))?;
        let expected = config.init_params()?;
        if let Some(missing) = expected.names().find(|n| !params.contains(n)) {
            return Err(Error::contract(format!("checkpoint lacks `{missing}`; backbone-only checkpoints cannot resume")));
        }
        Ok(Self {
            velocity: zeros_like(&params),
            shuffle_rng: Rng::from_state(shuffle),
            positive_rng: Rng::from_state(positive),
            params,
            config,
            epoch,
            step: 0,
        })
    }

    pub fn rng_states(&self) -> [RngState; 2] {
        [self.shuffle_rng.state(), self.positive_rng.state()]
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            epoch: self.epoch,
            rng: self.rng_states().to_vec(),
        }
    }

    /// One update on `batch`. The loss is checked for finiteness before any
    /// parameter changes.
    pub fn train_step(&mut self, data: &Dataset, batch: &[BatchItem]) -> Result<StepReport> {
        let obj = batch_objective(
            &self.config,
            &self.params,
            data,
            batch,
            ObjectiveOptions {
                want_grads: true,
                ..Default::default()
            },
        )?;
        let grads = obj.grads.expect("gradients requested");
        let grads_finite = grads.iter().all(|(_, t)| t.is_finite());
        if !obj.losses.total.is_finite() || !grads_finite {
            let anchors: Vec<usize> = batch.iter().map(|b| b.anchor).collect();
            return Err(Error::NonFinite {
                epoch: self.epoch,
                step: self.step,
                snapshot: format!("{:?}; finite gradients: {grads_finite}; anchors {anchors:?}", obj.losses),
            });
        }
        let lr = self.config.lr_at(self.epoch);
        let mut scale = 1.0;
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let mu = self.config.momentum;
        for ((_, p), ((_, v), (_, gr))) in self.params.iter_mut().zip(self.velocity.iter_mut().zip(grads.iter())) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                *vv = mu * *vv + if scale == 1.0 { gv } else { gv * scale };
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        Ok(StepReport {
            losses: obj.losses,
            correct: obj.correct,
            batch_size: batch.len(),
            diagnostics: obj.diagnostics,
        })
    }

    /// Shuffled batches of one epoch with their positives.
    pub fn epoch_batches(&mut self, data: &Dataset) -> Result<Vec<Vec<BatchItem>>> {
        if data.is_empty() {
            return Err(Error::contract("cannot train on an empty dataset"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let groups = data.indices_by_class();
        let with_heads = self.config.heads.is_some();
        Ok(order
            .chunks(self.config.batch_size)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&anchor| BatchItem {
                        anchor,
                        positives: if with_heads {
                            sample_positives(
                                &groups,
                                data.samples[anchor].label,
                                anchor,
                                self.config.positives,
                                &mut self.positive_rng,
                            )
                        } else {
                            Vec::new()
                        },
                    })
                    .collect()
            })
            .collect())
    }

    /// One pass over `train`; validation metrics are filled in when `val` is given.
    pub fn run_epoch(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<EpochMetrics> {
        let batches = self.epoch_batches(train)?;
        let mut sum = LossBundle {
            alpha: self.config.alpha,
            beta: self.config.beta,
            ..Default::default()
        };
        let mut correct = 0;
        let mut seen = 0;
        let mut diagnostics = SclDiagnostics::default();
        for batch in &batches {
            let r = self.train_step(train, batch)?;
            accumulate(&mut sum, &r.losses);
            correct += r.correct;
            seen += r.batch_size;
            diagnostics.add(&r.diagnostics);
        }
        let steps = batches.len() as f64;
        let losses = scale_bundle(&sum, 1.0 / steps);
        self.epoch += 1;

        let (val_accuracy, mask_iou) = match val {
            Some(v) => {
                let m = eval::evaluate_params(&self.config, &self.params, v, EvalMode::Accuracy)?;
                let iou = match (self.config.heads.is_some(), v.has_masks()) {
                    (true, true) => eval::evaluate_params(&self.config, &self.params, v, EvalMode::MaskIou)?.mask_iou,
                    _ => None,
                };
                (m.accuracy, iou)
            }
            None => (None, None),
        };
        Ok(EpochMetrics {
            epoch: self.epoch,
            losses,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy,
            mask_iou,
            diagnostics,
        })
    }

    /// Trains for the configured number of epochs. With `out` set, writes a
    /// checkpoint per epoch plus `final.lioc`, and appends to `metrics.csv`
    /// and `scl_diagnostics.csv`.
    pub fn fit(&mut self, train: &Dataset, val: Option<&Dataset>, out: Option<&Path>) -> Result<Vec<EpochMetrics>> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(train, val)?;
            info!(
                "epoch {} total {:.4} cls {:.4} oel {:.4} scl {:.4} train-acc {:.3} val-acc {} mask-iou {}",
                m.epoch,
                m.losses.total,
                m.losses.cls,
                m.losses.oel,
                m.losses.scl,
                m.train_accuracy,
                fmt_opt(m.val_accuracy),
                fmt_opt(m.mask_iou)
            );
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join(format!("epoch-{:03}.lioc", m.epoch)))?;
                append_metrics(&dir.join("metrics.csv"), &m)?;
                append_diagnostics(&dir.join("scl_diagnostics.csv"), &m)?;
            }
            history.push(m);
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("final.lioc"))?;
        }
        Ok(history)
    }
}

fn accumulate(sum: &mut LossBundle, l: &LossBundle) {
    sum.cls += l.cls;
    sum.oel += l.oel;
    sum.dis += l.dis;
    sum.angle += l.angle;
    sum.scl += l.scl;
    sum.total += l.total;
    if sum.per_stage.is_empty() {
        sum.per_stage = l.per_stage.iter().map(|s| StageLosses { side: s.side, ..Default::default() }).collect();
    }
    for (a, s) in sum.per_stage.iter_mut().zip(&l.per_stage) {
        a.oel += s.oel;
        a.dis += s.dis;
        a.angle += s.angle;
    }
}

fn scale_bundle(l: &LossBundle, k: f64) -> LossBundle {
    LossBundle {
        cls: l.cls * k,
        oel: l.oel * k,
        dis: l.dis * k,
        angle: l.angle * k,
        scl: l.scl * k,
        total: l.total * k,
        alpha: l.alpha,
        beta: l.beta,
        per_stage: l
            .per_stage
            .iter()
            .map(|s| StageLosses {
                side: s.side,
                oel: s.oel * k,
                dis: s.dis * k,
                angle: s.angle * k,
            })
            .collect(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

/// Opens `path` for appending, writing `header` first when the file is new.
fn csv_appender(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    Ok(w)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn metrics_row(m: &EpochMetrics) -> Vec<String> {
    let l = &m.losses;
    vec![
        m.epoch.to_string(),
        l.cls.to_string(),
        l.oel.to_string(),
        l.dis.to_string(),
        l.angle.to_string(),
        l.scl.to_string(),
        l.total.to_string(),
        m.train_accuracy.to_string(),
        m.val_accuracy.map_or_else(String::new, |v| v.to_string()),
        m.mask_iou.map_or_else(String::new, |v| v.to_string()),
    ]
}

pub fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut w = csv_appender(path, &METRICS_HEADER)?;
    w.write_record(metrics_row(m)).map_err(|e| csv_err(path, e))?;
    w.flush()?;
    Ok(())
}

fn append_diagnostics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let d = &m.diagnostics;
    let mut w = csv_appender(path, &DIAGNOSTICS_HEADER)?;
    w.write_record([
        m.epoch.to_string(),
        d.cells.to_string(),
        d.gap_out_of_range.to_string(),
        d.theta_out_of_range.to_string(),
        d.degenerate_images.to_string(),
    ])
    .map_err(|e| csv_err(path, e))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
