//! Finite-difference verification of the analytic gradients.
//!
//! Every check draws random instances, differentiates a scalar loss with
//! [`Graph::backward`] and compares against central differences from
//! [`crate::oracle::finite_difference_grad`]. Instances whose base point lies
//! within `kink_threshold` of a non-differentiable point are redrawn.
//!
//! The error of one scalar is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
//! vanishing gradients from turning roundoff into large relative errors.

use crate::backbone::{self, bias_name, weight_name, BackboneConfig};
use crate::dataset::{generate, SyntheticSpec};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadNames};
use crate::oel;
use crate::oracle::finite_difference_grad;
use crate::params::{Bound, Params};
use crate::rng::{derive_seed, Rng};
use crate::scl;
use crate::tensor::{Graph, OpKind, Padding, ReduceKind, Tensor, Var};
use crate::trainer::{self, batch_objective, BatchItem, ObjectiveOptions, TrainConfig};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    pub kink_threshold: f64,
    pub seed: u64,
    /// Corrupt this operation's backward rule (self-test of the checker).
    pub fault: Option<OpKind>,
    /// Skip the primitive-operation checks.
    pub losses_only: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            step: 1e-6,
            tolerance: 1e-4,
            floor: 1e-4,
            kink_threshold: 1e-5,
            seed: 0,
            fault: None,
            losses_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Instances redrawn because they sat too close to a kink.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<24} {:>9} {:>9} {:>14}  result", "check", "instances", "redrawn", "max rel err")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<24} {:>9} {:>9} {:>14.3e}  {}",
                c.name,
                c.instances,
                c.resampled,
                c.max_rel_error,
                if c.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "tolerance {:.0e}: {}", self.tolerance, if self.passed() { "all passed" } else { "FAILED" })
    }
}

/// A differentiable scalar built from bound inputs.
type LossFn<'a> = dyn Fn(&mut Graph, &Bound) -> Result<Var> + 'a;

/// One drawn instance: inputs to differentiate and a loss over them.
struct Instance<'a> {
    inputs: Params,
    loss: Box<LossFn<'a>>,
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Max relative error of one instance, or `None` when it sits on a kink.
fn compare(inst: &Instance<'_>, opts: &GradCheckOptions) -> Result<Option<f64>> {
    let mut g = Graph::new();
    if let Some(kind) = opts.fault {
        g.inject_fault(kind);
    }
    let bound = inst.inputs.bind(&mut g, true);
    let loss = (inst.loss)(&mut g, &bound)?;
    if g.kink_margin() < opts.kink_threshold {
        return Ok(None);
    }
    let grads = g.backward(loss)?;
    let mut failure = None;
    let numeric = finite_difference_grad(
        |p| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            match (inst.loss)(&mut g, &b) {
                Ok(v) => g.value(v).item(),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &inst.inputs,
        opts.step,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut worst: f64 = 0.0;
    for (name, var) in bound.iter() {
        let n = numeric.get(name).expect("same names");
        for (&a, &b) in grads.wrt(var).data().iter().zip(n.data()) {
            worst = worst.max(rel_error(a, b, opts.floor));
        }
    }
    Ok(Some(worst))
}

fn run_check<'a>(
    name: &str,
    opts: &GradCheckOptions,
    rng: &mut Rng,
    mut draw: impl FnMut(&mut Rng) -> Instance<'a>,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut resampled = 0;
    let mut done = 0;
    while done < opts.instances {
        let inst = draw(rng);
        match compare(&inst, opts)? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => {
                resampled += 1;
                if resampled > 50 * opts.instances.max(1) {
                    return Err(Error::contract(format!("{name}: could not draw instances away from kinks")));
                }
            }
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances: done,
        resampled,
        max_rel_error: worst,
        passed: worst <= opts.tolerance,
    })
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).expect("shape")
}

fn inputs(tensors: Vec<Tensor>) -> Params {
    let mut p = Params::new();
    for (i, t) in tensors.into_iter().enumerate() {
        p.insert(format!("x{i}"), t);
    }
    p
}

/// Reduces an op output to a scalar with fixed random weights.
fn readout(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Instance for a primitive: `sum(op(inputs) * R)` with `R` fixed per instance.
fn op_instance<'a>(
    rng: &mut Rng,
    tensors: Vec<Tensor>,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'a,
) -> Instance<'a> {
    let params = inputs(tensors);
    let out_shape = {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let vars: Vec<Var> = b.iter().map(|(_, v)| v).collect();
        let y = op(&mut g, &vars).expect("primitive instance is well-formed");
        g.shape(y).to_vec()
    };
    let r = random(rng, &out_shape, -1.0, 1.0);
    Instance {
        inputs: params,
        loss: Box::new(move |g, b| {
            let vars: Vec<Var> = b.iter().map(|(_, v)| v).collect();
            let y = op(g, &vars)?;
            readout(g, y, &r)
        }),
    }
}

fn primitive_checks(opts: &GradCheckOptions, rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, |$rng:ident| $tensors:expr, $op:expr) => {
            out.push(run_check($name, opts, rng, |$rng| {
                let t = $tensors;
                op_instance($rng, t, $op)
            })?);
        };
    }
    check!("relu", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |g, v| Ok(g.relu(v[0])));
    check!(
        "add",
        |r| vec![random(r, &[2, 3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)],
        |g, v| g.add(v[0], v[1])
    );
    check!(
        "sub",
        |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)],
        |g, v| g.sub(v[0], v[1])
    );
    check!(
        "mul",
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)],
        |g, v| g.mul(v[0], v[1])
    );
    check!("scale", |r| vec![random(r, &[5], -1.0, 1.0)], |g, v| Ok(g.scale(v[0], -1.7)));
    check!("sqrt", |r| vec![random(r, &[4], 0.2, 2.0)], |g, v| g.sqrt(v[0]));
    check!("square", |r| vec![random(r, &[4], -2.0, 2.0)], |g, v| Ok(g.square(v[0])));
    for (stride, padding, label) in [
        (1, Padding::Same, "conv2d/same/1"),
        (2, Padding::Same, "conv2d/same/2"),
        (1, Padding::Valid, "conv2d/valid/1"),
        (2, Padding::Valid, "conv2d/valid/2"),
    ] {
        check!(
            label,
            |r| vec![random(r, &[5, 6, 2], -1.0, 1.0), random(r, &[3, 3, 2, 3], -1.0, 1.0)],
            move |g, v| g.conv2d(v[0], v[1], stride, padding)
        );
    }
    check!(
        "dense",
        |r| vec![random(r, &[4], -1.0, 1.0), random(r, &[4, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)],
        |g, v| g.dense(v[0], v[1], v[2])
    );
    check!(
        "matmul",
        |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
        |g, v| g.matmul(v[0], v[1])
    );
    check!("transpose", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |g, v| g.transpose(v[0]));
    for (kind, label) in [(ReduceKind::Sum, "sum"), (ReduceKind::Mean, "mean"), (ReduceKind::Max, "max")] {
        check!(label, |r| vec![random(r, &[3, 4, 2], -1.0, 1.0)], move |g, v| g.reduce(kind, v[0], &[1]));
    }
    check!("global_avg_pool", |r| vec![random(r, &[3, 3, 4], -1.0, 1.0)], |g, v| g.global_avg_pool(v[0]));
    out.push(run_check("softmax_cross_entropy", opts, rng, |r| {
        let mut target: Vec<f64> = (0..5).map(|_| r.uniform()).collect();
        let s: f64 = target.iter().sum();
        target.iter_mut().for_each(|t| *t /= s);
        let logits = random(r, &[5], -2.0, 2.0);
        Instance {
            inputs: inputs(vec![logits]),
            loss: Box::new(move |g, b| g.softmax_cross_entropy(b.var("x0")?, &target)),
        }
    })?);
    check!(
        "concat",
        |r| vec![random(r, &[3, 2], -1.0, 1.0), random(r, &[3, 4], -1.0, 1.0)],
        |g, v| g.concat(v[0], v[1], 1)
    );
    check!("reshape", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |g, v| g.reshape(v[0], &[2, 6]));
    check!("narrow", |r| vec![random(r, &[3, 5], -1.0, 1.0)], |g, v| g.narrow(v[0], 1, 1, 3));
    check!("select", |r| vec![random(r, &[4, 3], -1.0, 1.0)], |g, v| g.select(v[0], 0, 2));
    check!("broadcast_to", |r| vec![random(r, &[4], -1.0, 1.0)], |g, v| g.broadcast_to(v[0], &[3, 4]));
    Ok(out)
}

/// Toy architecture of the loss-level checks: two classes and a 4x4x8 grid
/// carrying an 8-channel projection.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        backbone: BackboneConfig {
            input_size: 16,
            channels: vec![4, 8],
            stem_stride: 2,
            stage_strides: vec![1, 2],
            num_classes: 2,
            seed: 0,
        },
        heads: Some(HeadConfig {
            stages: vec![4],
            proj_channels: 8,
        }),
        positives: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

const N: usize = 4;
const C: usize = 8;
const C1: usize = 8;

fn head_inputs(rng: &mut Rng, names: &HeadNames) -> Params {
    let mut p = Params::new();
    p.insert("f", random(rng, &[N, N, C], 0.0, 1.0));
    p.insert(weight_name(&names.mask), random(rng, &[1, 1, C, 1], -0.5, 0.5));
    p.insert(bias_name(&names.mask), random(rng, &[1], 0.0, 0.5));
    p.insert(weight_name(&names.proj), random(rng, &[1, 1, C, C1], -0.5, 0.5));
    p.insert(bias_name(&names.proj), random(rng, &[C1], 0.0, 0.5));
    p.insert(weight_name(&names.polar), random(rng, &[2 * C1, 2], -0.5, 0.5));
    p.insert(bias_name(&names.polar), random(rng, &[2], 0.2, 0.6));
    p
}

#[derive(Clone, Copy)]
enum SpatialLoss {
    Distance,
    Angle,
}

fn spatial_instance<'a>(rng: &mut Rng, which: SpatialLoss) -> Instance<'a> {
    let names = HeadNames::new(N);
    let inputs = head_inputs(rng, &names);
    let weights = random(rng, &[N, N], 0.0, 1.0);
    let reference = (rng.below(N), rng.below(N));
    Instance {
        inputs,
        loss: Box::new(move |g, b| {
            let f = b.var("f")?;
            let h = scl::project(g, b, &names, f)?;
            let pred = scl::scl_head(g, b, &names, h, reference)?;
            let truth = scl::ground_truth_polar(N, reference)?;
            let loss = match which {
                SpatialLoss::Distance => scl::distance_loss(g, &pred, &truth, &weights)?,
                SpatialLoss::Angle => scl::angle_loss(g, &pred, &truth, &weights)?.map(|a| a.loss),
            };
            loss.ok_or_else(|| Error::contract("weights have mass"))
        }),
    }
}

fn loss_checks(opts: &GradCheckOptions, rng: &mut Rng) -> Result<Vec<CheckResult>> {
    let cfg = toy_config();
    let bcfg = cfg.seeded_backbone();
    let mut out = Vec::new();

    out.push(run_check("l_cls", opts, rng, |r| {
        let b = BackboneConfig {
            seed: r.next_u64(),
            ..bcfg.clone()
        };
        let mut params = backbone::init_params(&b).expect("toy config is valid");
        jitter_biases(&mut params, r);
        let image = random(r, &[16, 16, 3], 0.0, 1.0);
        let label = r.below(2);
        Instance {
            inputs: params,
            loss: Box::new(move |g, p| {
                let x = g.constant(image.clone());
                let o = backbone::forward(g, &b, p, x, None)?;
                backbone::classification_loss(g, &[o.logits.expect("logits")], &[label])
            }),
        }
    })?);

    out.push(run_check("l_oel", opts, rng, |r| {
        let names = HeadNames::new(N);
        let mut inputs = head_inputs(r, &names);
        inputs.retain(|n| n == "f" || n.contains(".mask."));
        let target = random(r, &[N, N], 0.0, 1.0);
        Instance {
            inputs,
            loss: Box::new(move |g, b| {
                let m = oel::mask_head(g, b, &names, b.var("f")?)?;
                oel::oel_loss(g, m, &target)
            }),
        }
    })?);

    out.push(run_check("l_dis", opts, rng, |r| spatial_instance(r, SpatialLoss::Distance))?);
    out.push(run_check("l_angle", opts, rng, |r| spatial_instance(r, SpatialLoss::Angle))?);

    // region correlation feeds only a stop-gradient target in training, but
    // its backward is still exercised here
    out.push(run_check("region_correlation", opts, rng, |r| {
        let tensors = vec![random(r, &[N, N, C], 0.0, 1.0), random(r, &[N, N, C], 0.0, 1.0)];
        op_instance(r, tensors, |g, v| oel::region_correlation(g, v[0], v[1]))
    })?);

    out.push(composite_check(opts, rng)?);
    Ok(out)
}

fn jitter_biases(params: &mut Params, rng: &mut Rng) {
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.range(-0.05, 0.1));
        }
    }
}

/// Full training objective of a two-image toy batch, stop-gradient
/// quantities frozen at the base point.
fn composite_check(opts: &GradCheckOptions, rng: &mut Rng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut resampled = 0;
    let mut done = 0;
    while done < opts.instances {
        let seed = rng.next_u64();
        let cfg = TrainConfig {
            seed,
            ..toy_config()
        };
        let data = generate(&SyntheticSpec {
            num_classes: 2,
            train_per_class: 3,
            val_per_class: 1,
            image_size: 16,
            clutter_density: 1.0,
            seed,
            ..SyntheticSpec::default()
        })?
        .train;
        let mut params = cfg.init_params()?;
        jitter_biases(&mut params, rng);
        let mut batch_rng = Rng::new(derive_seed(seed, 1));
        let batch: Vec<BatchItem> = trainer::sample_batch_with_positives(&data, cfg.batch_size, cfg.positives, &mut batch_rng)?;

        let base = batch_objective(&cfg, &params, &data, &batch, ObjectiveOptions::default())?;
        let frozen = base.targets;
        let analytic = batch_objective(
            &cfg,
            &params,
            &data,
            &batch,
            ObjectiveOptions {
                frozen: Some(&frozen),
                want_grads: true,
                fault: opts.fault,
            },
        )?;
        if analytic.kink_margin < opts.kink_threshold {
            resampled += 1;
            continue;
        }
        let grads = analytic.grads.expect("requested");
        let numeric = finite_difference_grad(
            |p| {
                batch_objective(
                    &cfg,
                    p,
                    &data,
                    &batch,
                    ObjectiveOptions {
                        frozen: Some(&frozen),
                        ..Default::default()
                    },
                )
                .map_or(f64::NAN, |o| o.losses.total)
            },
            &params,
            opts.step,
        );
        for ((_, a), (_, n)) in grads.iter().zip(numeric.iter()) {
            for (&x, &y) in a.data().iter().zip(n.data()) {
                worst = worst.max(rel_error(x, y, opts.floor));
            }
        }
        done += 1;
    }
    Ok(CheckResult {
        name: "composite".into(),
        instances: done,
        resampled,
        max_rel_error: worst,
        passed: worst <= opts.tolerance,
    })
}

/// Runs the primitive checks (unless disabled) and the loss-level checks.
pub fn run(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = Rng::new(opts.seed);
    let mut checks = Vec::new();
    if !opts.losses_only {
        checks.extend(primitive_checks(opts, &mut rng)?);
    }
    checks.extend(loss_checks(opts, &mut rng)?);
    Ok(GradCheckReport {
        checks,
        tolerance: opts.tolerance,
    })
}
