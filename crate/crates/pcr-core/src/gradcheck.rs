//! Central finite-difference verification of every differentiable operator
//! and of the full micro model.
//!
//! The checks compare analytic gradients against `(f(x+h) - f(x-h)) / 2h`
//! with `h = 1e-5` in 64-bit, using the error measure
//! `|a - n| / max(1, |a|, |n|)`. Shared by the test suite and the
//! `tools gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{multi_task_loss, LossWeights, PcrConfig, PcrModel};
use crate::tensor::{BnMode, ConvSpec, Graph, NodeId, Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_err: f64,
    pub checked: usize,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, max_err: f64, checked: usize) -> Self {
        CheckReport {
            name: name.to_string(),
            max_err,
            checked,
            passed: max_err < TOLERANCE,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Loss value plus, on request, the analytic gradient of the checked input.
type EvalOutcome = Result<(f64, Option<Vec<f64>>)>;

/// Checks one differentiable input of a scalar-valued computation.
///
/// `eval` must rebuild the computation from scratch for the given inputs and
/// return `(loss, analytic gradients of the checked input)` when asked, or
/// just the loss otherwise.
fn check_input(
    name: &str,
    inputs: &[Tensor],
    checked: usize,
    eval: &mut dyn FnMut(&[Tensor], bool) -> EvalOutcome,
) -> Result<CheckReport> {
    let (_, grad) = eval(inputs, true)?;
    let grad = grad.expect("eval must return gradients when asked");
    let mut max_err = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs[checked].len() {
        let orig = inputs[checked].data()[i];
        perturbed[checked].data_mut()[i] = orig + STEP;
        let (plus, _) = eval(&perturbed, false)?;
        perturbed[checked].data_mut()[i] = orig - STEP;
        let (minus, _) = eval(&perturbed, false)?;
        perturbed[checked].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        max_err = max_err.max(rel_err(grad[i], numeric));
    }
    Ok(CheckReport::new(name, max_err, inputs[checked].len()))
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Random values kept away from zero, for kinked activations.
fn random_tensor_off_kink(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Builds a check for an op under a projection loss: the op output is
/// compared against a fixed random target through the weighted MSE, which
/// makes every output position contribute a distinct gradient signal.
fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    checked: usize,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    // Probe once for the output shape to freeze the target.
    let target = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let shape = g.value(out).shape();
        random_tensor(shape, rng)
    };
    let weights = vec![1.0; target.shape().n * target.shape().c];

    let mut eval = |ins: &[Tensor], want_grad: bool| -> EvalOutcome {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        let loss = g.weighted_mse(out, &target, &weights)?;
        let value = g.value(loss).scalar().expect("scalar loss");
        if want_grad {
            g.backward(loss)?;
            Ok((value, Some(g.grad(ids[checked]).expect("leaf gradient").to_vec())))
        } else {
            Ok((value, None))
        }
    };
    check_input(name, &inputs, checked, &mut eval)
}

/// Finite-difference checks for every differentiable operation, each against
/// every differentiable argument.
pub fn check_all_ops(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // conv2d over x, w, b for a few geometries.
    for (tag, spec) in [
        ("k3s1d1p1", ConvSpec::new(3, 4, 3, 1, 1, 1)),
        ("k3s2d2p2", ConvSpec::new(3, 4, 3, 2, 2, 2)),
        ("k1s1d1p0", ConvSpec::new(3, 4, 1, 1, 1, 0)),
    ] {
        let x = random_tensor(Shape::new(2, 3, 6, 5), &mut rng);
        let w = random_tensor(Shape::new(4, 3, spec.kernel_h, spec.kernel_w), &mut rng);
        let b = random_tensor(Shape::new(1, 4, 1, 1), &mut rng);
        for (arg, arg_name) in [(0, "x"), (1, "w"), (2, "b")] {
            reports.push(check_op(
                &format!("conv2d[{tag}]/{arg_name}"),
                vec![x.clone(), w.clone(), b.clone()],
                arg,
                move |g, ids| g.conv2d(ids[0], ids[1], ids[2], &spec),
                &mut rng,
            )?);
        }
    }

    // deconv2d (k4 s2 p1) over x, w, b.
    {
        let spec = ConvSpec::new(3, 2, 4, 2, 1, 1);
        let x = random_tensor(Shape::new(2, 3, 4, 3), &mut rng);
        let w = random_tensor(Shape::new(3, 2, 4, 4), &mut rng);
        let b = random_tensor(Shape::new(1, 2, 1, 1), &mut rng);
        for (arg, arg_name) in [(0, "x"), (1, "w"), (2, "b")] {
            reports.push(check_op(
                &format!("deconv2d[k4s2p1]/{arg_name}"),
                vec![x.clone(), w.clone(), b.clone()],
                arg,
                move |g, ids| g.deconv2d(ids[0], ids[1], ids[2], &spec),
                &mut rng,
            )?);
        }
    }

    // batch_norm (train mode) over x, gamma, beta.
    {
        let x = random_tensor(Shape::new(3, 4, 4, 3), &mut rng);
        let gamma = random_tensor(Shape::new(1, 4, 1, 1), &mut rng);
        let beta = random_tensor(Shape::new(1, 4, 1, 1), &mut rng);
        for (arg, arg_name) in [(0, "x"), (1, "gamma"), (2, "beta")] {
            reports.push(check_op(
                &format!("batch_norm[train]/{arg_name}"),
                vec![x.clone(), gamma.clone(), beta.clone()],
                arg,
                |g, ids| {
                    let mut state = crate::tensor::BatchNormState::new(4);
                    g.batch_norm(ids[0], ids[1], ids[2], &mut state, BnMode::Train)
                },
                &mut rng,
            )?);
        }
    }

    // relu (inputs kept off the kink).
    {
        let x = random_tensor_off_kink(Shape::new(2, 3, 4, 4), &mut rng);
        reports.push(check_op("relu/x", vec![x], 0, |g, ids| Ok(g.relu(ids[0])), &mut rng)?);
    }

    // sigmoid.
    {
        let x = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        reports.push(check_op("sigmoid/x", vec![x], 0, |g, ids| Ok(g.sigmoid(ids[0])), &mut rng)?);
    }

    // global_avg_pool.
    {
        let x = random_tensor(Shape::new(2, 3, 5, 4), &mut rng);
        reports.push(check_op(
            "global_avg_pool/x",
            vec![x],
            0,
            |g, ids| g.global_avg_pool(ids[0]),
            &mut rng,
        )?);
    }

    // channel_scale over both arguments.
    {
        let x = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let s = random_tensor(Shape::new(2, 3, 1, 1), &mut rng);
        for (arg, arg_name) in [(0, "x"), (1, "s")] {
            reports.push(check_op(
                &format!("channel_scale/{arg_name}"),
                vec![x.clone(), s.clone()],
                arg,
                |g, ids| g.channel_scale(ids[0], ids[1]),
                &mut rng,
            )?);
        }
    }

    // concat_channels over each part.
    {
        let a = random_tensor(Shape::new(2, 2, 3, 3), &mut rng);
        let b = random_tensor(Shape::new(2, 3, 3, 3), &mut rng);
        for (arg, arg_name) in [(0, "a"), (1, "b")] {
            reports.push(check_op(
                &format!("concat_channels/{arg_name}"),
                vec![a.clone(), b.clone()],
                arg,
                |g, ids| g.concat_channels(&[ids[0], ids[1]]),
                &mut rng,
            )?);
        }
    }

    // upsample2x_nearest.
    {
        let x = random_tensor(Shape::new(2, 3, 3, 4), &mut rng);
        reports.push(check_op(
            "upsample2x_nearest/x",
            vec![x],
            0,
            |g, ids| Ok(g.upsample2x_nearest(ids[0])),
            &mut rng,
        )?);
    }

    // add over both arguments, and scale.
    {
        let a = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let b = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        for (arg, arg_name) in [(0, "a"), (1, "b")] {
            reports.push(check_op(
                &format!("add/{arg_name}"),
                vec![a.clone(), b.clone()],
                arg,
                |g, ids| g.add(ids[0], ids[1]),
                &mut rng,
            )?);
        }
        let x = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        reports.push(check_op("scale/x", vec![x], 0, |g, ids| Ok(g.scale(ids[0], -1.7)), &mut rng)?);
    }

    // weighted_mse directly (its own gradient path).
    {
        let pred = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let target = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let weights: Vec<f64> = (0..6).map(|i| if i == 2 { 0.0 } else { 0.5 + 0.25 * i as f64 }).collect();
        let mut eval = |ins: &[Tensor], want_grad: bool| -> EvalOutcome {
            let mut g = Graph::new();
            let p = g.leaf(ins[0].clone());
            let loss = g.weighted_mse(p, &target, &weights)?;
            let value = g.value(loss).scalar().expect("scalar");
            if want_grad {
                g.backward(loss)?;
                Ok((value, Some(g.grad(p).expect("grad").to_vec())))
            } else {
                Ok((value, None))
            }
        };
        reports.push(check_input("weighted_mse/pred", &[pred], 0, &mut eval)?);
    }

    // sum.
    {
        let x = random_tensor(Shape::new(1, 2, 3, 3), &mut rng);
        let mut eval = |ins: &[Tensor], want_grad: bool| -> EvalOutcome {
            let mut g = Graph::new();
            let p = g.leaf(ins[0].clone());
            let loss = g.sum(p);
            let value = g.value(loss).scalar().expect("scalar");
            if want_grad {
                g.backward(loss)?;
                Ok((value, Some(g.grad(p).expect("grad").to_vec())))
            } else {
                Ok((value, None))
            }
        };
        reports.push(check_input("sum/x", &[x], 0, &mut eval)?);
    }

    Ok(reports)
}

/// Finite-difference check of every parameter of the full micro model
/// (K=1, L=1, C=8, 64x48 input) under the multi-task loss.
pub fn check_micro_model(seed: u64) -> Result<CheckReport> {
    let config = PcrConfig::micro();
    check_model(config, seed, "micro_model")
}

/// Central differences with a finite step are only trustworthy when no ReLU
/// input sits closer to its kink than the step can reach; draws are retried
/// deterministically until the forward pass clears this margin.
const RELU_MARGIN: f64 = 1.5e-4;
const MAX_DRAWS: u64 = 64;

/// Full-model finite differences for an arbitrary configuration.
pub fn check_model(config: PcrConfig, seed: u64, name: &str) -> Result<CheckReport> {
    let mut model = None;
    let mut images = None;
    let mut target = None;
    for trial in 0..MAX_DRAWS {
        let draw = seed.wrapping_add(trial);
        let mut rng = ChaCha8Rng::seed_from_u64(draw ^ 0x9e3779b97f4a7c15);
        // A healthy init keeps every batch-norm variance, in particular the
        // squeeze branch's over its 1x1 maps, far enough from epsilon that
        // central differences stay in the linear regime.
        let mut m = PcrModel::with_init_std(config.clone(), draw, 0.3)?;
        let im = random_tensor(
            Shape::new(2, config.image_channels, config.input_h, config.input_w),
            &mut rng,
        );
        let tg = random_tensor(
            Shape::new(2, config.joints, config.heatmap_h(), config.heatmap_w()),
            &mut rng,
        );
        let mut probe = Graph::new();
        m.forward(&mut probe, im.clone(), BnMode::Train)?;
        if probe.min_relu_margin() > RELU_MARGIN {
            model = Some(m);
            images = Some(im);
            target = Some(tg);
            break;
        }
    }
    let (mut model, images, target) = match (model, images, target) {
        (Some(m), Some(i), Some(t)) => (m, i, t),
        _ => {
            return Err(crate::error::Error::invalid(
                "gradcheck",
                "no draw cleared the ReLU kink margin",
            ))
        }
    };
    let config = model.config.clone();
    let weights = vec![1.0; 2 * config.joints];
    let loss_weights = LossWeights::unit(config.levels);

    // Gradients of every parameter in one backward pass.
    let mut g = Graph::new();
    let outputs = model.forward(&mut g, images.clone(), BnMode::Train)?;
    let loss_id = multi_task_loss(&mut g, &outputs, &target, &weights, &loss_weights)?;
    g.backward(loss_id)?;
    let param_count = model.store().len();
    let grads: Vec<Vec<f64>> = (0..param_count)
        .map(|i| {
            let id = outputs.bound.node(param_id(i));
            g.grad(id).expect("parameter gradient").to_vec()
        })
        .collect();
    drop(g);

    // Loss as a pure function of the parameters. Train mode reads batch
    // statistics, so mutating the running state between calls cannot change
    // the value.
    let eval_loss = |model: &mut PcrModel| -> Result<f64> {
        let mut g = Graph::new();
        let outputs = model.forward(&mut g, images.clone(), BnMode::Train)?;
        let loss_id = multi_task_loss(&mut g, &outputs, &target, &weights, &loss_weights)?;
        Ok(g.value(loss_id).scalar().expect("scalar"))
    };

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for p in 0..param_count {
        let len = model.store().tensor(param_id(p)).len();
        for i in 0..len {
            let orig = model.store().tensor(param_id(p)).data()[i];
            model.store_mut().tensor_mut(param_id(p)).data_mut()[i] = orig + STEP;
            let plus = eval_loss(&mut model)?;
            model.store_mut().tensor_mut(param_id(p)).data_mut()[i] = orig - STEP;
            let minus = eval_loss(&mut model)?;
            model.store_mut().tensor_mut(param_id(p)).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            max_err = max_err.max(rel_err(grads[p][i], numeric));
            checked += 1;
        }
    }
    Ok(CheckReport::new(name, max_err, checked))
}

// ParamId construction is crate-private; the store hands parameters out in
// registration order, so index `i` is the i-th registered parameter.
fn param_id(index: usize) -> crate::params::ParamId {
    crate::params::ParamId::from_index(index)
}

/// Runs every check; returns the reports and whether all passed.
pub fn run_full_suite(seed: u64) -> Result<(Vec<CheckReport>, bool)> {
    let mut reports = check_all_ops(seed)?;
    reports.push(check_micro_model(seed)?);
    let all_passed = reports.iter().all(|r| r.passed);
    Ok((reports, all_passed))
}
