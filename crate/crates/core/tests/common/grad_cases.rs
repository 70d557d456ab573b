//! Finite-difference cases for every differentiable op on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scai::autodiff::{Graph, ParamId, Var};
use scai::gradcheck::{grad_check, rel_error, GradCheckReport, FD_STEP};
use scai::pa::{self, BlockParams, Halting, HaltingParams, UnitParams};
use scai::tensor::{conv_out_width, Tensor};
use scai::train::{task_loss, total_loss, LossSpec, TeacherMode};
use scai::{Result, ScaiConfig, ScaiModel};

pub const REL_TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(salt))
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn mask(r: &mut ChaCha8Rng, width: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..width).map(|_| r.random_bool(0.6)).collect();
    m[r.random_range(0..width)] = true;
    m
}

/// Reduces any tensor to a scalar with fixed random weights.
fn project(g: &mut Graph<'_>, v: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let b = g.constant(Tensor::zeros(vec![1]));
    g.linear(v, w, b)
}

fn weights_for(r: &mut ChaCha8Rng, numel: usize) -> Tensor {
    uniform(r, &[1, numel], -1.0, 1.0)
}

type Case = fn(u64) -> Result<GradCheckReport>;

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv1d", conv_same),
        ("conv1d_strided", conv_strided),
        ("conv1d_pointwise", conv_pointwise),
        ("conv1d_masked", conv_masked),
        ("conv1d_no_bias", conv_no_bias),
        ("linear", linear),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("global_avg_pool", pool),
        ("softmax", softmax),
        ("softmax_cross_entropy", softmax_ce),
        ("kl_div_student", kl_student),
        ("masked_add", masked_add),
        ("add_scalar", add_scalar),
        ("add_scale_sum", add_scale_sum),
        ("halt_weights", halt_weights),
        ("weighted_sum", weighted_sum),
        ("ponder_mean", ponder_mean),
        ("residual_unit_masked", residual_masked),
        ("halting_score", halting_score),
        ("pa_block", pa_block),
        ("model_total_loss", model_total_loss),
    ]
}

fn conv_case(seed: u64, c_in: usize, c_out: usize, k: usize, w: usize, stride: usize, pad: usize, with_mask: bool, bias: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed, 1);
    let x = uniform(&mut r, &[c_in, w], -1.0, 1.0);
    let kw = uniform(&mut r, &[c_out, c_in, k], -1.0, 1.0);
    let b = uniform(&mut r, &[c_out], -0.5, 0.5);
    let w_out = conv_out_width(w, k, stride, pad);
    let m = with_mask.then(|| mask(&mut r, w_out));
    let proj = weights_for(&mut r, c_out * w_out);
    let mut inputs = vec![x, kw];
    if bias {
        inputs.push(b);
    }
    grad_check(
        |g, v| {
            let out = g.conv1d(v[0], v[1], v.get(2).copied(), stride, pad, m.as_deref())?;
            project(g, out, &proj)
        },
        &inputs,
    )
}

fn conv_same(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 3, 4, 3, 11, 1, 1, false, true)
}

fn conv_strided(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 2, 3, 3, 13, 2, 1, false, true)
}

fn conv_pointwise(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 2, 3, 1, 9, 2, 0, false, true)
}

fn conv_masked(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 3, 3, 3, 10, 1, 1, true, true)
}

fn conv_no_bias(seed: u64) -> Result<GradCheckReport> {
    conv_case(seed, 2, 1, 3, 8, 1, 1, false, false)
}

fn linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 2);
    let inputs = [
        uniform(&mut r, &[5], -1.0, 1.0),
        uniform(&mut r, &[3, 5], -1.0, 1.0),
        uniform(&mut r, &[3], -1.0, 1.0),
    ];
    let proj = weights_for(&mut r, 3);
    grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, &proj)
        },
        &inputs,
    )
}

fn relu(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 3);
    let x = off_zero(&mut r, &[2, 7]);
    let proj = weights_for(&mut r, 14);
    grad_check(
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, &proj)
        },
        &[x],
    )
}

fn sigmoid(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 4);
    let x = uniform(&mut r, &[9], -4.0, 4.0);
    let proj = weights_for(&mut r, 9);
    grad_check(
        |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, &proj)
        },
        &[x],
    )
}

fn pool(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 5);
    let x = uniform(&mut r, &[3, 8], -1.0, 1.0);
    let proj = weights_for(&mut r, 3);
    grad_check(
        |g, v| {
            let y = g.global_avg_pool(v[0]);
            project(g, y, &proj)
        },
        &[x],
    )
}

fn softmax(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 6);
    let x = uniform(&mut r, &[6], -3.0, 3.0);
    let proj = weights_for(&mut r, 6);
    grad_check(
        |g, v| {
            let y = g.softmax(v[0]);
            project(g, y, &proj)
        },
        &[x],
    )
}

fn softmax_ce(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 7);
    let x = uniform(&mut r, &[12], -3.0, 3.0);
    let label = r.random_range(0..12);
    grad_check(
        |g, v| {
            let p = g.softmax(v[0]);
            g.cross_entropy(p, label)
        },
        &[x],
    )
}

fn kl_student(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 8);
    let teacher_logits = uniform(&mut r, &[7], -3.0, 3.0);
    let student_logits = uniform(&mut r, &[7], -3.0, 3.0);
    grad_check(
        |g, v| {
            let tl = g.constant(teacher_logits.clone());
            let t = g.softmax(tl);
            let s = g.softmax(v[0]);
            g.kl_div(t, s)
        },
        &[student_logits],
    )
}

fn masked_add(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 9);
    let base = uniform(&mut r, &[2, 9], -1.0, 1.0);
    let delta = uniform(&mut r, &[2, 9], -1.0, 1.0);
    let m = mask(&mut r, 9);
    let proj = weights_for(&mut r, 18);
    grad_check(
        |g, v| {
            let y = g.masked_add(v[0], v[1], &m)?;
            project(g, y, &proj)
        },
        &[base, delta],
    )
}

fn add_scalar(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 10);
    let row = uniform(&mut r, &[7], -1.0, 1.0);
    let s = uniform(&mut r, &[1], -1.0, 1.0);
    let proj = weights_for(&mut r, 7);
    grad_check(
        |g, v| {
            let y = g.add_scalar(v[0], v[1])?;
            project(g, y, &proj)
        },
        &[row, s],
    )
}

fn add_scale_sum(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 11);
    let a = uniform(&mut r, &[2, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 4], -1.0, 1.0);
    let k: f64 = r.random_range(-2.0..2.0);
    let proj = weights_for(&mut r, 8);
    grad_check(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let t = g.scale(s, k);
            let p1 = project(g, t, &proj)?;
            let p2 = project(g, v[0], &proj)?;
            Ok(g.sum(&[p1, p2]))
        },
        &[a, b],
    )
}

fn halt_weights(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 12);
    let (units, width) = (4, 6);
    let logits: Vec<Tensor> = (0..units - 1).map(|_| uniform(&mut r, &[width], -2.0, 2.0)).collect();
    let n: Vec<usize> = (0..width).map(|_| r.random_range(1..=units)).collect();
    let proj = weights_for(&mut r, units * width);
    grad_check(
        |g, v| {
            let hs: Vec<Var> = v.iter().map(|&x| g.sigmoid(x)).collect();
            let p = g.halt_weights(&hs, &n, units)?;
            project(g, p, &proj)
        },
        &logits,
    )
}

fn weighted_sum(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 13);
    let (units, c, width) = (3, 2, 5);
    let mut inputs: Vec<Tensor> = (0..units).map(|_| uniform(&mut r, &[c, width], -1.0, 1.0)).collect();
    inputs.push(uniform(&mut r, &[units, width], 0.0, 1.0));
    let proj = weights_for(&mut r, c * width);
    grad_check(
        |g, v| {
            let y = g.weighted_sum(&v[..units], v[units])?;
            project(g, y, &proj)
        },
        &inputs,
    )
}

fn ponder_mean(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 14);
    let (units, width) = (4, 7);
    let p = uniform(&mut r, &[units, width], 0.0, 1.0);
    let n: Vec<usize> = (0..width).map(|_| r.random_range(1..=units)).collect();
    grad_check(|g, v| Ok(g.ponder_mean(v[0], &n)), &[p])
}

fn unit_inputs(r: &mut ChaCha8Rng, c: usize) -> [Tensor; 2] {
    [uniform(r, &[c, c, 3], -0.5, 0.5), uniform(r, &[c], -0.2, 0.2)]
}

fn residual_masked(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 15);
    let (c, width) = (3, 9);
    let x = off_zero(&mut r, &[c, width]);
    let [w, b] = unit_inputs(&mut r, c);
    let m = mask(&mut r, width);
    let proj = weights_for(&mut r, c * width);
    let unit = UnitParams {
        conv_w: ParamId(1),
        conv_b: ParamId(2),
    };
    grad_check(
        |g, v| {
            let y = pa::residual_unit(g, v[0], &unit, Some(&m))?;
            project(g, y, &proj)
        },
        &[x, w, b],
    )
}

fn halting_score(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 16);
    let (c, width) = (3, 8);
    let inputs = [
        uniform(&mut r, &[c, width], -1.0, 1.0),
        uniform(&mut r, &[1, c, 3], -1.0, 1.0),
        uniform(&mut r, &[1, c], -1.0, 1.0),
        uniform(&mut r, &[1], -1.0, 1.0),
    ];
    let m = mask(&mut r, width);
    let params = HaltingParams {
        conv_w: ParamId(1),
        global_w: ParamId(2),
        bias: ParamId(3),
    };
    let proj = weights_for(&mut r, width);
    grad_check(
        |g, v| {
            let h = pa::halting_score(g, v[0], &params, Some(&m))?;
            project(g, h, &proj)
        },
        &inputs,
    )
}

/// Adaptive block with every weight, score parameter and the input on the
/// checked side. Halting biases are spread so positions stop at different units.
fn pa_block(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 17);
    let (c, width, units) = (2, 8, 3);
    let mut inputs = vec![uniform(&mut r, &[c, width], -1.0, 1.0)];
    let mut block = BlockParams {
        units: Vec::new(),
        halting: Vec::new(),
    };
    for s in 0..units {
        let [w, b] = unit_inputs(&mut r, c);
        block.units.push(UnitParams {
            conv_w: ParamId(inputs.len()),
            conv_b: ParamId(inputs.len() + 1),
        });
        inputs.push(w);
        inputs.push(b);
        if s + 1 < units {
            block.halting.push(HaltingParams {
                conv_w: ParamId(inputs.len()),
                global_w: ParamId(inputs.len() + 1),
                bias: ParamId(inputs.len() + 2),
            });
            inputs.push(uniform(&mut r, &[1, c, 3], -1.5, 1.5));
            inputs.push(uniform(&mut r, &[1, c], -1.0, 1.0));
            inputs.push(uniform(&mut r, &[1], -0.5, 0.5));
        }
    }
    let proj = weights_for(&mut r, c * width);
    grad_check(
        |g, v| {
            let fwd = pa::pa_block_forward(g, v[0], &block, Halting::Adaptive { epsilon: 0.02 })?;
            let out = project(g, fwd.output, &proj)?;
            let rho = fwd.ponder.expect("adaptive block has a ponder cost");
            let reg = g.scale(rho, 0.1);
            Ok(g.sum(&[out, reg]))
        },
        &inputs,
    )
}

/// Whole-model training loss on a tiny network, checked element by element
/// against central differences on the model's own parameters. Hard labels at
/// every exit: with distillation the teacher is cut from the tape, which
/// finite differences cannot mimic.
fn model_total_loss(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed, 18);
    let config = ScaiConfig {
        input_width: 12,
        num_classes: 3,
        gamma: 0.05,
        seed,
        halt_bias_init: -0.5,
        ..ScaiConfig::default().with_depth(2, 2, 2)
    };
    let mut model = ScaiModel::build(config)?;
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let curve: Vec<f64> = (0..12).map(|_| r.random_range(0.0..1.0)).collect();
    let label = r.random_range(0..3);
    let spec = LossSpec {
        distill: false,
        teacher: TeacherMode::FinalExit,
        intermediate_hard_labels: false,
        gamma: 0.05,
    };
    let loss = |model: &ScaiModel, grads: bool| -> Result<(f64, Option<scai::autodiff::ParamGrads>)> {
        let mut g = Graph::new(model.params());
        let x = g.constant(model.input_tensor(&curve)?);
        let pass = model.forward_graph(&mut g, x, 2, Some(model.config().halting()))?;
        let task = task_loss(&mut g, &pass.probs, label, &spec)?;
        let total = total_loss(&mut g, task, &pass.ponders, spec.gamma);
        Ok((g.scalar(total), grads.then(|| g.backward(total))))
    };
    let (_, grads) = loss(&model, true)?;
    let grads = grads.expect("requested");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
    };
    for p in 0..model.params().len() {
        for e in 0..model.params().get(ParamId(p)).numel() {
            let orig = model.params().get(ParamId(p)).data()[e];
            model.params_mut().get_mut(ParamId(p)).data_mut()[e] = orig + FD_STEP;
            let (up, _) = loss(&model, false)?;
            model.params_mut().get_mut(ParamId(p)).data_mut()[e] = orig - FD_STEP;
            let (down, _) = loss(&model, false)?;
            model.params_mut().get_mut(ParamId(p)).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(ParamId(p))[e];
            let err = rel_error(analytic, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p, e, analytic, numeric));
            }
        }
    }
    Ok(report)
}
