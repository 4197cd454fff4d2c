//! One randomized gradient check per differentiable op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check, GradCheck};
use crate::error::{Result, TensorError};
use crate::ops::Conv2dSpec;
use crate::tensor::Tensor;

/// A named op whose `trial` draws fresh random inputs and runs [`check`] on
/// a random projection of the op's output.
pub struct OpCase<E> {
    pub name: &'static str,
    pub trial: fn(&mut ChaCha8Rng) -> std::result::Result<GradCheck, E>,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub error: Option<String>,
}

/// Run `trials` trials of `case`, keeping the worst relative error.
pub fn run_case<E: std::fmt::Display>(case: &OpCase<E>, trials: usize, rng: &mut ChaCha8Rng) -> CaseResult {
    let mut out = CaseResult { name: case.name, trials, max_rel_err: 0.0, error: None };
    for _ in 0..trials {
        match (case.trial)(rng) {
            Ok(r) => out.max_rel_err = out.max_rel_err.max(r.max_rel_err),
            Err(e) => {
                out.error = Some(e.to_string());
                break;
            }
        }
    }
    out
}

pub const STEP: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Inputs in [-2, 2].
fn x(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -2.0, 2.0)
}

/// Inputs in [-2, 2] with magnitude at least `gap`, for ops with a kink or pole at 0.
fn away(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("valid shape")
}

/// `Σ f(x) ⊙ r` for a fixed random `r`, so every output entry is weighted.
fn project(out: Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    out.mul(r)?.sum_all()
}

fn weights_for(rng: &mut ChaCha8Rng, probe: Result<Tensor<f64>>) -> Result<Tensor<f64>> {
    let shape = probe?.shape().to_vec();
    Ok(x(rng, &shape))
}

macro_rules! unary {
    ($name:literal, $gen:expr, |$t:ident| $body:expr) => {
        OpCase {
            name: $name,
            trial: |rng| {
                let input: Tensor<f64> = $gen(rng);
                let f = |$t: &Tensor<f64>| -> Result<Tensor<f64>> { $body };
                let r = weights_for(rng, f(&input))?;
                check(&[input], STEP, |v: &[Tensor<f64>]| project(f(&v[0])?, &r))
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $ga:expr, $gb:expr, |$a:ident, $b:ident| $body:expr) => {
        OpCase {
            name: $name,
            trial: |rng| {
                let ia: Tensor<f64> = $ga(rng);
                let ib: Tensor<f64> = $gb(rng);
                let f = |$a: &Tensor<f64>, $b: &Tensor<f64>| -> Result<Tensor<f64>> { $body };
                let r = weights_for(rng, f(&ia, &ib))?;
                check(&[ia, ib], STEP, |v: &[Tensor<f64>]| project(f(&v[0], &v[1])?, &r))
            },
        }
    };
}

fn keep_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
    // one row fully masked, one fully kept
    keep[..cols].iter_mut().for_each(|k| *k = false);
    keep[cols..2 * cols].iter_mut().for_each(|k| *k = true);
    keep
}

/// Every differentiable op of the crate.
pub fn op_cases() -> Vec<OpCase<TensorError>> {
    vec![
        binary!("add", |r| x(r, &[3, 4]), |r| x(r, &[3, 4]), |a, b| a.add(b)),
        binary!("add_suffix", |r| x(r, &[2, 3, 4]), |r| x(r, &[4]), |a, b| a.add(b)),
        binary!("add_scalar_operand", |r| x(r, &[3]), |r| x(r, &[]), |a, b| b.add(a)),
        binary!("sub", |r| x(r, &[3, 4]), |r| x(r, &[3, 4]), |a, b| a.sub(b)),
        binary!("sub_suffix", |r| x(r, &[2, 3, 4]), |r| x(r, &[3, 4]), |a, b| a.sub(b)),
        binary!("mul", |r| x(r, &[3, 4]), |r| x(r, &[3, 4]), |a, b| a.mul(b)),
        binary!("mul_suffix", |r| x(r, &[2, 3]), |r| x(r, &[3]), |a, b| a.mul(b)),
        binary!("mul_scalar_operand", |r| x(r, &[2, 3]), |r| x(r, &[]), |a, b| a.mul(b)),
        binary!("div", |r| x(r, &[3, 4]), |r| away(r, &[3, 4], 0.5), |a, b| a.div(b)),
        binary!("div_suffix", |r| x(r, &[2, 3]), |r| away(r, &[3], 0.5), |a, b| a.div(b)),
        unary!("neg", |r| x(r, &[5]), |t| t.neg()),
        unary!("scale", |r| x(r, &[5]), |t| t.scale(-1.7)),
        unary!("add_scalar", |r| x(r, &[5]), |t| t.add_scalar(0.3)),
        unary!("square", |r| x(r, &[5]), |t| t.square()),
        unary!("exp", |r| x(r, &[5]), |t| t.exp()),
        unary!("log", |r| uniform(r, &[5], 0.1, 2.0), |t| t.log()),
        unary!("sqrt", |r| uniform(r, &[5], 0.1, 2.0), |t| t.sqrt()),
        unary!("sin", |r| x(r, &[5]), |t| t.sin()),
        unary!("cos", |r| x(r, &[5]), |t| t.cos()),
        unary!("tanh", |r| x(r, &[5]), |t| t.tanh()),
        unary!("sigmoid", |r| x(r, &[5]), |t| t.sigmoid()),
        unary!("softplus", |r| x(r, &[5]), |t| t.softplus()),
        unary!("relu", |r| away(r, &[6], 0.01), |t| t.relu()),
        binary!("matmul", |r| x(r, &[3, 4]), |r| x(r, &[4, 2]), |a, b| a.matmul(b)),
        binary!("matmul_leading_axes", |r| x(r, &[2, 3, 4]), |r| x(r, &[4, 2]), |a, b| a.matmul(b)),
        binary!("bmm", |r| x(r, &[2, 3, 4]), |r| x(r, &[2, 4, 3]), |a, b| a.bmm(b, false)),
        binary!("bmm_transposed", |r| x(r, &[2, 3, 4]), |r| x(r, &[2, 5, 4]), |a, b| a.bmm(b, true)),
        OpCase {
            name: "conv2d",
            trial: |rng| {
                let stride = rng.gen_range(1..=2);
                let (xi, w, b) = (x(rng, &[2, 2, 5, 5]), x(rng, &[3, 2, 3, 3]), x(rng, &[3]));
                let spec = Conv2dSpec { stride, padding: 1 };
                let r = weights_for(rng, xi.conv2d(&w, &b, spec))?;
                check(&[xi, w, b], STEP, |v: &[Tensor<f64>]| project(v[0].conv2d(&v[1], &v[2], spec)?, &r))
            },
        },
        unary!("sum_axis", |r| x(r, &[3, 4]), |t| t.sum_axis(1)),
        unary!("mean_axis", |r| x(r, &[3, 4]), |t| t.mean_axis(0)),
        unary!("std_axis", |r| x(r, &[3, 4]), |t| t.std_axis(1)),
        unary!("sum_all", |r| x(r, &[3, 4]), |t| t.sum_all()),
        unary!("mean_all", |r| x(r, &[3, 4]), |t| t.mean_all()),
        unary!("softmax", |r| x(r, &[3, 4]), |t| t.softmax(1)),
        unary!("softmax_leading_axis", |r| x(r, &[3, 4]), |t| t.softmax(0)),
        OpCase {
            name: "masked_softmax",
            trial: |rng| {
                let input = x(rng, &[4, 5]);
                let keep = keep_mask(rng, 4, 5);
                let r = weights_for(rng, input.masked_softmax(&keep))?;
                check(&[input], STEP, |v: &[Tensor<f64>]| project(v[0].masked_softmax(&keep)?, &r))
            },
        },
        unary!("layer_norm", |r| x(r, &[3, 5]), |t| t.layer_norm(1e-5)),
        unary!("reshape", |r| x(r, &[2, 6]), |t| t.reshape(&[3, 4])),
        unary!("permute", |r| x(r, &[2, 3, 4]), |t| t.permute(&[2, 0, 1])),
        unary!("broadcast_to", |r| x(r, &[3, 1]), |t| t.broadcast_to(&[2, 3, 4])),
        binary!("concat", |r| x(r, &[2, 3]), |r| x(r, &[2, 2]), |a, b| Tensor::concat(&[a, b], 1)),
        unary!("slice", |r| x(r, &[3, 4]), |t| t.slice(1, 1, 2)),
        unary!("gather", |r| x(r, &[4, 3]), |t| t.gather(0, &[2, 0, 2, 1, 3])),
    ]
}
