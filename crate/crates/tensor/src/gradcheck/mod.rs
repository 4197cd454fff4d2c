//! Central finite-difference oracle for gradient tests.

use crate::error::TensorError;
use crate::tape::Tape;
use crate::tensor::Tensor;

mod cases;
pub use cases::{op_cases, run_case, CaseResult, OpCase};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with a small absolute floor so near-zero entries compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare tape gradients of the scalar `f(inputs)` with central differences
/// of step `h` for every entry of every input.
pub fn check<F, E>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&leaves)?;
    let grads = loss.backward()?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        for e in 0..inputs[k].numel() {
            let eval = |delta: f64| -> Result<f64, E> {
                let mut moved: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
                let mut v = inputs[k].to_vec();
                v[e] += delta;
                moved[k] = Tensor::new(inputs[k].shape().to_vec(), v)?;
                Ok(f(&moved)?.item())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic.data()[e];
            let r = rel_err(a, numeric);
            report.checked += 1;
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = Some((k, e, a, numeric));
            }
        }
    }
    Ok(report)
}
