//! Emission-absorption compositing.
//!
//! For opacities `σ_j` at equally spaced samples with spacing `Δ`, the
//! transmittance before sample `j` is `T_j = exp(-Δ Σ_{k<j} σ_k)`, the weight
//! is `w_j = T_j (1 - exp(-σ_j Δ))`, and whatever is left after the last
//! sample is the residual transmittance. Weights plus residual sum to one.

use trackerf_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::RaySamples;

/// Weights and residual transmittance for one ray of opacities.
pub fn ea_weights_slice(sigmas: &[f64], delta: f64) -> Result<(Vec<f64>, f64)> {
    if !(delta > 0.0) {
        return Err(CoreError::InvalidArgument(format!("sample spacing must be positive, got {delta}")));
    }
    let mut w = Vec::with_capacity(sigmas.len());
    let mut trans = 1.0f64;
    for &s in sigmas {
        if s < 0.0 || s.is_nan() {
            return Err(CoreError::InvalidArgument(format!("negative opacity {s}")));
        }
        w.push(trans * -(-s * delta).exp_m1());
        trans *= (-s * delta).exp();
    }
    Ok((w, trans))
}

/// Batched weights for `[R, S]` opacities: returns `([R, S] weights, [R] residual)`,
/// both differentiable in the opacities.
pub fn ea_weights<T: Real>(sigmas: &Tensor<T>, delta: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    if sigmas.rank() != 2 {
        return Err(CoreError::DimensionMismatch(format!("opacities must be [R,S], got {:?}", sigmas.shape())));
    }
    if !(delta > 0.0) {
        return Err(CoreError::InvalidArgument(format!("sample spacing must be positive, got {delta}")));
    }
    let (r, s) = (sigmas.shape()[0], sigmas.shape()[1]);
    let sig = sigmas.data();
    if let Some(bad) = sig.iter().find(|v| **v < T::zero() || v.is_nan()) {
        return Err(CoreError::InvalidArgument(format!("negative opacity {}", bad.as_f64())));
    }
    let row = s + 1;
    let mut out = vec![T::zero(); r * row];
    // transmittance at each sample plus the residual, kept for backward
    let mut trans = vec![0.0f64; r * row];
    for i in 0..r {
        let mut t = 1.0f64;
        for j in 0..s {
            let sd = sig[i * s + j].as_f64() * delta;
            trans[i * row + j] = t;
            out[i * row + j] = T::of(t * -(-sd).exp_m1());
            t *= (-sd).exp();
        }
        trans[i * row + s] = t;
        out[i * row + s] = T::of(t);
    }
    let packed = Tensor::from_op("ea_weights", &[sigmas], vec![r, row], out, move |g, needs| {
        vec![needs[0].then(|| {
            let mut gs = vec![T::zero(); r * s];
            for i in 0..r {
                let gr = &g[i * row..(i + 1) * row];
                let tr = &trans[i * row..(i + 1) * row];
                // Output j is T_j - T_{j+1} (and T_S for the residual), so the
                // loss is Σ c_j T_j with c_0 = g_0, c_j = g_j - g_{j-1}.
                let mut suffix = 0.0f64;
                for j in (0..s).rev() {
                    let c = gr[j + 1].as_f64() - gr[j].as_f64();
                    suffix += c * tr[j + 1];
                    gs[i * s + j] = T::of(-delta * suffix);
                }
            }
            gs
        })]
    })?;
    let weights = packed.slice(1, 0, s)?;
    let residual = packed.slice(1, s, 1)?.reshape(&[r])?;
    Ok((weights, residual))
}

/// `Σ_j w_j v_j` per ray: `[R, S]` weights with `[R, S, C]` values gives `[R, C]`.
pub fn composite<T: Real>(weights: &Tensor<T>, values: &Tensor<T>) -> Result<Tensor<T>> {
    let ok = weights.rank() == 2 && values.rank() == 3 && values.shape()[..2] == *weights.shape();
    if !ok {
        return Err(CoreError::DimensionMismatch(format!(
            "composite weights {:?} vs values {:?}",
            weights.shape(),
            values.shape()
        )));
    }
    let (r, s, c) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let (w, v) = (weights.data(), values.data());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..s {
            let wj = w[i * s + j];
            let base = (i * s + j) * c;
            for k in 0..c {
                out[i * c + k] += wj * v[base + k];
            }
        }
    }
    let (wa, va) = (weights.detach(), values.detach());
    Ok(Tensor::from_op("composite", &[weights, values], vec![r, c], out, move |g, needs| {
        let (w, v) = (wa.data(), va.data());
        let gw = needs[0].then(|| {
            let mut gw = vec![T::zero(); r * s];
            for i in 0..r {
                for j in 0..s {
                    let base = (i * s + j) * c;
                    gw[i * s + j] = (0..c).map(|k| g[i * c + k] * v[base + k]).sum();
                }
            }
            gw
        });
        let gv = needs[1].then(|| {
            let mut gv = vec![T::zero(); r * s * c];
            for i in 0..r {
                for j in 0..s {
                    let base = (i * s + j) * c;
                    for k in 0..c {
                        gv[base + k] = w[i * s + j] * g[i * c + k];
                    }
                }
            }
            gv
        });
        vec![gw, gv]
    })?)
}

/// Per-point outputs of a radiance field for a batch of rays.
#[derive(Clone, Debug)]
pub struct PointPredictions<T: Real> {
    /// `[R, S, 3]` in `[0, 1]`.
    pub color: Tensor<T>,
    /// `[R, S]`, non-negative.
    pub sigma: Tensor<T>,
    /// `[R, S, D_cse]` when the field predicts embeddings.
    pub cse: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T: Real> {
    /// `[R, 3]`, composited on black.
    pub color: Tensor<T>,
    /// `[R]`, the sum of the weights.
    pub mask: Tensor<T>,
    pub cse: Option<Tensor<T>>,
    /// `[R, S]`
    pub weights: Tensor<T>,
    /// `[R]`
    pub residual: Tensor<T>,
    /// Expected depth `Σ w d / Σ w` per ray (0 where nothing is hit).
    pub depth: Vec<f64>,
}

/// Composite already-evaluated predictions over rays sharing one spacing.
pub fn composite_predictions<T: Real>(pred: &PointPredictions<T>, samples: &[RaySamples]) -> Result<RenderOutput<T>> {
    let r = samples.len();
    if pred.sigma.shape() != [r, samples.first().map_or(0, |s| s.depths.len())] {
        return Err(CoreError::DimensionMismatch(format!(
            "field returned opacities {:?} for {r} rays",
            pred.sigma.shape()
        )));
    }
    let delta = samples[0].spacing;
    if samples.iter().any(|s| (s.spacing - delta).abs() > 1e-12 * delta.abs().max(1.0)) {
        return Err(CoreError::InvalidArgument("rays in one batch must share their spacing".into()));
    }
    let (weights, residual) = ea_weights(&pred.sigma, delta)?;
    let color = composite(&weights, &pred.color)?;
    let cse = pred.cse.as_ref().map(|c| composite(&weights, c)).transpose()?;
    let mask = weights.sum_axis(1)?;
    let s = samples[0].depths.len();
    let w = weights.data();
    let depth = samples
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            let ws = &w[i * s..(i + 1) * s];
            let total: f64 = ws.iter().map(|v| v.as_f64()).sum();
            if total <= 0.0 {
                0.0
            } else {
                ws.iter().zip(&rs.depths).map(|(a, d)| a.as_f64() * d).sum::<f64>() / total
            }
        })
        .collect();
    Ok(RenderOutput { color, mask, cse, weights, residual, depth })
}

/// Evaluate `field` on the samples of every ray and composite the result.
pub fn render_rays<T, F>(field: F, samples: &[RaySamples]) -> Result<RenderOutput<T>>
where
    T: Real,
    F: FnOnce(&[RaySamples]) -> Result<PointPredictions<T>>,
{
    if samples.is_empty() {
        return Err(CoreError::InvalidArgument("no rays to render".into()));
    }
    let pred = field(samples)?;
    composite_predictions(&pred, samples)
}
