//! Training objectives.

use std::borrow::Cow;

use trackerf_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::{project_points, Camera};

/// Cut-off of the soft Huber norm.
pub const HUBER_EPS: f64 = 1e-3;
/// Clamp applied to rendered masks inside the cross entropy.
pub const BCE_CLAMP: f64 = 1e-6;
/// Forward-backward consistency threshold in pixels.
pub const FLOW_TAU: f64 = 1.0;

/// `ε (sqrt(1 + |a|²/ε²) - 1)` for a vector with squared norm `norm2`.
pub fn huber_scalar(norm2: f64, eps: f64) -> f64 {
    // written so that small norms do not cancel catastrophically
    let q = norm2 / (eps * eps);
    eps * q / ((1.0 + q).sqrt() + 1.0)
}

/// Soft Huber norm of every row of a `[N, K]` tensor, giving `[N]`.
pub fn huber<T: Real>(a: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(CoreError::InvalidArgument(format!("huber cut-off must be positive, got {eps}")));
    }
    if a.rank() != 2 {
        return Err(CoreError::DimensionMismatch(format!("huber expects [N,K], got {:?}", a.shape())));
    }
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let x = a.data();
    let mut out = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for row in x.chunks(k) {
        let n2: f64 = row.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        out.push(T::of(huber_scalar(n2, eps)));
        scale.push(1.0 / (eps * (1.0 + n2 / (eps * eps)).sqrt()));
    }
    let xa = a.detach();
    Ok(Tensor::from_op("huber", &[a], vec![n], out, move |g, needs| {
        vec![needs[0].then(|| {
            let x = xa.data();
            let mut gx = vec![T::zero(); n * k];
            for i in 0..n {
                let f = g[i].as_f64() * scale[i];
                for j in 0..k {
                    gx[i * k + j] = T::of(f * x[i * k + j].as_f64());
                }
            }
            gx
        })]
    })?)
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::DimensionMismatch(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error between rendered colors `[R, 3]` and the target
/// colors premultiplied by the target mask `[R]`.
pub fn photo_loss<T: Real>(rendered: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("photo_loss", rendered, target)?;
    if mask.shape() != &target.shape()[..1] {
        return Err(CoreError::DimensionMismatch(format!("photo_loss mask {:?} for {:?}", mask.shape(), target.shape())));
    }
    let c = target.shape()[1];
    let premul = Tensor::new(
        target.shape().to_vec(),
        target.data().iter().enumerate().map(|(i, v)| *v * mask.data()[i / c]).collect(),
    )?;
    Ok(rendered.sub(&premul)?.square()?.mean_all()?)
}

/// Mean binary cross entropy of rendered masks against target masks, with
/// the rendered values clamped to `[η, 1-η]`.
pub fn mask_loss<T: Real>(rendered: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mask_loss", rendered, target)?;
    let n = rendered.numel();
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
    let r = rendered.data();
    let t = target.data();
    let mut total = 0.0;
    let mut grads = vec![T::zero(); n];
    for i in 0..n {
        let rv = r[i].as_f64();
        let p = rv.clamp(lo, hi);
        let y = t[i].as_f64();
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        if rv > lo && rv < hi {
            grads[i] = T::of((-y / p + (1.0 - y) / (1.0 - p)) / n as f64);
        }
    }
    let value = T::of(total / n as f64);
    Ok(Tensor::from_op("mask_bce", &[rendered], vec![], vec![value], move |g, needs| {
        vec![needs[0].then(|| grads.iter().map(|v| *v * g[0]).collect())]
    })?)
}

/// Dense optical flow between a target and a source frame, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub height: usize,
    pub width: usize,
    /// `[2, H, W]` displacement from target pixels into the source frame.
    pub fwd: Vec<f64>,
    /// `[2, H, W]` displacement from source pixels into the target frame.
    pub bwd: Vec<f64>,
    /// `[H, W]` 1 where the target pixel is hidden in the source frame, when known.
    pub occluded: Option<Vec<u8>>,
}

impl FlowPair {
    fn lookup(img: &[f64], h: usize, w: usize, px: usize) -> [f64; 2] {
        [img[px], img[h * w + px]]
    }

    pub fn fwd_at(&self, px: usize) -> [f64; 2] {
        Self::lookup(&self.fwd, self.height, self.width, px)
    }

    /// Bilinear lookup of the backward flow at continuous pixel position `(x, y)`,
    /// clamped to the image.
    pub fn bwd_bilinear(&self, x: f64, y: f64) -> [f64; 2] {
        let (h, w) = (self.height, self.width);
        let gx = (x - 0.5).clamp(0.0, (w - 1) as f64);
        let gy = (y - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let at = |r: usize, q: usize| self.bwd[c * h * w + r * w + q];
            *o = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
        }
        out
    }

    /// `|F_fwd[u] + F_bwd[u + F_fwd[u]]|` at target pixel index `px`.
    pub fn round_trip_error(&self, px: usize) -> f64 {
        let (row, col) = (px / self.width, px % self.width);
        let f = self.fwd_at(px);
        let b = self.bwd_bilinear(col as f64 + 0.5 + f[0], row as f64 + 0.5 + f[1]);
        ((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt()
    }
}

/// Pixels of the target foreground whose flow survives the forward-backward check.
pub fn flow_consistency_mask(pair: &FlowPair, fg_mask: &[f64], tau: f64) -> Result<Vec<bool>> {
    let hw = pair.height * pair.width;
    if fg_mask.len() != hw || pair.fwd.len() != 2 * hw || pair.bwd.len() != 2 * hw {
        return Err(CoreError::DimensionMismatch("flow pair and mask resolutions differ".into()));
    }
    Ok((0..hw).map(|px| fg_mask[px] >= 0.5 && pair.round_trip_error(px) <= tau).collect())
}

/// Source of flow pairs between arbitrary frames of one scene.
pub trait FlowProvider: Send + Sync {
    fn pair(&self, tgt: usize, src: usize) -> Result<Cow<'_, FlowPair>>;
}

/// Where the projected offset points of one ray should land in every source view.
#[derive(Clone, Debug)]
pub struct FlowTargets {
    pub rays: usize,
    pub views: usize,
    /// Row-major `[R, V]` target pixel positions `u + F[u]`.
    pub targets: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowTargets {
    /// Look up the flow for ray pixels `(col, row)` of frame `tgt` into each source frame.
    pub fn gather(provider: &dyn FlowProvider, tgt: usize, sources: &[usize], pixels: &[(usize, usize)], fg_mask: &[f64], tau: f64) -> Result<Self> {
        let (r, v) = (pixels.len(), sources.len());
        let mut targets = vec![[0.0; 2]; r * v];
        let mut valid = vec![false; r * v];
        for (i, &src) in sources.iter().enumerate() {
            let pair = provider.pair(tgt, src)?;
            for (k, &(col, row)) in pixels.iter().enumerate() {
                let px = row * pair.width + col;
                let f = pair.fwd_at(px);
                targets[k * v + i] = [col as f64 + 0.5 + f[0], row as f64 + 0.5 + f[1]];
                valid[k * v + i] = fg_mask[px] >= 0.5 && pair.round_trip_error(px) <= tau;
            }
        }
        Ok(Self { rays: r, views: v, targets, valid })
    }
}

/// Flow-consistency loss.
///
/// `points` are the `[R, S, 3]` ray samples, `offsets` the `[R, S, V, 3]`
/// predicted displacements and `weights` the `[R, S]` rendering weights, of
/// which only the value is used. Returns the mean over valid (ray, view)
/// pairs of `Σ_j w_j |π_v(x_j + δ_jv) - (u + F_v[u])|_ε` and the number of
/// valid pairs; with none the loss is zero.
pub fn flow_loss<T: Real>(points: &Tensor<T>, offsets: &Tensor<T>, weights: &Tensor<T>, cameras: &[&Camera], targets: &FlowTargets, eps: f64) -> Result<(Tensor<T>, usize)> {
    let (r, v) = (targets.rays, targets.views);
    let s = weights.shape().get(1).copied().unwrap_or(0);
    if points.shape() != [r, s, 3] || offsets.shape() != [r, s, v, 3] || weights.shape() != [r, s] || cameras.len() != v {
        return Err(CoreError::DimensionMismatch(format!(
            "flow_loss points {:?}, offsets {:?}, weights {:?}, {} cameras, targets {}x{}",
            points.shape(),
            offsets.shape(),
            weights.shape(),
            cameras.len(),
            r,
            v
        )));
    }
    let count = targets.valid.iter().filter(|b| **b).count();
    if count == 0 {
        log::warn!("flow loss has no valid pixels");
        return Ok((Tensor::scalar(T::zero()), 0));
    }
    let w = weights.stop_gradient();
    let flat_points = points.reshape(&[r * s, 3])?;
    let mut total: Option<Tensor<T>> = None;
    for (i, cam) in cameras.iter().enumerate() {
        if !(0..r).any(|k| targets.valid[k * v + i]) {
            continue;
        }
        let d = offsets.slice(2, i, 1)?.reshape(&[r * s, 3])?;
        let proj = project_points(cam, &flat_points.add(&d)?)?;
        let mut tgt = Vec::with_capacity(r * s * 2);
        let mut factor = Vec::with_capacity(r * s);
        for k in 0..r {
            let t = targets.targets[k * v + i];
            let ok = targets.valid[k * v + i];
            for j in 0..s {
                tgt.push(T::of(t[0]));
                tgt.push(T::of(t[1]));
                let keep = ok && proj.valid[k * s + j];
                factor.push(if keep { w.data()[k * s + j] / T::of(count as f64) } else { T::zero() });
            }
        }
        let resid = proj.pixels.sub(&Tensor::new(vec![r * s, 2], tgt)?)?;
        let term = huber(&resid, eps)?.mul(&Tensor::new(vec![r * s], factor)?)?.sum_all()?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok((total.unwrap_or_else(|| Tensor::scalar(T::zero())), count))
}

/// Soft Huber norm of the masked embedding residual, averaged over
/// foreground pixels. `rendered` and `target` are `[R, D]`, `mask` is `[R]`.
pub fn cse_loss<T: Real>(rendered: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    same_shape("cse_loss", rendered, target)?;
    if rendered.rank() != 2 || mask.shape() != &target.shape()[..1] {
        return Err(CoreError::DimensionMismatch(format!("cse_loss mask {:?} for {:?}", mask.shape(), target.shape())));
    }
    let fg = mask.data().iter().filter(|m| m.as_f64() >= 0.5).count();
    if fg == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    let d = target.shape()[1];
    let m = mask.data();
    let mvals: Vec<T> = (0..target.numel()).map(|i| m[i / d]).collect();
    let mt = Tensor::new(target.shape().to_vec(), mvals)?;
    let resid = target.sub(rendered)?.mul(&mt)?;
    Ok(huber(&resid, eps)?.sum_all()?.scale(T::of(1.0 / fg as f64))?)
}

/// Weights of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub photo: f64,
    pub mask: f64,
    pub flow: f64,
    pub cse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { photo: 1.0, mask: 1.0, flow: 1000.0, cse: 10.0 }
    }
}

/// Individual loss terms of one step; absent terms count as zero.
#[derive(Clone, Debug, Default)]
pub struct LossParts<T: Real> {
    pub photo: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
    pub flow: Option<Tensor<T>>,
    pub cse: Option<Tensor<T>>,
}

pub fn total_loss<T: Real>(parts: &LossParts<T>, weights: &LossWeights) -> Result<Tensor<T>> {
    let terms = [(&parts.photo, weights.photo), (&parts.mask, weights.mask), (&parts.flow, weights.flow), (&parts.cse, weights.cse)];
    let mut total: Option<Tensor<T>> = None;
    for (part, lambda) in terms {
        let Some(p) = part else { continue };
        if lambda == 0.0 {
            continue;
        }
        let term = p.scale(T::of(lambda))?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(T::zero())))
}
