//! Ground-truth optical flow from depth maps and the analytic scene flow.

use std::borrow::Cow;

use nalgebra::Vector2;

use super::Scene;
use crate::error::{CoreError, Result};
pub use crate::losses::FlowPair;
use crate::losses::FlowProvider;

/// Depth-test tolerance (world units) for labeling occlusions.
pub const OCCLUSION_TOLERANCE: f64 = 0.1;

/// Flow from frame `from` to frame `to` for every foreground pixel of
/// `from`: the pixel is lifted to its expected surface point, carried by the
/// scene flow and projected into `to`. Also returns the occlusion label of
/// every pixel (hidden or out of view in `to`).
fn lift_flow(scene: &Scene, from: usize, to: usize, depth: &[&[f64]; 2], mask: &[&[f64]; 2]) -> Result<(Vec<f64>, Vec<u8>)> {
    let (cf, ct) = (scene.camera(from)?, scene.camera(to)?);
    let (tf, tt) = (scene.timestamps[from], scene.timestamps[to]);
    let (h, w) = (cf.height, cf.width);
    let hw = h * w;
    if depth.iter().chain(mask.iter()).any(|d| d.len() != hw) {
        return Err(CoreError::DimensionMismatch("depth/mask maps do not match the image size".into()));
    }
    let mut flow = vec![0.0; 2 * hw];
    let mut occl = vec![0u8; hw];
    let centre_to = ct.center();
    for row in 0..h {
        for col in 0..w {
            let px = row * w + col;
            if mask[0][px] < 0.5 {
                continue;
            }
            let u = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
            let x = cf.ray_for_pixel(&u)?.at(depth[0][px]);
            let moved = x + scene.gt_scene_flow(&x, tf, tt);
            let Ok((v, _)) = ct.project(&moved) else {
                occl[px] = 1;
                continue;
            };
            flow[px] = v.x - u.x;
            flow[hw + px] = v.y - u.y;
            if !ct.contains_pixel(&v) {
                occl[px] = 1;
                continue;
            }
            let q = (v.y.floor() as usize).min(h - 1) * w + (v.x.floor() as usize).min(w - 1);
            let dist = (moved - centre_to).norm();
            if mask[1][q] < 0.5 || (depth[1][q] - dist).abs() > OCCLUSION_TOLERANCE {
                occl[px] = 1;
            }
        }
    }
    Ok((flow, occl))
}

/// Forward and backward flow between frames `tgt` and `src` given per-frame
/// expected-depth maps and masks (indexed by frame).
pub fn gt_optical_flow(scene: &Scene, tgt: usize, src: usize, depth: &[Vec<f64>], mask: &[Vec<f64>]) -> Result<FlowPair> {
    let get = |v: &'_ [Vec<f64>], k: usize| -> Result<()> {
        if k >= v.len() {
            return Err(CoreError::InvalidArgument(format!("no depth or mask for frame {k}")));
        }
        Ok(())
    };
    for k in [tgt, src] {
        get(depth, k)?;
        get(mask, k)?;
    }
    let (fwd, occl) = lift_flow(scene, tgt, src, &[&depth[tgt], &depth[src]], &[&mask[tgt], &mask[src]])?;
    let (bwd, _) = lift_flow(scene, src, tgt, &[&depth[src], &depth[tgt]], &[&mask[src], &mask[tgt]])?;
    let cam = scene.camera(tgt)?;
    Ok(FlowPair { height: cam.height, width: cam.width, fwd, bwd, occluded: Some(occl) })
}

/// Flow provider computing exact pairs on demand from depth maps.
#[derive(Clone, Debug)]
pub struct AnalyticFlow {
    pub scene: Scene,
    pub depth: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
}

impl AnalyticFlow {
    pub fn new(scene: Scene, depth: Vec<Vec<f64>>, mask: Vec<Vec<f64>>) -> Result<Self> {
        if depth.len() != scene.num_frames() || mask.len() != scene.num_frames() {
            return Err(CoreError::DimensionMismatch("need one depth map and mask per frame".into()));
        }
        Ok(Self { scene, depth, mask })
    }
}

impl FlowProvider for AnalyticFlow {
    fn pair(&self, tgt: usize, src: usize) -> Result<Cow<'_, FlowPair>> {
        Ok(Cow::Owned(gt_optical_flow(&self.scene, tgt, src, &self.depth, &self.mask)?))
    }
}
