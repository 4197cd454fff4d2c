//! Candidate mask sets: the true mask hidden among perturbed decoys.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::masktrack::{bbox, box_iou};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub count: usize,
    /// Maximum decoy shift as a fraction of the image size.
    pub max_shift: f64,
    /// Decoys must overlap the true mask (pixel IoU) less than this.
    pub max_decoy_iou: f64,
    /// Amplitude of per-pixel noise added to every candidate.
    pub noise: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { count: 4, max_shift: 0.35, max_decoy_iou: 0.7, noise: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    /// `count` masks of `H*W` values in `[0, 1]`.
    pub masks: Vec<Vec<f64>>,
    pub confidence: Vec<f64>,
    pub true_index: usize,
}

pub fn mask_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn shifted(mask: &[f64], h: usize, w: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (sr, sc) = (r - dy, c - dx);
            if sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 {
                out[(r * w as i64 + c) as usize] = mask[(sr * w as i64 + sc) as usize];
            }
        }
    }
    out
}

/// Grow (`grow = true`) or shrink the thresholded mask by `steps` pixels.
fn morph(mask: &[f64], h: usize, w: usize, steps: usize, grow: bool) -> Vec<f64> {
    let mut cur: Vec<bool> = mask.iter().map(|v| *v >= 0.5).collect();
    for _ in 0..steps {
        let prev = cur.clone();
        for r in 0..h {
            for c in 0..w {
                let mut any = false;
                let mut all = true;
                for (dr, dc) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    let v = rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 && prev[(rr as usize) * w + cc as usize];
                    any |= v;
                    all &= v;
                }
                let p = prev[r * w + c];
                cur[r * w + c] = if grow { p || any } else { p && all };
            }
        }
    }
    cur.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect()
}

/// The true mask plus `count - 1` decoys (shifted, shifted-and-grown or
/// shifted-and-eroded copies), shuffled; the true position is recorded.
pub fn candidate_masks<R: Rng + ?Sized>(truth: &[f64], h: usize, w: usize, cfg: &CandidateConfig, rng: &mut R) -> Candidates {
    let count = cfg.count.max(1);
    let noisy = |m: Vec<f64>, rng: &mut R| -> Vec<f64> {
        m.into_iter().map(|v| (v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0)).collect()
    };
    let mut masks = vec![noisy(truth.to_vec(), rng)];
    let mut conf = vec![rng.gen_range(0.5..1.0)];
    let tb = bbox(truth, h, w, 0.5);
    while masks.len() < count {
        let max_dx = ((w as f64 * cfg.max_shift) as i64).max(2);
        let max_dy = ((h as f64 * cfg.max_shift) as i64).max(2);
        let mut decoy = None;
        for _ in 0..64 {
            let dx = rng.gen_range(-max_dx..=max_dx);
            let dy = rng.gen_range(-max_dy..=max_dy);
            let base = shifted(truth, h, w, dx, dy);
            let m = match rng.gen_range(0..3) {
                0 => base,
                1 => morph(&base, h, w, rng.gen_range(1..4), true),
                _ => morph(&base, h, w, rng.gen_range(1..3), false),
            };
            let db = bbox(&m, h, w, 0.5);
            if mask_iou(&m, truth) < cfg.max_decoy_iou && (tb.is_empty() || box_iou(&db, &tb) < cfg.max_decoy_iou) && !db.is_empty() {
                decoy = Some(m);
                break;
            }
        }
        // an empty decoy is always far from the truth
        let m = decoy.unwrap_or_else(|| vec![0.0; h * w]);
        masks.push(noisy(m, rng));
        conf.push(rng.gen_range(0.3..0.9));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let true_index = order.iter().position(|&i| i == 0).unwrap();
    Candidates {
        masks: order.iter().map(|&i| masks[i].clone()).collect(),
        confidence: order.iter().map(|&i| conf[i]).collect(),
        true_index,
    }
}
