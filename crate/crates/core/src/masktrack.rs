//! Single-object mask tracking: pick one candidate mask per frame so that
//! confident candidates with overlapping bounding boxes in consecutive
//! frames are chained together.

use std::path::Path;

use serde::{Deserialize, Serialize};
use trackerf_tensor::ten::TenArray;

use crate::error::{CoreError, Result};

/// Smoothing added to the pairwise potential inside the log.
pub const KAPPA: f64 = 1e-3;
pub const MASK_THRESHOLD: f64 = 0.5;

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const EMPTY: BBox = BBox { x0: 0.0, y0: 0.0, x1: 0.0, y1: 0.0 };

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }
}

/// Tight box around the pixels of an `h x w` mask at or above `threshold`.
pub fn bbox(mask: &[f64], h: usize, w: usize, threshold: f64) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] >= threshold {
                x0 = x0.min(c);
                y0 = y0.min(r);
                x1 = x1.max(c + 1);
                y1 = y1.max(r + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return BBox::EMPTY;
    }
    BBox { x0: x0 as f64, y0: y0 as f64, x1: x1 as f64, y1: y1 as f64 }
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = BBox { x0: a.x0.max(b.x0), y0: a.y0.max(b.y0), x1: a.x1.min(b.x1), y1: a.y1.min(b.y1) }.area();
    inter / (a.area() + b.area() - inter)
}

/// Candidate masks of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCandidates {
    pub masks: Vec<Vec<f64>>,
    pub confidence: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<FrameCandidates>,
}

/// Log-potentials of a chain: `unary[j][k]` and `pairwise[j][k][l]` between
/// candidate `k` of frame `j` and candidate `l` of frame `j + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainPotentials {
    pub unary: Vec<Vec<f64>>,
    pub pairwise: Vec<Vec<Vec<f64>>>,
}

impl ChainPotentials {
    pub fn from_boxes(boxes: &[Vec<BBox>], confidence: &[Option<Vec<f64>>]) -> Result<Self> {
        if boxes.iter().any(Vec::is_empty) {
            return Err(CoreError::InvalidArgument("every frame needs at least one candidate".into()));
        }
        let unary = boxes
            .iter()
            .zip(confidence)
            .map(|(b, c)| match c {
                Some(c) if c.len() == b.len() => Ok(c.iter().map(|v| v.max(1e-12).ln()).collect()),
                Some(_) => Err(CoreError::DimensionMismatch("confidence count differs from candidate count".into())),
                None => Ok(vec![-(b.len() as f64).ln(); b.len()]),
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let pairwise = boxes
            .windows(2)
            .map(|w| w[0].iter().map(|a| w[1].iter().map(|b| (box_iou(a, b) + KAPPA).ln()).collect()).collect())
            .collect();
        Ok(Self { unary, pairwise })
    }

    pub fn from_candidates(set: &CandidateSet) -> Result<Self> {
        let boxes: Vec<Vec<BBox>> = set
            .frames
            .iter()
            .map(|f| f.masks.iter().map(|m| bbox(m, set.height, set.width, MASK_THRESHOLD)).collect())
            .collect();
        let conf: Vec<Option<Vec<f64>>> = set.frames.iter().map(|f| f.confidence.clone()).collect();
        Self::from_boxes(&boxes, &conf)
    }

    /// Score of a path, accumulated from the last frame backwards.
    pub fn score(&self, path: &[usize]) -> f64 {
        let n = path.len();
        let mut s = self.unary[n - 1][path[n - 1]];
        for j in (0..n - 1).rev() {
            s = self.unary[j][path[j]] + (self.pairwise[j][path[j]][path[j + 1]] + s);
        }
        s
    }
}

/// Exact maximizer of the chain score. Among equally scoring paths the
/// lexicographically smallest is returned.
pub fn viterbi(pot: &ChainPotentials) -> Vec<usize> {
    let n = pot.unary.len();
    if n == 0 {
        return Vec::new();
    }
    // best[j][k]: best score of frames j.. given candidate k at frame j
    let mut best: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut next: Vec<Vec<usize>> = vec![Vec::new(); n];
    best[n - 1] = pot.unary[n - 1].clone();
    for j in (0..n - 1).rev() {
        let (b, nx): (Vec<f64>, Vec<usize>) = (0..pot.unary[j].len())
            .map(|k| {
                let mut arg = 0;
                let mut val = f64::NEG_INFINITY;
                for (l, tail) in best[j + 1].iter().enumerate() {
                    let v = pot.pairwise[j][k][l] + tail;
                    if v > val {
                        val = v;
                        arg = l;
                    }
                }
                (pot.unary[j][k] + val, arg)
            })
            .unzip();
        best[j] = b;
        next[j] = nx;
    }
    let mut k = 0;
    for (i, v) in best[0].iter().enumerate() {
        if *v > best[0][k] {
            k = i;
        }
    }
    let mut path = vec![k];
    for j in 0..n - 1 {
        k = next[j][k];
        path.push(k);
    }
    path
}

pub fn viterbi_track(set: &CandidateSet) -> Result<Vec<usize>> {
    Ok(viterbi(&ChainPotentials::from_candidates(set)?))
}

/// Load a candidates directory: one `[N, H, W]` stack per frame in file-name
/// order (`*.ten`) and an optional `confidences.json` holding one list per frame.
pub fn load_candidates(dir: &Path) -> Result<CandidateSet> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ten"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CoreError::Data(format!("no candidate stacks in {}", dir.display())));
    }
    let conf_path = dir.join("confidences.json");
    let conf: Option<Vec<Vec<f64>>> = if conf_path.exists() {
        let text = std::fs::read_to_string(&conf_path).map_err(|e| CoreError::io(&conf_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| CoreError::json(&conf_path, e))?)
    } else {
        None
    };
    if conf.as_ref().is_some_and(|c| c.len() != files.len()) {
        return Err(CoreError::Data("confidences.json must have one entry per frame".into()));
    }
    let mut frames = Vec::new();
    let mut dims = None;
    for (i, f) in files.iter().enumerate() {
        let arr = TenArray::read(f).map_err(|e| CoreError::Data(format!("{}: {e}", f.display())))?;
        if arr.shape.len() != 3 {
            return Err(CoreError::Data(format!("{}: expected [N,H,W], got {:?}", f.display(), arr.shape)));
        }
        let (n, h, w) = (arr.shape[0], arr.shape[1], arr.shape[2]);
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(CoreError::Data(format!("{}: resolution differs from earlier frames", f.display())));
        }
        let vals: Vec<f64> = match &arr.data {
            trackerf_tensor::ten::TenData::U8(v) => v.iter().map(|b| *b as f64 / 255.0).collect(),
            _ => arr.to_values::<f64>(),
        };
        let masks = vals.chunks(h * w).map(<[f64]>::to_vec).collect::<Vec<_>>();
        debug_assert_eq!(masks.len(), n);
        frames.push(FrameCandidates { masks, confidence: conf.as_ref().map(|c| c[i].clone()) });
    }
    let (height, width) = dims.unwrap();
    Ok(CandidateSet { height, width, frames })
}

/// Write a candidate set in the layout read by [`load_candidates`].
pub fn save_candidates(set: &CandidateSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (i, f) in set.frames.iter().enumerate() {
        let flat: Vec<f32> = f.masks.iter().flatten().map(|v| *v as f32).collect();
        let arr = TenArray::from_values(vec![f.masks.len(), set.height, set.width], &flat);
        let path = dir.join(format!("{i:04}.ten"));
        arr.write(&path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
    }
    if set.frames.iter().all(|f| f.confidence.is_some()) {
        let conf: Vec<&Vec<f64>> = set.frames.iter().map(|f| f.confidence.as_ref().unwrap()).collect();
        let path = dir.join("confidences.json");
        let text = serde_json::to_string_pretty(&conf).map_err(|e| CoreError::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(())
}
