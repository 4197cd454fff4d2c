//! Optimization, evaluation protocols and metrics.

mod checkpoint;
mod optim;
mod protocol;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointEntry, CheckpointIndex};
pub use optim::{Adam, Plateau};
pub use protocol::{config_hash, evaluate, run_fscr, run_ft, run_msssr, sweep_eval, FrameMetrics, MeanMetrics, MetricsReport, FSCR_SWEEP};
pub use trainer::{batch_losses, cse_cosine, offset_error, render_view, PreparedScene, RenderedView, StepLog, StepOutput, Trainer};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneDataset;
use crate::error::{CoreError, Result};
use crate::losses::{LossWeights, FLOW_TAU, HUBER_EPS};
use crate::nerformer::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Msssr,
    Fscr,
    Ft,
}

impl std::str::FromStr for Task {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msssr" => Ok(Task::Msssr),
            "fscr" => Ok(Task::Fscr),
            "ft" => Ok(Task::Ft),
            _ => Err(CoreError::InvalidArgument(format!("unknown task {s:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Msssr => "msssr",
            Task::Fscr => "fscr",
            Task::Ft => "ft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub decay_factor: f64,
    /// Steps without windowed-loss improvement before a decay.
    pub patience: usize,
    pub plateau_window: usize,
    pub plateau_rel: f64,
    pub max_decays: usize,
    pub loss: LossWeights,
    pub n_src_min: usize,
    pub n_src_max: usize,
    pub rays: usize,
    /// Samples per ray.
    pub samples: usize,
    pub steps: usize,
    pub seed: u64,
    /// Share of rays drawn from foreground pixels.
    pub fg_fraction: f64,
    pub flow_tau: f64,
    pub huber_eps: f64,
    /// Source views used when evaluating single-scene models.
    pub eval_n_src: usize,
    /// Rays per evaluation chunk.
    pub eval_chunk: usize,
    pub log_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Msssr,
            lr: 5e-4,
            decay_factor: 10.0,
            patience: 500,
            plateau_window: 50,
            plateau_rel: 1e-3,
            max_decays: 2,
            loss: LossWeights::default(),
            n_src_min: 5,
            n_src_max: 25,
            rays: 512,
            samples: 32,
            steps: 5000,
            seed: 0,
            fg_fraction: 0.5,
            flow_tau: FLOW_TAU,
            huber_eps: HUBER_EPS,
            eval_n_src: 10,
            eval_chunk: 1024,
            log_every: 100,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.decay_factor < 1.0 {
            return bad("decay_factor must be at least 1");
        }
        if self.n_src_min == 0 || self.n_src_min > self.n_src_max {
            return bad("need 1 <= n_src_min <= n_src_max");
        }
        if self.rays == 0 || self.samples == 0 || self.eval_chunk == 0 || self.eval_n_src == 0 {
            return bad("rays, samples, eval_chunk and eval_n_src must be positive");
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return bad("fg_fraction must lie in [0, 1]");
        }
        if self.huber_eps <= 0.0 || self.flow_tau < 0.0 {
            return bad("huber_eps must be positive and flow_tau non-negative");
        }
        self.model.validate()
    }
}

/// Known frames are trained on; unseen frames are held out for evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSplit {
    pub known: Vec<bool>,
}

pub const KNOWN_BLOCK: usize = 15;
pub const UNSEEN_BLOCK: usize = 5;

/// Repeating blocks of 15 known then 5 unseen frames from frame 0.
pub fn frame_split(n: usize) -> FrameSplit {
    FrameSplit { known: (0..n).map(|k| k % (KNOWN_BLOCK + UNSEEN_BLOCK) < KNOWN_BLOCK).collect() }
}

impl FrameSplit {
    pub fn known_frames(&self) -> Vec<usize> {
        (0..self.known.len()).filter(|&k| self.known[k]).collect()
    }

    pub fn unseen_frames(&self) -> Vec<usize> {
        (0..self.known.len()).filter(|&k| !self.known[k]).collect()
    }

    /// `n` known frames other than `exclude`, evenly spread over the sequence.
    pub fn spread_sources(&self, exclude: usize, n: usize) -> Result<Vec<usize>> {
        let pool: Vec<usize> = self.known_frames().into_iter().filter(|&k| k != exclude).collect();
        if pool.len() < n || n == 0 {
            return Err(CoreError::Data(format!("{n} source views requested, {} known frames available", pool.len())));
        }
        Ok((0..n).map(|i| pool[(i * pool.len() + pool.len() / 2) / n]).collect())
    }
}

/// One training step's frames and ray pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub target: usize,
    pub sources: Vec<usize>,
    /// `(col, row)` per ray.
    pub pixels: Vec<(usize, usize)>,
}

/// Draw a known target, `N_src` known sources without it, and ray pixels:
/// the foreground share from mask pixels, the rest uniformly.
pub fn make_batch<R: Rng + ?Sized>(ds: &SceneDataset, split: &FrameSplit, cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let known = split.known_frames();
    if split.known.len() != ds.num_frames() {
        return Err(CoreError::DimensionMismatch(format!("split of {} frames for {} frames", split.known.len(), ds.num_frames())));
    }
    if known.len() < cfg.n_src_min + 1 {
        return Err(CoreError::Data(format!("{} known frames, need at least {}", known.len(), cfg.n_src_min + 1)));
    }
    let target = *known.choose(rng).expect("non-empty");
    let n_src = rng.gen_range(cfg.n_src_min..=cfg.n_src_max).min(known.len() - 1);
    let pool: Vec<usize> = known.iter().copied().filter(|&k| k != target).collect();
    let sources: Vec<usize> = pool.choose_multiple(rng, n_src).copied().collect();
    let (h, w) = (ds.height, ds.width);
    let fg: Vec<usize> = (0..h * w).filter(|&px| ds.frames[target].mask[px] >= 0.5).collect();
    let n_fg = if fg.is_empty() { 0 } else { (cfg.rays as f64 * cfg.fg_fraction).round() as usize };
    let mut pixels = Vec::with_capacity(cfg.rays);
    for i in 0..cfg.rays {
        let px = if i < n_fg { fg[rng.gen_range(0..fg.len())] } else { rng.gen_range(0..h * w) };
        pixels.push((px % w, px / w));
    }
    Ok(Batch { target, sources, pixels })
}

pub const PSNR_CAP: f64 = 60.0;

/// `10 log10(1 / mse)`, capped when the error is below 1e-6.
pub fn psnr(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(CoreError::DimensionMismatch(format!("psnr over {} and {} values", pred.len(), gt.len())));
    }
    let mse = pred.iter().zip(gt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(if mse < 1e-6 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

pub fn l1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(CoreError::DimensionMismatch(format!("l1 over {} and {} values", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// IoU of masks thresholded at 0.5; two empty masks count as 1.
pub fn mask_iou(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CoreError::DimensionMismatch(format!("iou over {} and {} values", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        let (a, b) = (*a >= 0.5, *b >= 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Target image `[3, H, W]` premultiplied by its mask `[H, W]`.
pub fn premultiply(image: &[f64], mask: &[f64]) -> Vec<f64> {
    let hw = mask.len();
    image.iter().enumerate().map(|(i, v)| v * mask[i % hw]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Scene, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_blocks() {
        let s = frame_split(200);
        assert_eq!(s.known_frames().len(), 150);
        assert_eq!(s.unseen_frames().len(), 50);
        assert!(frame_split(15).unseen_frames().is_empty());
        assert_eq!(frame_split(20).unseen_frames(), vec![15, 16, 17, 18, 19]);
        assert_eq!(&s.unseen_frames()[5..10], &[35, 36, 37, 38, 39]);
        let src = s.spread_sources(17, 10).unwrap();
        assert_eq!(src.len(), 10);
        assert!(src.windows(2).all(|w| w[0] < w[1]) && src.iter().all(|k| s.known[*k]));
        assert!(s.spread_sources(3, 200).is_err());
    }

    fn dataset(frames: usize) -> SceneDataset {
        let spec = SceneSpec { frames, height: 12, width: 12, render_samples: 24, ..SceneSpec::default() };
        SceneDataset::from_scene(&Scene::new(spec).unwrap()).unwrap()
    }

    #[test]
    fn batches_exclude_target_and_are_uniform_in_count() {
        let ds = dataset(40);
        let split = frame_split(40);
        let cfg = TrainConfig { rays: 8, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 26];
        let draws = 10_000;
        for _ in 0..draws {
            let b = make_batch(&ds, &split, &cfg, &mut rng).unwrap();
            assert!(!b.sources.contains(&b.target));
            assert!(split.known[b.target] && b.sources.iter().all(|k| split.known[*k]));
            let mut u = b.sources.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), b.sources.len());
            counts[b.sources.len()] += 1;
        }
        // chi-square against uniform over 5..=25, 20 dof: 3 sigma above the mean
        let expect = draws as f64 / 21.0;
        let chi2: f64 = counts[5..=25].iter().map(|c| (*c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 20.0 + 3.0 * 40f64.sqrt(), "chi2 {chi2}");
        assert_eq!(counts[..5].iter().sum::<usize>(), 0);

        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..20).map(|_| make_batch(&ds, &split, &cfg, &mut r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..20).map(|_| make_batch(&ds, &split, &cfg, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn foreground_share() {
        let ds = dataset(20);
        let split = frame_split(20);
        let cfg = TrainConfig { rays: 64, n_src_min: 2, n_src_max: 4, ..TrainConfig::default() };
        let b = make_batch(&ds, &split, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mask = &ds.frames[b.target].mask;
        assert!(b.pixels[..32].iter().all(|(c, r)| mask[r * 12 + c] >= 0.5));
        let few = frame_split(2);
        assert!(make_batch(&dataset(2), &few, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn metric_values() {
        let a = vec![0.2, 0.4, 0.6, 0.8];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!((l1(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(mask_iou(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(psnr(&a, &b[..3]).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.decay_factor, c.n_src_min, c.n_src_max), (5e-4, 10.0, 5, 25));
        assert_eq!((c.loss.photo, c.loss.flow, c.loss.cse), (1.0, 1000.0, 10.0));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { n_src_min: 6, n_src_max: 5, ..TrainConfig::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"task":"fscr","steps":7}"#).unwrap();
        assert_eq!((parsed.task, parsed.steps, parsed.rays), (Task::Fscr, 7, 512));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz":7}"#).is_err());
    }
}
