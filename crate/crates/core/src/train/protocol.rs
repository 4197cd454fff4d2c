use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trackerf_tensor::Real;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::trainer::{render_view, PreparedScene, Trainer};
use super::{l1, mask_iou, premultiply, psnr, Task, TrainConfig};
use crate::dataset::{write_ppm, SceneDataset};
use crate::error::{CoreError, Result};
use crate::nerformer::TrackerNerf;
use crate::params::ParamStore;

/// Source-view counts evaluated by the few-shot protocol.
pub const FSCR_SWEEP: [usize; 5] = [5, 10, 15, 20, 25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub l1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub psnr: f64,
    pub l1: f64,
    pub iou: f64,
}

impl MeanMetrics {
    pub fn of(rows: &[FrameMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            l1: rows.iter().map(|r| r.l1).sum::<f64>() / n,
            iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub scene_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_src: Option<usize>,
    pub per_frame: Vec<FrameMetrics>,
    pub mean: MeanMetrics,
    pub steps: usize,
    pub wall_seconds: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CoreError::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

/// SHA-256 of the compact JSON form, hex encoded.
pub fn config_hash<S: Serialize>(cfg: &S) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Render each of `frames` from `n_src` spread known sources and score it
/// against the mask-premultiplied ground truth. Optionally writes previews.
pub fn evaluate<T: Real>(
    model: &TrackerNerf,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    scene: &PreparedScene,
    frames: &[usize],
    n_src: usize,
    previews: Option<&Path>,
) -> Result<Vec<FrameMetrics>> {
    let mut rows = Vec::with_capacity(frames.len());
    for &k in frames {
        let sources = scene.split.spread_sources(k, n_src)?;
        let view = render_view(model, store, cfg, scene, k, &sources)?;
        let frame = &scene.ds.frames[k];
        let gt_mask: Vec<f64> = frame.mask.iter().map(|v| *v as f64).collect();
        let gt_img: Vec<f64> = frame.image.iter().map(|v| *v as f64).collect();
        let gt = premultiply(&gt_img, &gt_mask);
        let row = FrameMetrics { frame: k, psnr: psnr(&view.image, &gt)?, l1: l1(&view.image, &gt)?, iou: mask_iou(&view.mask, &gt_mask)? };
        if let Some(dir) = previews {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
            let img: Vec<f32> = view.image.iter().map(|v| *v as f32).collect();
            write_ppm(&dir.join(format!("{k:04}.ppm")), &img, view.height, view.width)?;
        }
        info!("frame {k}: psnr {:.2} l1 {:.4} iou {:.3}", row.psnr, row.l1, row.iou);
        rows.push(row);
    }
    Ok(rows)
}

fn report(task: Task, scene_id: &str, n_src: Option<usize>, rows: Vec<FrameMetrics>, steps: usize, start: Instant, cfg: &TrainConfig) -> MetricsReport {
    MetricsReport {
        task,
        scene_id: scene_id.to_string(),
        n_src,
        mean: MeanMetrics::of(&rows),
        per_frame: rows,
        steps,
        wall_seconds: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config_hash: config_hash(cfg),
    }
}

fn finish<T: Real>(trainer: &Trainer<T>, out: Option<&Path>, reports: &[MetricsReport]) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    save_checkpoint(&dir.join("checkpoint"), &trainer.model, &trainer.store, trainer.step)?;
    if let [single] = reports {
        single.write(&dir.join("metrics.json"))
    } else {
        write_json(&dir.join("metrics.json"), &reports)
    }
}

/// Fit one scene's known frames, then evaluate its unseen frames.
pub fn run_msssr<T: Real>(ds: &SceneDataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<(Trainer<T>, MetricsReport)> {
    let start = Instant::now();
    let scene = PreparedScene::new(ds)?;
    let mut trainer = Trainer::<T>::new(cfg, ds.cse_dim())?;
    trainer.train(std::slice::from_ref(&scene), cfg.steps)?;
    let unseen = scene.split.unseen_frames();
    let rows = evaluate(&trainer.model, &trainer.store, cfg, &scene, &unseen, cfg.eval_n_src, out.map(|d| d.join("previews")).as_deref())?;
    let rep = report(cfg.task, &ds.scene_id, None, rows, trainer.step, start, cfg);
    finish(&trainer, out, std::slice::from_ref(&rep))?;
    Ok((trainer, rep))
}

/// Evaluate the unseen frames of `test` once per source count in `sweep`.
pub fn sweep_eval<T: Real>(model: &TrackerNerf, store: &ParamStore<T>, cfg: &TrainConfig, test: &SceneDataset, sweep: &[usize], steps: usize, start: Instant, previews: Option<&Path>) -> Result<Vec<MetricsReport>> {
    let scene = PreparedScene::new(test)?;
    let unseen = scene.split.unseen_frames();
    sweep
        .iter()
        .map(|&n| {
            let dir = previews.map(|d| d.join(format!("n{n:02}")));
            let rows = evaluate(model, store, cfg, &scene, &unseen, n, dir.as_deref())?;
            Ok(report(Task::Fscr, &test.scene_id, Some(n), rows, steps, start, cfg))
        })
        .collect()
}

/// Train across `train` scenes, then condition on the test scene's known
/// frames without updating weights.
pub fn run_fscr<T: Real>(train: &[SceneDataset], test: &SceneDataset, cfg: &TrainConfig, sweep: &[usize], out: Option<&Path>) -> Result<(Trainer<T>, Vec<MetricsReport>)> {
    let start = Instant::now();
    let first = train.first().ok_or_else(|| CoreError::InvalidArgument("no training scenes".into()))?;
    let cse_dim = first.cse_dim();
    for ds in train.iter().chain([test]) {
        if ds.cse_dim() != cse_dim || ds.height != first.height || ds.width != first.width {
            return Err(CoreError::DimensionMismatch(format!("scene {} differs in resolution or embedding width", ds.scene_id)));
        }
    }
    let scenes = train.iter().map(PreparedScene::new).collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::<T>::new(cfg, cse_dim)?;
    trainer.train(&scenes, cfg.steps)?;
    let reports = sweep_eval(&trainer.model, &trainer.store, cfg, test, sweep, trainer.step, start, out.map(|d| d.join("previews")).as_deref())?;
    finish(&trainer, out, &reports)?;
    Ok((trainer, reports))
}

/// Fine-tune a checkpoint on one scene. Returns the report before any
/// update and the final one.
pub fn run_ft<T: Real>(ckpt: &Path, ds: &SceneDataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<(Trainer<T>, MetricsReport, MetricsReport)> {
    let start = Instant::now();
    let ck = load_checkpoint::<T>(ckpt)?;
    if ck.index.cse_dim != ds.cse_dim() && (ck.model.cfg.cse_head || ck.model.cfg.encoder.use_cse) {
        return Err(CoreError::DimensionMismatch(format!("checkpoint embeds {} channels, dataset {}", ck.index.cse_dim, ds.cse_dim())));
    }
    let mut run_cfg = cfg.clone();
    run_cfg.model = ck.model.cfg.clone();
    let scene = PreparedScene::new(ds)?;
    let unseen = scene.split.unseen_frames();
    let mut trainer = Trainer::from_parts(&run_cfg, ck.model, ck.store);
    let before = evaluate(&trainer.model, &trainer.store, &run_cfg, &scene, &unseen, run_cfg.eval_n_src, None)?;
    let before = report(Task::Ft, &ds.scene_id, None, before, 0, start, &run_cfg);
    trainer.train(std::slice::from_ref(&scene), run_cfg.steps)?;
    let rows = evaluate(&trainer.model, &trainer.store, &run_cfg, &scene, &unseen, run_cfg.eval_n_src, out.map(|d| d.join("previews")).as_deref())?;
    let rep = report(Task::Ft, &ds.scene_id, None, rows, trainer.step, start, &run_cfg);
    finish(&trainer, out, std::slice::from_ref(&rep))?;
    Ok((trainer, before, rep))
}
