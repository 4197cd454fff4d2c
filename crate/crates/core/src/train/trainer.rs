use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackerf_tensor::{Exec, Real, Tape, Tensor};

use super::optim::{Adam, Plateau};
use super::{frame_split, make_batch, Batch, FrameSplit, TrainConfig};
use crate::dataset::SceneDataset;
use crate::encoder::{SampleBatch, SourceView, ViewFeatures};
use crate::error::{CoreError, Result};
use crate::geometry::{bin_centers, stratified_ray_points, Camera, RaySamples};
use crate::losses::{cse_loss, flow_loss, mask_loss, photo_loss, total_loss, FlowProvider, FlowTargets, LossParts};
use crate::nerformer::TrackerNerf;
use crate::params::{Bound, ParamStore};
use crate::render::{composite_predictions, RenderOutput};
use crate::synth::Scene;

/// A dataset with everything a step needs precomputed.
pub struct PreparedScene<'a> {
    pub ds: &'a SceneDataset,
    pub split: FrameSplit,
    pub views: Vec<SourceView>,
    /// Sampling bounds per frame camera.
    pub bounds: Vec<(f64, f64)>,
    pub flow: Box<dyn FlowProvider + 'a>,
    /// The generator, when the dataset is synthetic.
    pub scene: Option<Scene>,
}

impl<'a> PreparedScene<'a> {
    pub fn new(ds: &'a SceneDataset) -> Result<Self> {
        let views = ds
            .frames
            .iter()
            .map(|f| SourceView { image: f.image.clone(), mask: f.mask.clone(), camera: f.camera.clone(), timestamp: f.timestamp, cse: f.cse.clone() })
            .collect();
        let bounds = ds.frames.iter().map(|f| ds.sphere.camera_bounds(&f.camera)).collect::<Result<Vec<_>>>()?;
        let scene = ds.synth.as_ref().map(|s| Scene::new(s.clone())).transpose()?;
        Ok(Self { ds, split: frame_split(ds.num_frames()), views, bounds, flow: ds.flow_provider()?, scene })
    }

    fn mask_f64(&self, k: usize) -> Vec<f64> {
        self.ds.frames[k].mask.iter().map(|v| *v as f64).collect()
    }
}

/// Loss values of one step.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub photo: f64,
    pub mask: f64,
    pub flow: Option<f64>,
    pub cse: Option<f64>,
    pub lr: f64,
}

/// Per-step forward results.
pub struct StepOutput<T: Real> {
    pub parts: LossParts<T>,
    pub render: RenderOutput<T>,
    pub offsets: Option<Tensor<T>>,
}

fn samples_for(camera: &Camera, pixels: &[(usize, usize)], bounds: (f64, f64), n: usize, rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<RaySamples>, SampleBatch)> {
    let mut samples = Vec::with_capacity(pixels.len());
    let mut dirs = Vec::with_capacity(pixels.len());
    match rng {
        Some(rng) => {
            for &(c, r) in pixels {
                let ray = camera.ray_for_pixel_index(c, r)?;
                samples.push(stratified_ray_points(&ray, bounds.0, bounds.1, n, true, rng)?);
                dirs.push(ray.direction);
            }
        }
        None => {
            let (depths, spacing) = bin_centers(bounds.0, bounds.1, n);
            for &(c, r) in pixels {
                let ray = camera.ray_for_pixel_index(c, r)?;
                samples.push(RaySamples { points: depths.iter().map(|d| ray.at(*d)).collect(), depths: depths.clone(), spacing });
                dirs.push(ray.direction);
            }
        }
    }
    let batch = SampleBatch::from_samples(&samples, dirs)?;
    Ok((samples, batch))
}

fn gather_rows<T: Real>(data: &[f32], channels: usize, hw: usize, w: usize, pixels: &[(usize, usize)]) -> Result<Tensor<T>> {
    let mut out = Vec::with_capacity(pixels.len() * channels);
    for &(c, r) in pixels {
        for ch in 0..channels {
            out.push(T::of(data[ch * hw + r * w + c] as f64));
        }
    }
    Ok(Tensor::new(vec![pixels.len(), channels], out)?)
}

/// Forward pass and loss terms for one batch. `jitter` draws the sample
/// depths; without it bin centers are used.
pub fn batch_losses<T: Real>(
    model: &TrackerNerf,
    p: &Bound<T>,
    cfg: &TrainConfig,
    scene: &PreparedScene,
    batch: &Batch,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<StepOutput<T>> {
    let ds = scene.ds;
    let frame = &ds.frames[batch.target];
    let (h, w) = (ds.height, ds.width);
    let src_views: Vec<&SourceView> = batch.sources.iter().map(|&k| &scene.views[k]).collect();
    let feats = model.encode(p, &src_views)?;
    let (samples, sb) = samples_for(&frame.camera, &batch.pixels, scene.bounds[batch.target], cfg.samples, jitter)?;
    let out = model.forward(p, &sb, &feats, frame.timestamp)?;
    let render = composite_predictions(&out.pred, &samples)?;

    let colors = gather_rows::<T>(&frame.image, 3, h * w, w, &batch.pixels)?;
    let mask = gather_rows::<T>(&frame.mask, 1, h * w, w, &batch.pixels)?.reshape(&[batch.pixels.len()])?;
    let mut parts = LossParts { photo: Some(photo_loss(&render.color, &colors, &mask)?), mask: Some(mask_loss(&render.mask, &mask)?), ..Default::default() };
    if let (Some(delta), true) = (&out.offsets, cfg.loss.flow != 0.0) {
        let targets = FlowTargets::gather(scene.flow.as_ref(), batch.target, &batch.sources, &batch.pixels, &scene.mask_f64(batch.target), cfg.flow_tau)?;
        let cams: Vec<&Camera> = batch.sources.iter().map(|&k| &ds.frames[k].camera).collect();
        let (loss, _) = flow_loss(&sb.points_tensor(), delta, &render.weights, &cams, &targets, cfg.huber_eps)?;
        parts.flow = Some(loss);
    }
    if let (Some(rc), Some(tc), true) = (&render.cse, &frame.cse, cfg.loss.cse != 0.0) {
        let d = tc.len() / (h * w);
        parts.cse = Some(cse_loss(rc, &gather_rows::<T>(tc, d, h * w, w, &batch.pixels)?, &mask, cfg.huber_eps)?);
    }
    Ok(StepOutput { parts, render, offsets: out.offsets })
}

/// Model, parameters and optimizer state of one run.
pub struct Trainer<T: Real> {
    pub cfg: TrainConfig,
    pub model: TrackerNerf,
    pub store: ParamStore<T>,
    pub adam: Adam,
    pub sched: Plateau,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters drawn from the config seed.
    pub fn new(cfg: &TrainConfig, cse_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = TrackerNerf::new(&mut store, &cfg.model, cse_dim, &mut init)?;
        Ok(Self::from_parts(cfg, model, store))
    }

    /// Continue from existing parameters with a fresh optimizer.
    pub fn from_parts(cfg: &TrainConfig, model: TrackerNerf, store: ParamStore<T>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            sched: Plateau::new(cfg.lr, cfg.decay_factor, cfg.patience, cfg.plateau_window, cfg.plateau_rel, cfg.max_decays),
            cfg: cfg.clone(),
            model,
            store,
            adam: Adam::default(),
            step: 0,
            rng,
        }
    }

    pub fn train_step(&mut self, scene: &PreparedScene) -> Result<StepLog> {
        let batch = make_batch(scene.ds, &scene.split, &self.cfg, &mut self.rng)?;
        let tape = Tape::new();
        let p = self.store.bind(Some(&tape));
        let out = batch_losses(&self.model, &p, &self.cfg, scene, &batch, Some(&mut self.rng))?;
        let total = total_loss(&out.parts, &self.cfg.loss)?;
        let loss = total.item().as_f64();
        if !loss.is_finite() {
            return Err(CoreError::NonFinite(format!("loss at step {}", self.step)));
        }
        let grads = total.backward()?;
        let ids: Vec<_> = self.store.ids().filter(|id| self.store.param(*id).trainable).collect();
        let g: Vec<_> = ids.iter().map(|&id| (id, grads.get_or_zeros(p.get(id)).data().iter().map(|v| v.as_f64()).collect())).collect();
        drop(p);
        let lr = self.sched.lr;
        self.adam.step(&mut self.store, &g, lr)?;
        let next_lr = self.sched.observe(loss);
        if next_lr != lr {
            info!("step {}: learning rate {lr:e} -> {next_lr:e}", self.step);
        }
        let val = |t: &Option<Tensor<T>>| t.as_ref().map(|x| x.item().as_f64());
        let log = StepLog {
            step: self.step,
            loss,
            photo: val(&out.parts.photo).unwrap_or(0.0),
            mask: val(&out.parts.mask).unwrap_or(0.0),
            flow: val(&out.parts.flow),
            cse: val(&out.parts.cse),
            lr,
        };
        self.step += 1;
        if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
            info!("step {} loss {:.5} photo {:.5} mask {:.5} flow {:?} cse {:?}", log.step, log.loss, log.photo, log.mask, log.flow, log.cse);
        } else {
            debug!("step {} loss {:.5}", log.step, log.loss);
        }
        Ok(log)
    }

    /// Run `steps` steps, drawing the scene for each from `scenes` in turn
    /// by the run's random stream.
    pub fn train(&mut self, scenes: &[PreparedScene], steps: usize) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let k = if scenes.len() == 1 { 0 } else { self.rng.gen_range(0..scenes.len()) };
            logs.push(self.train_step(&scenes[k])?);
        }
        Ok(logs)
    }

    pub fn render_view(&self, scene: &PreparedScene, target: usize, sources: &[usize]) -> Result<RenderedView> {
        render_view(&self.model, &self.store, &self.cfg, scene, target, sources)
    }
}

/// Rendered target view; arrays are channel-major.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]`
    pub image: Vec<f64>,
    /// `[H, W]`
    pub mask: Vec<f64>,
    /// `[D, H, W]`
    pub cse: Option<Vec<f64>>,
    /// `[H, W]` expected depth.
    pub depth: Vec<f64>,
}

struct Chunk {
    color: Vec<f64>,
    mask: Vec<f64>,
    cse: Option<Vec<f64>>,
    depth: Vec<f64>,
    offsets: Option<Vec<f64>>,
    weights: Vec<f64>,
    points: Vec<nalgebra::Vector3<f64>>,
}

fn run_chunk<T: Real>(model: &TrackerNerf, p: &Bound<T>, cfg: &TrainConfig, camera: &Camera, t_tgt: f64, bounds: (f64, f64), feats: &[ViewFeatures<T>], pixels: &[(usize, usize)]) -> Result<Chunk> {
    let (samples, sb) = samples_for(camera, pixels, bounds, cfg.samples, None)?;
    let out = model.forward(p, &sb, feats, t_tgt)?;
    let r = composite_predictions(&out.pred, &samples)?;
    let f = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    Ok(Chunk {
        color: f(&r.color),
        mask: f(&r.mask),
        cse: r.cse.as_ref().map(f),
        depth: r.depth.clone(),
        offsets: out.offsets.as_ref().map(f),
        weights: f(&r.weights),
        points: sb.points,
    })
}

fn render_pixels<T: Real>(model: &TrackerNerf, store: &ParamStore<T>, cfg: &TrainConfig, scene: &PreparedScene, target: usize, sources: &[usize], pixels: &[(usize, usize)]) -> Result<Vec<Chunk>> {
    let p = store.bind(None);
    let src: Vec<&SourceView> = sources.iter().map(|&k| &scene.views[k]).collect();
    let feats = model.encode(&p, &src)?;
    let frame = &scene.ds.frames[target];
    let bounds = scene.bounds[target];
    let chunks: Vec<&[(usize, usize)]> = pixels.chunks(cfg.eval_chunk).collect();
    let one = |c: &&[(usize, usize)]| run_chunk(model, &p, cfg, &frame.camera, frame.timestamp, bounds, &feats, c);
    #[cfg(feature = "parallel")]
    if Exec::current() == Exec::Parallel {
        use rayon::prelude::*;
        return chunks.par_iter().map(one).collect();
    }
    let _ = Exec::current();
    chunks.iter().map(one).collect()
}

/// Render every pixel of `target` conditioned on `sources`, without a tape.
pub fn render_view<T: Real>(model: &TrackerNerf, store: &ParamStore<T>, cfg: &TrainConfig, scene: &PreparedScene, target: usize, sources: &[usize]) -> Result<RenderedView> {
    let (h, w) = (scene.ds.height, scene.ds.width);
    if target >= scene.ds.num_frames() || sources.iter().any(|&k| k >= scene.ds.num_frames()) {
        return Err(CoreError::InvalidArgument(format!("frame index out of range for {} frames", scene.ds.num_frames())));
    }
    let pixels: Vec<(usize, usize)> = (0..h * w).map(|px| (px % w, px / w)).collect();
    let chunks = render_pixels(model, store, cfg, scene, target, sources, &pixels)?;
    let hw = h * w;
    let mut out = RenderedView { height: h, width: w, image: vec![0.0; 3 * hw], mask: Vec::with_capacity(hw), cse: None, depth: Vec::with_capacity(hw) };
    let mut cse_rows: Vec<f64> = Vec::new();
    let mut px = 0;
    for c in &chunks {
        let n = c.mask.len();
        for i in 0..n {
            for ch in 0..3 {
                out.image[ch * hw + px + i] = c.color[i * 3 + ch];
            }
        }
        out.mask.extend_from_slice(&c.mask);
        out.depth.extend_from_slice(&c.depth);
        if let Some(cs) = &c.cse {
            cse_rows.extend_from_slice(cs);
        }
        px += n;
    }
    if !cse_rows.is_empty() {
        let d = cse_rows.len() / hw;
        let mut img = vec![0.0; d * hw];
        for i in 0..hw {
            for ch in 0..d {
                img[ch * hw + i] = cse_rows[i * d + ch];
            }
        }
        out.cse = Some(img);
    }
    Ok(out)
}

/// Mean distance between predicted offsets and true scene flow over ray
/// points whose rendering weight exceeds `min_weight`, on foreground pixels
/// of `frames` (every `stride`-th such pixel). Returns the mean and the
/// number of (point, view) pairs.
pub fn offset_error<T: Real>(
    model: &TrackerNerf,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    scene: &PreparedScene,
    frames: &[usize],
    n_src: usize,
    stride: usize,
    min_weight: f64,
) -> Result<(f64, usize)> {
    let gt = scene.scene.as_ref().ok_or_else(|| CoreError::Data("offset error needs a synthetic scene".into()))?;
    let (h, w) = (scene.ds.height, scene.ds.width);
    let (mut total, mut count) = (0.0, 0usize);
    for &k in frames {
        let sources = scene.split.spread_sources(k, n_src)?;
        let mask = &scene.ds.frames[k].mask;
        let pixels: Vec<(usize, usize)> = (0..h * w).filter(|&px| mask[px] >= 0.5).step_by(stride.max(1)).map(|px| (px % w, px / w)).collect();
        if pixels.is_empty() {
            continue;
        }
        let t_tgt = scene.ds.frames[k].timestamp;
        let v = sources.len();
        for c in render_pixels(model, store, cfg, scene, k, &sources, &pixels)? {
            for (j, x) in c.points.iter().enumerate() {
                if c.weights[j] <= min_weight {
                    continue;
                }
                for (i, &src) in sources.iter().enumerate() {
                    let flow = gt.gt_scene_flow(x, t_tgt, scene.ds.frames[src].timestamp);
                    let pred = c.offsets.as_ref().map_or([0.0; 3], |o| {
                        let b = (j * v + i) * 3;
                        [o[b], o[b + 1], o[b + 2]]
                    });
                    total += ((pred[0] - flow.x).powi(2) + (pred[1] - flow.y).powi(2) + (pred[2] - flow.z).powi(2)).sqrt();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(CoreError::Data("no high-weight points for the offset error".into()));
    }
    Ok((total / count as f64, count))
}

/// Mean cosine similarity between rendered and true embeddings over the
/// true foreground of `frames`.
pub fn cse_cosine<T: Real>(model: &TrackerNerf, store: &ParamStore<T>, cfg: &TrainConfig, scene: &PreparedScene, frames: &[usize], n_src: usize) -> Result<f64> {
    let hw = scene.ds.height * scene.ds.width;
    let (mut total, mut count) = (0.0, 0usize);
    for &k in frames {
        let sources = scene.split.spread_sources(k, n_src)?;
        let view = render_view(model, store, cfg, scene, k, &sources)?;
        let frame = &scene.ds.frames[k];
        let (Some(pred), Some(gt)) = (&view.cse, &frame.cse) else {
            return Err(CoreError::Data("embeddings missing from the model or the dataset".into()));
        };
        let d = gt.len() / hw;
        for px in 0..hw {
            if frame.mask[px] < 0.5 {
                continue;
            }
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for c in 0..d {
                let (a, b) = (pred[c * hw + px], gt[c * hw + px] as f64);
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            total += if na > 0.0 && nb > 0.0 { dot / (na.sqrt() * nb.sqrt()) } else { 0.0 };
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::Data("no foreground pixels for the embedding similarity".into()));
    }
    Ok(total / count as f64)
}

