use std::path::Path;
use std::time::Instant;

use log::info;
use trackerf_core::dataset::{write_dataset, write_ppm, SceneDataset};
use trackerf_core::masktrack::{load_candidates, viterbi_track};
use trackerf_core::synth::SceneSpec;
use trackerf_core::train::{
    config_hash, evaluate, load_checkpoint, render_view, run_fscr, run_ft, run_msssr, CheckpointIndex, MeanMetrics, MetricsReport, PreparedScene, Task, TrainConfig,
    FSCR_SWEEP,
};
use trackerf_tensor::ten::TenArray;
use trackerf_tensor::{Exec, Real};

use crate::config::{load_or_default, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{Cli, Command, EvalArgs, MasktrackArgs, Precision, RenderArgs, SplitArg, SynthArgs, TrainArgs};

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.sequential {
        Exec::set_current(Some(Exec::Sequential));
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => match a.precision {
            Precision::F32 => train::<f32>(a),
            Precision::F64 => train::<f64>(a),
        },
        Command::Render(a) => match checkpoint_precision(&a.ckpt)? {
            Precision::F32 => render::<f32>(a),
            Precision::F64 => render::<f64>(a),
        },
        Command::Eval(a) => match checkpoint_precision(&a.ckpt)? {
            Precision::F32 => eval::<f32>(a),
            Precision::F64 => eval::<f64>(a),
        },
        Command::Masktrack(a) => masktrack(a),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut spec: SceneSpec = load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
        spec.texture_seed = s.wrapping_add(1);
        spec.cse_seed = s.wrapping_add(2);
    }
    spec.validate()?;
    info!("rendering {} frames of {}x{} into {}", spec.frames, spec.height, spec.width, a.out.display());
    write_dataset(&spec, &a.out)?;
    RunConfig::new("synth", &spec).write(&a.out)
}

fn load_dataset(dir: &Path) -> CliResult<SceneDataset> {
    Ok(SceneDataset::load(dir)?)
}

fn train<T: Real>(a: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainConfig = load_or_default(a.config.as_deref())?;
    if let Some(t) = a.task {
        cfg.task = t.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    let data = a.data.iter().map(|d| load_dataset(d)).collect::<CliResult<Vec<_>>>()?;
    let out = a.out.as_path();
    match cfg.task {
        Task::Msssr => {
            let [ds] = data.as_slice() else { return Err(CliError::Usage("msssr takes exactly one --data directory".into())) };
            let (_, rep) = run_msssr::<T>(ds, &cfg, Some(out))?;
            info!("mean psnr {:.2} over {} unseen frames", rep.mean.psnr, rep.per_frame.len());
        }
        Task::Fscr => {
            let Some((test, train)) = data.split_last().filter(|(_, t)| !t.is_empty()) else {
                return Err(CliError::Usage("fscr takes training directories followed by one test directory".into()));
            };
            let (_, reps) = run_fscr::<T>(train, test, &cfg, &FSCR_SWEEP, Some(out))?;
            for r in &reps {
                info!("n_src {:?}: mean psnr {:.2}", r.n_src, r.mean.psnr);
            }
        }
        Task::Ft => {
            let Some(init) = a.init.as_deref() else { return Err(CliError::Usage("ft needs --init <checkpoint>".into())) };
            let [ds] = data.as_slice() else { return Err(CliError::Usage("ft takes exactly one --data directory".into())) };
            let (_, before, after) = run_ft::<T>(init, ds, &cfg, Some(out))?;
            info!("mean psnr {:.2} before, {:.2} after fine-tuning", before.mean.psnr, after.mean.psnr);
        }
    }
    RunConfig::new("train", &cfg).write(out)
}

fn checkpoint_precision(dir: &Path) -> CliResult<Precision> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    match index.params.values().next().map(|p| p.dtype.as_str()) {
        Some("f64") => Ok(Precision::F64),
        Some("f32") => Ok(Precision::F32),
        other => Err(CliError::Data(format!("{}: unsupported parameter dtype {other:?}", path.display()))),
    }
}

/// Evaluation settings from `--config`, with the model taken from the checkpoint.
fn eval_config(path: Option<&Path>, index: &CheckpointIndex, n_src: Option<usize>) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = load_or_default(path)?;
    cfg.model = index.model.clone();
    if let Some(n) = n_src {
        cfg.eval_n_src = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn check_dims(index: &CheckpointIndex, ds: &SceneDataset) -> CliResult<()> {
    if index.cse_dim != ds.cse_dim() && (index.model.cse_head || index.model.encoder.use_cse) {
        return Err(CliError::Data(format!("dimension mismatch: checkpoint embeds {} channels, dataset {}", index.cse_dim, ds.cse_dim())));
    }
    Ok(())
}

fn write_ten(path: &Path, shape: Vec<usize>, values: &[f64]) -> CliResult<()> {
    TenArray::from_values(shape, values).write(path).map_err(|e| io_err(path, e))
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// First three embedding channels, each stretched to [0, 1] and masked.
fn false_color(cse: &[f64], mask: &[f64], hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * hw];
    let d = cse.len() / hw;
    for c in 0..d.min(3) {
        let ch = &cse[c * hw..(c + 1) * hw];
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for px in 0..hw {
            out[c * hw + px] = ((ch[px] - lo) / span * mask[px]) as f32;
        }
    }
    out
}

fn render<T: Real>(a: RenderArgs) -> CliResult<()> {
    let ck = load_checkpoint::<T>(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_dims(&ck.index, &ds)?;
    let cfg = eval_config(a.config.as_deref(), &ck.index, a.n_src)?;
    let scene = PreparedScene::new(&ds)?;
    if a.frame >= ds.num_frames() {
        return Err(CliError::Usage(format!("frame {} out of range for {} frames", a.frame, ds.num_frames())));
    }
    let sources = scene.split.spread_sources(a.frame, cfg.eval_n_src)?;
    let view = render_view(&ck.model, &ck.store, &cfg, &scene, a.frame, &sources)?;
    let (h, w) = (view.height, view.width);
    let hw = h * w;
    let out = a.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let stem = format!("{:04}", a.frame);
    write_ppm(&out.join(format!("{stem}_color.ppm")), &to_f32(&view.image), h, w)?;
    let gray: Vec<f32> = (0..3).flat_map(|_| view.mask.iter().map(|v| *v as f32)).collect();
    write_ppm(&out.join(format!("{stem}_mask.ppm")), &gray, h, w)?;
    write_ten(&out.join(format!("{stem}_color.ten")), vec![3, h, w], &view.image)?;
    write_ten(&out.join(format!("{stem}_mask.ten")), vec![h, w], &view.mask)?;
    write_ten(&out.join(format!("{stem}_depth.ten")), vec![h, w], &view.depth)?;
    if let Some(cse) = &view.cse {
        write_ten(&out.join(format!("{stem}_cse.ten")), vec![cse.len() / hw, h, w], cse)?;
        write_ppm(&out.join(format!("{stem}_cse.ppm")), &false_color(cse, &view.mask, hw), h, w)?;
    }
    info!("rendered frame {} from sources {:?}", a.frame, sources);
    RunConfig::new("render", &cfg).write(out)
}

fn eval<T: Real>(a: EvalArgs) -> CliResult<()> {
    let start = Instant::now();
    let ck = load_checkpoint::<T>(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_dims(&ck.index, &ds)?;
    let cfg = eval_config(a.config.as_deref(), &ck.index, a.n_src)?;
    let scene = PreparedScene::new(&ds)?;
    let frames = match a.split {
        SplitArg::Unseen => scene.split.unseen_frames(),
        SplitArg::Known => scene.split.known_frames(),
    };
    if frames.is_empty() {
        return Err(CliError::Data(format!("{} has no {:?} frames", a.data.display(), a.split)));
    }
    let report = |task: Task, n_src: Option<usize>, n: usize| -> CliResult<MetricsReport> {
        let rows = evaluate(&ck.model, &ck.store, &cfg, &scene, &frames, n, None)?;
        Ok(MetricsReport {
            task,
            scene_id: ds.scene_id.clone(),
            n_src,
            mean: MeanMetrics::of(&rows),
            per_frame: rows,
            steps: ck.index.step,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: cfg.seed,
            config_hash: config_hash(&cfg),
        })
    };
    let out = a.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join("metrics.json");
    let text = if a.n_src_sweep {
        let reps = FSCR_SWEEP.iter().map(|&n| report(Task::Fscr, Some(n), n)).collect::<CliResult<Vec<_>>>()?;
        serde_json::to_string_pretty(&reps)
    } else {
        let rep = report(Task::Msssr, None, cfg.eval_n_src)?;
        info!("mean psnr {:.2} l1 {:.4} iou {:.3}", rep.mean.psnr, rep.mean.l1, rep.mean.iou);
        serde_json::to_string_pretty(&rep)
    }
    .expect("reports serialize");
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    RunConfig::new("eval", &cfg).write(out)
}

fn masktrack(a: MasktrackArgs) -> CliResult<()> {
    let set = load_candidates(&a.candidates)?;
    let chosen = viterbi_track(&set)?;
    let out = a.out.as_path();
    let masks = out.join("masks");
    std::fs::create_dir_all(&masks).map_err(|e| io_err(&masks, e))?;
    for (j, (&k, frame)) in chosen.iter().zip(&set.frames).enumerate() {
        write_ten(&masks.join(format!("{j:04}.ten")), vec![set.height, set.width], &frame.masks[k])?;
    }
    let path = out.join("indices.json");
    std::fs::write(&path, serde_json::to_string(&chosen).expect("indices serialize") + "\n").map_err(|e| io_err(&path, e))?;
    info!("tracked {} frames", chosen.len());
    Ok(())
}
