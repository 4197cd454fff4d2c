use trackerf_core::dataset::SceneDataset;
use trackerf_core::encoder::EncoderConfig;
use trackerf_core::nerformer::ModelConfig;
use trackerf_core::synth::{Scene, SceneSpec};
use trackerf_core::train::{evaluate, run_ft, run_msssr, PreparedScene, TrainConfig, Trainer};
use trackerf_tensor::Exec;

fn dataset() -> SceneDataset {
    let spec = SceneSpec { frames: 40, height: 16, width: 16, render_samples: 48, candidates: 0, ..SceneSpec::default() };
    SceneDataset::from_scene(&Scene::new(spec).unwrap()).unwrap()
}

fn config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig { rays: 32, samples: 8, n_src_min: 2, n_src_max: 4, eval_n_src: 3, eval_chunk: 64, steps, lr: 2e-3, seed: 4, log_every: 0, ..TrainConfig::default() };
    cfg.model = ModelConfig { d_model: 16, heads: 2, layers: 1, encoder: EncoderConfig { channels: [4, 8, 8], d_z: 8, use_cse: true }, ..ModelConfig::default() };
    cfg
}

fn params(t: &Trainer<f32>) -> Vec<Vec<f32>> {
    t.store.iter().map(|p| p.value.to_vec()).collect()
}

#[test]
fn windowed_loss_decreases() {
    let ds = dataset();
    let scene = PreparedScene::new(&ds).unwrap();
    let mut cfg = config(200);
    // the photometric and mask terms alone, which a short run can reduce
    cfg.loss.flow = 0.0;
    let mut t = Trainer::<f32>::new(&cfg, ds.cse_dim()).unwrap();
    let logs = t.train(std::slice::from_ref(&scene), 200).unwrap();
    let mean = |w: &[trackerf_core::train::StepLog]| w.iter().map(|l| l.loss).sum::<f64>() / w.len() as f64;
    let (first, last) = (mean(&logs[..50]), mean(&logs[150..]));
    assert!(last < first, "windowed loss {first} -> {last}");
}

#[test]
fn training_is_deterministic_across_runs_and_modes() {
    let ds = dataset();
    let scene = PreparedScene::new(&ds).unwrap();
    let cfg = config(6);
    let run = |exec: Exec| {
        Exec::set_current(Some(exec));
        let mut t = Trainer::<f32>::new(&cfg, ds.cse_dim()).unwrap();
        let logs = t.train(std::slice::from_ref(&scene), 6).unwrap();
        Exec::set_current(None);
        (logs, params(&t))
    };
    let a = run(Exec::Sequential);
    let b = run(Exec::Sequential);
    let c = run(Exec::Parallel);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn evaluation_leaves_parameters_and_optimizer_untouched() {
    let ds = dataset();
    let scene = PreparedScene::new(&ds).unwrap();
    let cfg = config(3);
    let mut t = Trainer::<f32>::new(&cfg, ds.cse_dim()).unwrap();
    t.train(std::slice::from_ref(&scene), 3).unwrap();
    let before = params(&t);
    let adam_t = t.adam.t;
    let unseen = scene.split.unseen_frames();
    let first = evaluate(&t.model, &t.store, &cfg, &scene, &unseen[..3], 3, None).unwrap();
    let again = evaluate(&t.model, &t.store, &cfg, &scene, &unseen[..3], 3, None).unwrap();
    assert_eq!(params(&t), before);
    assert_eq!((t.adam.t, t.step), (adam_t, 3));
    assert_eq!(first, again);
}

#[test]
fn fine_tuning_starts_from_the_checkpoint_metrics() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(4);
    let (_, rep) = run_msssr::<f32>(&ds, &cfg, Some(dir.path())).unwrap();
    let (t, before, after) = run_ft::<f32>(&dir.path().join("checkpoint"), &ds, &config(2), None).unwrap();
    assert_eq!(before.per_frame, rep.per_frame);
    assert_eq!(before.steps, 0);
    assert_eq!((t.step, after.steps), (2, 2));
}
