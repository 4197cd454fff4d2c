//! On-disk scene datasets: a `manifest.json` plus `.ten` arrays.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trackerf_tensor::ten::{TenArray, TenData};

use crate::error::{CoreError, Result};
use crate::geometry::{Camera, CameraRecord};
use crate::losses::{FlowPair, FlowProvider};
use crate::masktrack::{save_candidates, CandidateSet, FrameCandidates};
use crate::synth::{candidate_masks, gt_optical_flow, AnalyticFlow, BoundingSphere, CandidateConfig, Scene, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cse: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    pub camera: CameraRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowPairRecord {
    pub tgt: usize,
    pub src: usize,
    pub fwd: String,
    pub bwd: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occl: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scene_id: String,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub bounding_sphere: BoundingSphere,
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub flow_pairs: Vec<FlowPairRecord>,
    /// Generator parameters of synthetic scenes; enables exact flow between any two frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]` in `[0, 1]`.
    pub mask: Vec<f32>,
    /// `[D_cse, H, W]`
    pub cse: Option<Vec<f32>>,
    /// `[H, W]` expected distance along each pixel ray.
    pub depth: Option<Vec<f32>>,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredPair {
    pub tgt: usize,
    pub src: usize,
    pub pair: FlowPair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub scene_id: String,
    pub height: usize,
    pub width: usize,
    pub sphere: BoundingSphere,
    pub frames: Vec<Frame>,
    pub flow_pairs: Vec<StoredPair>,
    pub synth: Option<SceneSpec>,
}

fn round32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

impl SceneDataset {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Embedding channels, 0 when frames carry none.
    pub fn cse_dim(&self) -> usize {
        let hw = self.height * self.width;
        self.frames.first().and_then(|f| f.cse.as_ref()).map_or(0, |c| c.len() / hw)
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    /// Render a synthetic scene into an in-memory dataset with consecutive
    /// flow pairs.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let n = scene.num_frames();
        let renders = render_all(scene)?;
        let frames = renders
            .iter()
            .enumerate()
            .map(|(k, r)| Frame {
                index: k,
                timestamp: scene.timestamps[k],
                image: round32(&r.image),
                mask: round32(&r.mask),
                cse: Some(round32(&r.cse)),
                depth: Some(round32(&r.depth)),
                camera: scene.cameras[k].clone(),
            })
            .collect::<Vec<_>>();
        // flows are computed from the stored (rounded) depth so that a loaded
        // dataset reproduces them exactly
        let depth: Vec<Vec<f64>> = frames.iter().map(|f| widen(f.depth.as_ref().unwrap())).collect();
        let mask: Vec<Vec<f64>> = frames.iter().map(|f| widen(&f.mask)).collect();
        let mut flow_pairs = Vec::new();
        for k in 0..n.saturating_sub(1) {
            let mut pair = gt_optical_flow(scene, k, k + 1, &depth, &mask)?;
            pair.fwd = widen(&round32(&pair.fwd));
            pair.bwd = widen(&round32(&pair.bwd));
            flow_pairs.push(StoredPair { tgt: k, src: k + 1, pair });
        }
        Ok(Self {
            scene_id: scene.spec.scene_id.clone(),
            height: scene.spec.height,
            width: scene.spec.width,
            sphere: scene.sphere,
            frames,
            flow_pairs,
            synth: Some(scene.spec.clone()),
        })
    }

    /// Flow between any two frames: exact when the generator is known,
    /// otherwise only the stored pairs are available.
    pub fn flow_provider(&self) -> Result<Box<dyn FlowProvider + '_>> {
        if let Some(spec) = &self.synth {
            let scene = Scene::new(spec.clone())?;
            if scene.num_frames() != self.num_frames() {
                return Err(CoreError::Data("generator spec does not match the frame count".into()));
            }
            let depth = self
                .frames
                .iter()
                .map(|f| f.depth.as_ref().map(|d| widen(d)).ok_or_else(|| CoreError::Data(format!("frame {} has no depth", f.index))))
                .collect::<Result<Vec<_>>>()?;
            let mask = self.frames.iter().map(|f| widen(&f.mask)).collect();
            return Ok(Box::new(AnalyticFlow::new(scene, depth, mask)?));
        }
        Ok(Box::new(StoredFlow { pairs: self.flow_pairs.iter().map(|p| ((p.tgt, p.src), &p.pair)).collect() }))
    }

    /// Write arrays and manifest under `dir`; also writes PPM previews.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["frames", "flows", "previews"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| CoreError::io(&p, e))?;
        }
        let (h, w) = (self.height, self.width);
        let d = self.cse_dim();
        let mut frames = Vec::new();
        for f in &self.frames {
            let stem = format!("frames/{:04}", f.index);
            let image = format!("{stem}_image.ten");
            let mask = format!("{stem}_mask.ten");
            write_ten(dir, &image, TenArray::from_values(vec![3, h, w], &f.image))?;
            write_ten(dir, &mask, TenArray::from_values(vec![h, w], &f.mask))?;
            let cse = f
                .cse
                .as_ref()
                .map(|c| {
                    let name = format!("{stem}_cse.ten");
                    write_ten(dir, &name, TenArray::from_values(vec![d, h, w], c)).map(|_| name)
                })
                .transpose()?;
            let depth = f
                .depth
                .as_ref()
                .map(|c| {
                    let name = format!("{stem}_depth.ten");
                    write_ten(dir, &name, TenArray::from_values(vec![h, w], c)).map(|_| name)
                })
                .transpose()?;
            write_ppm(&dir.join(format!("previews/{:04}.ppm", f.index)), &f.image, h, w)?;
            frames.push(FrameRecord { index: f.index, timestamp: f.timestamp, image, mask, cse, depth, camera: f.camera.to_record() });
        }
        let mut flow_pairs = Vec::new();
        for p in &self.flow_pairs {
            let stem = format!("flows/{:04}_{:04}", p.tgt, p.src);
            let fwd = format!("{stem}_fwd.ten");
            let bwd = format!("{stem}_bwd.ten");
            write_ten(dir, &fwd, TenArray::from_values(vec![2, h, w], &round32(&p.pair.fwd)))?;
            write_ten(dir, &bwd, TenArray::from_values(vec![2, h, w], &round32(&p.pair.bwd)))?;
            let occl = p
                .pair
                .occluded
                .as_ref()
                .map(|o| {
                    let name = format!("{stem}_occl.ten");
                    write_ten(dir, &name, TenArray::from_u8(vec![h, w], o.clone())).map(|_| name)
                })
                .transpose()?;
            flow_pairs.push(FlowPairRecord { tgt: p.tgt, src: p.src, fwd, bwd, occl });
        }
        let manifest = Manifest {
            scene_id: self.scene_id.clone(),
            height: h,
            width: w,
            bounding_sphere: self.sphere,
            frames,
            flow_pairs,
            synth: self.synth.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))?;
        let (h, w) = (m.height, m.width);
        if h == 0 || w == 0 || m.frames.is_empty() {
            return Err(CoreError::Data(format!("{}: empty dataset", path.display())));
        }
        let mut frames = Vec::new();
        for (i, fr) in m.frames.iter().enumerate() {
            if fr.index != i {
                return Err(CoreError::Data(format!("frame records must be in index order (found {} at {i})", fr.index)));
            }
            let image = read_f32(dir, &fr.image, Some(&[3, h, w]))?;
            let mask = read_f32(dir, &fr.mask, Some(&[h, w]))?;
            let cse = fr.cse.as_ref().map(|c| read_f32(dir, c, None)).transpose()?;
            if let Some(c) = &cse {
                if c.len() % (h * w) != 0 || c.is_empty() {
                    return Err(CoreError::Data(format!("{}: embedding size does not match the image", fr.cse.as_ref().unwrap())));
                }
            }
            let depth = fr.depth.as_ref().map(|c| read_f32(dir, c, Some(&[h, w]))).transpose()?;
            let camera = Camera::from_record(&fr.camera, h, w)?;
            frames.push(Frame { index: fr.index, timestamp: fr.timestamp, image, mask, cse, depth, camera });
        }
        let mut flow_pairs = Vec::new();
        for p in &m.flow_pairs {
            if p.tgt >= frames.len() || p.src >= frames.len() {
                return Err(CoreError::Data(format!("flow pair ({}, {}) references a missing frame", p.tgt, p.src)));
            }
            let fwd = widen(&read_f32(dir, &p.fwd, Some(&[2, h, w]))?);
            let bwd = widen(&read_f32(dir, &p.bwd, Some(&[2, h, w]))?);
            let occluded = p
                .occl
                .as_ref()
                .map(|o| {
                    let arr = read_array(dir, o)?;
                    match arr.data {
                        TenData::U8(v) if arr.shape == [h, w] => Ok(v),
                        _ => Err(CoreError::Data(format!("{o}: expected [H,W] u8 occlusion labels"))),
                    }
                })
                .transpose()?;
            flow_pairs.push(StoredPair { tgt: p.tgt, src: p.src, pair: FlowPair { height: h, width: w, fwd, bwd, occluded } });
        }
        Ok(Self { scene_id: m.scene_id, height: h, width: w, sphere: m.bounding_sphere, frames, flow_pairs, synth: m.synth })
    }
}

fn render_all(scene: &Scene) -> Result<Vec<crate::synth::FrameRender>> {
    let n = scene.num_frames();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if trackerf_tensor::Exec::current() == trackerf_tensor::Exec::Parallel {
            return (0..n).into_par_iter().map(|k| scene.render_reference(k)).collect();
        }
    }
    (0..n).map(|k| scene.render_reference(k)).collect()
}

/// Stored flow pairs only.
pub struct StoredFlow<'a> {
    pairs: HashMap<(usize, usize), &'a FlowPair>,
}

impl FlowProvider for StoredFlow<'_> {
    fn pair(&self, tgt: usize, src: usize) -> Result<Cow<'_, FlowPair>> {
        self.pairs
            .get(&(tgt, src))
            .map(|p| Cow::Borrowed(*p))
            .ok_or_else(|| CoreError::Data(format!("no flow stored for frames {tgt} -> {src}")))
    }
}

fn write_ten(dir: &Path, name: &str, arr: TenArray) -> Result<()> {
    let path = dir.join(name);
    arr.write(&path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
}

fn read_array(dir: &Path, name: &str) -> Result<TenArray> {
    let path: PathBuf = dir.join(name);
    TenArray::read(&path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
}

fn read_f32(dir: &Path, name: &str, shape: Option<&[usize]>) -> Result<Vec<f32>> {
    let arr = read_array(dir, name)?;
    if let Some(s) = shape {
        if arr.shape != s {
            return Err(CoreError::Data(format!("{name}: expected shape {s:?}, found {:?}", arr.shape)));
        }
    }
    match arr.data {
        TenData::F32(v) => Ok(v),
        _ => Ok(arr.to_values::<f32>()),
    }
}

/// Binary PPM of a `[3, H, W]` image in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    let hw = h * w;
    if image.len() != 3 * hw {
        return Err(CoreError::DimensionMismatch(format!("ppm expects 3x{h}x{w} values, got {}", image.len())));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in 0..hw {
        for c in 0..3 {
            bytes.push((image[c * hw + px].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Render `spec` and write it, with candidate masks when requested, to `dir`.
pub fn write_dataset(spec: &SceneSpec, dir: &Path) -> Result<SceneDataset> {
    let scene = Scene::new(spec.clone())?;
    let ds = SceneDataset::from_scene(&scene)?;
    ds.save(dir)?;
    if spec.candidates > 0 {
        let (set, truth) = candidates_for(&ds, &CandidateConfig { count: spec.candidates, ..CandidateConfig::default() }, spec.seed);
        let cdir = dir.join("candidates");
        save_candidates(&set, &cdir)?;
        let path = cdir.join("truth.json");
        std::fs::write(&path, serde_json::to_string(&truth).map_err(|e| CoreError::json(&path, e))?).map_err(|e| CoreError::io(&path, e))?;
    }
    Ok(ds)
}

/// Candidate masks for every frame of a dataset and the true index of each.
pub fn candidates_for(ds: &SceneDataset, cfg: &CandidateConfig, seed: u64) -> (CandidateSet, Vec<usize>) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let mut truth = Vec::new();
    let frames = ds
        .frames
        .iter()
        .map(|f| {
            let c = candidate_masks(&widen(&f.mask), ds.height, ds.width, cfg, &mut rng);
            truth.push(c.true_index);
            FrameCandidates { masks: c.masks, confidence: Some(c.confidence) }
        })
        .collect();
    (CandidateSet { height: ds.height, width: ds.width, frames }, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SceneSpec {
        SceneSpec { frames: 4, height: 12, width: 12, render_samples: 48, candidates: 3, ..SceneSpec::default() }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_dataset(&tiny(), dir.path()).unwrap();
        let back = SceneDataset::load(dir.path()).unwrap();
        assert_eq!(back.frames.len(), ds.frames.len());
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            assert_eq!(a, b, "frame {}", a.index);
        }
        assert_eq!(back.flow_pairs, ds.flow_pairs);
        assert_eq!(back, ds);
        assert_eq!(ds.flow_pairs.len(), 3);
        assert_eq!(ds.cse_dim(), 8);
        assert!(dir.path().join("previews/0000.ppm").exists());
        assert!(dir.path().join("candidates/0003.ten").exists());
    }

    #[test]
    fn stored_and_analytic_flows_agree() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = write_dataset(&tiny(), dir.path()).unwrap();
        let analytic = ds.flow_provider().unwrap().pair(1, 2).unwrap().into_owned();
        let stored_pair = ds.flow_pairs[1].pair.clone();
        for (a, b) in analytic.fwd.iter().zip(&stored_pair.fwd) {
            assert!((a - b).abs() < 1e-4);
        }
        ds.synth = None;
        let p = ds.flow_provider().unwrap();
        assert!(p.pair(1, 2).is_ok());
        assert!(p.pair(0, 3).is_err());
    }

    #[test]
    fn malformed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.json"), r#"{"scene_id": "x", "H": 2}"#).unwrap();
        assert!(matches!(SceneDataset::load(dir.path()), Err(CoreError::Json { .. })));
        assert!(matches!(SceneDataset::load(&dir.path().join("missing")), Err(CoreError::Io { .. })));
    }
}
