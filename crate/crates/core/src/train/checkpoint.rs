use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trackerf_tensor::ten::TenArray;
use trackerf_tensor::Real;

use crate::error::{CoreError, Result};
use crate::nerformer::{ModelConfig, TrackerNerf};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// `index.json` of a checkpoint directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub step: usize,
    pub model: ModelConfig,
    pub cse_dim: usize,
    pub params: BTreeMap<String, CheckpointEntry>,
}

pub struct Checkpoint<T: Real> {
    pub index: CheckpointIndex,
    pub model: TrackerNerf,
    pub store: ParamStore<T>,
}

/// Write every parameter as `<name>.ten` plus the index.
pub fn save_checkpoint<T: Real>(dir: &Path, model: &TrackerNerf, store: &ParamStore<T>, step: usize) -> Result<CheckpointIndex> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut params = BTreeMap::new();
    for p in store.iter() {
        let file = format!("{}.ten", p.name);
        let path = dir.join(&file);
        TenArray::from_tensor(&p.value).write(&path).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))?;
        params.insert(p.name.clone(), CheckpointEntry { file, shape: p.value.shape().to_vec(), dtype: T::DTYPE.name().to_string() });
    }
    let index = CheckpointIndex { step, model: model.cfg.clone(), cse_dim: model.cse_dim, params };
    let path = dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index).map_err(|e| CoreError::json(&path, e))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(index)
}

/// Rebuild the model described by the index and fill in the stored values.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))?;
    let mut store = ParamStore::new();
    // initial values are replaced below
    let model = TrackerNerf::new(&mut store, &index.model, index.cse_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
    if store.len() != index.params.len() {
        return Err(CoreError::Data(format!("checkpoint has {} parameters, model expects {}", index.params.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.param(id).name.clone();
        let entry = index.params.get(&name).ok_or_else(|| CoreError::Data(format!("checkpoint lacks parameter {name}")))?;
        let file = dir.join(&entry.file);
        let arr = TenArray::read(&file).map_err(|e| CoreError::Data(format!("{}: {e}", file.display())))?;
        if arr.shape != store.value(id).shape() || arr.shape != entry.shape {
            return Err(CoreError::DimensionMismatch(format!("parameter {name}: stored {:?}, model {:?}", arr.shape, store.value(id).shape())));
        }
        store.set_value(id, arr.to_tensor()?)?;
    }
    Ok(Checkpoint { index, model, store })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn roundtrip_is_exact_and_bytewise_stable() {
        let cfg = ModelConfig { d_model: 8, heads: 2, layers: 1, encoder: EncoderConfig { channels: [4, 4, 4], d_z: 4, use_cse: true }, ..ModelConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let model = TrackerNerf::new(&mut store, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_checkpoint(a.path(), &model, &store, 12).unwrap();
        let ck = load_checkpoint::<f32>(a.path()).unwrap();
        assert_eq!(ck.index.step, 12);
        for (x, y) in store.iter().zip(ck.store.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data());
        }
        save_checkpoint(b.path(), &ck.model, &ck.store, 12).unwrap();
        for name in ["index.json", "heads.sigma.w.ten", "encoder.conv0.w.ten"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        std::fs::remove_file(a.path().join("heads.sigma.w.ten")).unwrap();
        assert!(load_checkpoint::<f32>(a.path()).is_err());
    }
}
