//! Configuration merging: defaults, then a JSON file, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use trackerf_core::train::config_hash;

use crate::error::{CliError, CliResult};

/// Parse `path` over the type's defaults, rejecting unknown keys.
pub fn load_or_default<C: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// The merged configuration of a run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub config_hash: String,
}

impl<'a, C: Serialize> RunConfig<'a, C> {
    pub fn new(command: &'a str, config: &'a C) -> Self {
        Self { command, config, config_hash: config_hash(config) }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        let path = dir.join("run.json");
        let mut text = serde_json::to_string_pretty(self).expect("configs serialize");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use trackerf_core::synth::SceneSpec;
    use trackerf_core::train::TrainConfig;

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"steps": 7, "model": {"d_model": 16}}"#).unwrap();
        let cfg: TrainConfig = load_or_default(Some(&path)).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.lr, 5e-4);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"stepz": 7}"#).unwrap();
        assert!(matches!(load_or_default::<TrainConfig>(Some(&path)), Err(CliError::Usage(_))));
        std::fs::write(&path, r#"{"frames": 3, "colour": 1}"#).unwrap();
        assert!(matches!(load_or_default::<SceneSpec>(Some(&path)), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_file_is_a_data_error() {
        assert!(matches!(load_or_default::<TrainConfig>(Some(Path::new("/nonexistent/c.json"))), Err(CliError::Data(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { steps: 1, ..TrainConfig::default() };
        assert_eq!(RunConfig::new("train", &a).config_hash, config_hash(&a));
        assert_ne!(RunConfig::new("train", &a).config_hash, RunConfig::new("train", &b).config_hash);
    }
}
