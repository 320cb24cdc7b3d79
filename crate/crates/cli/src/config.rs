//! JSON run configuration for `bpp train` and `bpp params`.

use std::path::Path;

use bpp_core::train::TrainConfig;
use bpp_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Top-level config file. Every key is optional; unknown keys are rejected.
///
/// ```json
/// {
///   "train": { "bpp": { "levels": 3, "depth": 4, "channels": [32, 16, 8] },
///              "steps": 2000, "batch": 8, "patch": 32, "lr0": 0.01, "synthesis_scale": 0.05 },
///   "dataset": { "factors": [2], "val_fraction": 0.1 }
/// }
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Overrides the factors recorded by `make-dataset`.
    pub factors: Option<Vec<usize>>,
    pub val_fraction: Option<f64>,
}

/// Written by `make-dataset` next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub factors: Vec<usize>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"bpp": {"depht": 2}}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"dataset": {"factors": [2, 4]}}"#).unwrap();
        assert_eq!(c.dataset.factors, Some(vec![2, 4]));
    }
}
