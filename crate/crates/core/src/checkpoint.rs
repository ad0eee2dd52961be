//! Trained models on disk: `params.aft` plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{tensor_read, tensor_write};
use crate::error::{Error, Result};
use crate::model::{Architecture, ClassMap, FeatureStats, Model, ModelParams};
use crate::params::{load_named, ParamTree};

pub const PARAMS_FILE: &str = "params.aft";
pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub use_afpa: bool,
    pub architecture: Architecture,
    pub classes: ClassMap,
    pub feature_stats: FeatureStats,
    /// Hash of the run configuration that produced the model.
    pub config_hash: String,
    pub parameter_count: usize,
}

/// Writes `dir/params.aft` and `dir/manifest.json`, creating `dir`.
pub fn save(model: &Model, dir: &Path, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<(String, crate::tensor::Tensor)> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    tensor_write(dir.join(PARAMS_FILE), &entries)?;
    let manifest = CheckpointManifest {
        format: FORMAT,
        use_afpa: model.arch.use_afpa,
        architecture: model.arch.clone(),
        classes: model.classes.clone(),
        feature_stats: model.stats.clone(),
        config_hash: config_hash.to_string(),
        parameter_count: crate::params::count(&model.params),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if manifest.format != FORMAT {
        return Err(Error::Format {
            path,
            detail: format!("checkpoint format {} is not supported", manifest.format),
        });
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut arch = manifest.architecture.clone();
    arch.use_afpa = manifest.use_afpa;
    let mut params = ModelParams::init(&arch, manifest.classes.len(), 0)?;
    let path = dir.join(PARAMS_FILE);
    let entries = tensor_read(&path)?;
    load_named(&mut params, &entries).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if entries.len() != params.named().len() {
        return Err(Error::Format {
            path,
            detail: format!("{} tensors stored, model has {}", entries.len(), params.named().len()),
        });
    }
    let model = Model::new(arch, params, manifest.classes.clone(), manifest.feature_stats.clone())?;
    Ok((model, manifest))
}
