//! Scoring test clips with a trained model.

use rayon::prelude::*;

use crate::corpus::{Dataset, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::metrics::ScoreRecord;
use crate::model::Model;

/// Test clips of `data` in path order.
pub fn test_entries(data: &Dataset) -> Vec<&ManifestEntry> {
    data.entries().iter().filter(|e| e.split != Split::TrainNormal).collect()
}

/// Scores one clip against its claimed machine ID.
pub fn score_entry(model: &Model, data: &Dataset, entry: &ManifestEntry) -> Result<ScoreRecord> {
    let claimed = model
        .classes
        .get(&entry.machine_type, &entry.machine_id)
        .ok_or_else(|| Error::Data {
            path: entry.path(data.root()),
            detail: format!("machine {}/{} is unknown to the model", entry.machine_type, entry.machine_id),
        })?
        .class_index;
    let wave = data.load(entry)?;
    let score = model.score_with(&wave, &model.log_mel(&wave)?, claimed)?;
    Ok(ScoreRecord {
        clip_id: entry.clip_id().to_string(),
        machine_type: entry.machine_type.clone(),
        machine_id: entry.machine_id.clone(),
        label: entry.label,
        score,
    })
}

/// Scores every test clip; records come back in path order.
pub fn score_dataset(model: &Model, data: &Dataset) -> Result<Vec<ScoreRecord>> {
    test_entries(data)
        .par_iter()
        .map(|e| score_entry(model, data, e))
        .collect()
}
