//! The run configuration: one TOML file covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afpa::AfpaConfig;
use crate::corpus::CorpusConfig;
use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, ClassifierConfig};
use crate::tgram::TgramConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// False-positive-rate limit of the partial AUC.
    pub max_fpr: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { max_fpr: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dsp: DspConfig,
    pub tgram: TgramConfig,
    pub afpa: AfpaConfig,
    pub model: ClassifierConfig,
    pub trainer: TrainConfig,
    pub corpus: CorpusConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The effective configuration, every field spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::to_toml`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            dsp: self.dsp.clone(),
            tgram: self.tgram.clone(),
            afpa: self.afpa.clone(),
            classifier: self.model.clone(),
            use_afpa: self.trainer.use_afpa,
        }
    }

    /// Checks every section that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.dsp.filterbank()?;
        if self.dsp.clip_len() == 0 {
            return Err(Error::Config("dsp: clip must hold at least one sample".into()));
        }
        if self.afpa.heads == 0 || self.dsp.n_frames % self.afpa.heads != 0 {
            return Err(Error::Config(format!(
                "afpa: {} frames cannot be split into {} equal segments",
                self.dsp.n_frames, self.afpa.heads
            )));
        }
        self.trainer.validate()?;
        for spec in self.corpus.specs() {
            spec.validate(self.dsp.sample_rate)?;
        }
        if !(self.metrics.max_fpr > 0.0 && self.metrics.max_fpr <= 1.0) {
            return Err(Error::Config("metrics: max_fpr must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
