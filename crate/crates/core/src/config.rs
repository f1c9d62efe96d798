//! Pipeline configuration document.
//!
//! Every section and field is optional and falls back to its default;
//! unknown keys anywhere in the document are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gap::{WeightMode, DEFAULT_EPSILON};
use crate::loss::LossConfig;
use crate::model::TrainConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Weight sources by inverse domain gap; equal weights otherwise.
    pub similarity_weighting: bool,
    /// Weight each pixel's loss by the label-entropy weight; 1 otherwise.
    pub entropy_weighting: bool,
    pub weight_mode: WeightMode,
    /// Floor on the domain gap before inversion.
    pub epsilon: f64,
    /// Divides the weighted sum before the fusion softmax.
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            similarity_weighting: true,
            entropy_weighting: true,
            weight_mode: WeightMode::SumToOne,
            epsilon: DEFAULT_EPSILON,
            temperature: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "fusion temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed for scene generation, model initialization and shuffling.
    pub seed: u64,
    pub scenario: SynthConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Optional per-source mapping files overriding the generated ones.
    pub mappings: BTreeMap<String, PathBuf>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.fusion.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::Format {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    /// `load` when a path is given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(PipelineConfig::from_json_str("{}").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json_str(r#"{"sed": 1}"#).is_err());
        let err = PipelineConfig::from_json_str(r#"{"loss": {"alpah": 0.2}}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(PipelineConfig::from_json_str(r#"{"train": {"prototypes": {"t": 1}}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = PipelineConfig::from_json_str(
            r#"{"fusion": {"similarity_weighting": false, "weight_mode": "unnormalized"}, "loss": {"lambda_ent": 0.5}}"#,
        )
        .unwrap();
        assert!(!cfg.fusion.similarity_weighting);
        assert_eq!(cfg.fusion.weight_mode, WeightMode::Unnormalized);
        assert_eq!(cfg.loss.lambda_ent, 0.5);
        assert_eq!(cfg.loss.alpha, 0.1);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::from_json_str(r#"{"loss": {"label_clamp": [0.0, 1.0]}}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"train": {"period": 1}}"#).is_err());
        assert!(PipelineConfig::from_json_str(r#"{"fusion": {"temperature": 0}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json_str(&text).unwrap(), cfg);
    }
}
