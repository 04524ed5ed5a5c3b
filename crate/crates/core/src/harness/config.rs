use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentationPolicy, DatasetSpec};
use crate::diffcore::SgdConfig;
use crate::error::{Error, Result};
use crate::loss::{HyperAggregation, LossConfig};
use crate::model::{StateKind, TriAugConfig};
use crate::ood::OdinConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            sgd: SgdConfig::default(),
            seed: 0,
            augmentation: AugmentationPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSettings {
    /// Clamped to the training-set size.
    pub k: usize,
    pub tpr_target: f64,
    pub parallel: bool,
    pub odin: OdinConfig,
    pub mahalanobis_shrinkage: f64,
}

impl Default for OodSettings {
    fn default() -> Self {
        Self {
            k: 1000,
            tpr_target: 0.95,
            parallel: false,
            odin: OdinConfig::default(),
            mahalanobis_shrinkage: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Replaces `model.states_enabled` when set.
    pub states_enabled: Option<[StateKind; 3]>,
    pub disable_hypersphere: bool,
    pub disable_prior_adjustment: bool,
    pub aggregation: HyperAggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Row label in result tables.
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: TriAugConfig,
    pub training: TrainingConfig,
    pub ood: OodSettings,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "triaug".into(),
            dataset: DatasetSpec::default(),
            model: TriAugConfig::default(),
            training: TrainingConfig::default(),
            ood: OodSettings::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ',', '\n']) {
            return Err(Error::Config(format!("unusable run name {:?}", self.name)));
        }
        self.dataset.validate()?;
        self.effective_model().validate()?;
        self.training.sgd.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.training.augmentation.validate()?;
        if self.training.epochs == 0 || self.training.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.ood.k == 0 {
            return Err(Error::Config("ood.k must be positive".into()));
        }
        if !(self.ood.tpr_target > 0.0 && self.ood.tpr_target <= 1.0) {
            return Err(Error::Config("ood.tpr_target must lie in (0, 1]".into()));
        }
        if !(self.ood.odin.temperature > 0.0 && self.ood.odin.epsilon >= 0.0) {
            return Err(Error::Config("ODIN needs temperature > 0 and epsilon >= 0".into()));
        }
        if !(self.ood.mahalanobis_shrinkage >= 0.0) {
            return Err(Error::Config("mahalanobis_shrinkage must be >= 0".into()));
        }
        Ok(())
    }

    /// Model config with the ablation override applied.
    pub fn effective_model(&self) -> TriAugConfig {
        let mut m = self.model.clone();
        if let Some(s) = self.ablation.states_enabled {
            m.states_enabled = s;
        }
        m
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            prior_adjustment: !self.ablation.disable_prior_adjustment,
            hypersphere: !self.ablation.disable_hypersphere,
            aggregation: self.ablation.aggregation,
        }
    }

    /// First 16 hex digits of the SHA-256 of the serialized config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// The branch-state ablation of this config: all clean, all mixup and
    /// clean + mix + reverse mix, named `s1x3`, `s2x3` and `ours`.
    pub fn ablation_variants(&self) -> Vec<ExperimentConfig> {
        [
            ("s1x3", [StateKind::Clean; 3]),
            ("s2x3", [StateKind::Mix; 3]),
            ("ours", [StateKind::Clean, StateKind::Mix, StateKind::Rmix]),
        ]
        .into_iter()
        .map(|(name, states)| {
            let mut c = self.clone();
            c.name = name.into();
            c.ablation.states_enabled = Some(states);
            c
        })
        .collect()
    }
}
