//! Versioned JSON checkpoints: configuration echo, named parameter arrays and
//! the trainer's shuffling stream.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{FlexModel, ModelConfig};
use crate::error::{FlexError, Result};
use crate::fsutil::{read_file, write_atomic};
use crate::params::ParamStore;
use crate::protocols::{ProtocolId, TrainedModel};
use crate::trainer::{RngState, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "flexfas-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the run configuration that produced this checkpoint.
    pub config_hash: String,
    pub label: String,
    pub protocols: Vec<ProtocolId>,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub params: ParamStore,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_trained(t: &TrainedModel, trainer: &TrainConfig, config_hash: &str) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            label: t.label.clone(),
            protocols: t.protocols.clone(),
            model: *t.model.config(),
            trainer: *trainer,
            params: t.model.params().clone(),
            rng: t.log.rng.clone(),
        }
    }

    pub fn to_model(&self) -> Result<FlexModel> {
        FlexModel::from_parts(self.model, self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let format = value.get("format").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(CHECKPOINT_FORMAT) {
            return Err(FlexError::CheckpointIncompatible(format!(
                "{} is not a {CHECKPOINT_FORMAT} file",
                path.display()
            )));
        }
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(FlexError::CheckpointIncompatible(format!(
                "version {version:?}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        serde_json::from_value(value)
            .map_err(|e| FlexError::CheckpointIncompatible(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::Arch;
    use crate::trainer::TrainLog;
    use rand::SeedableRng;

    fn trained() -> TrainedModel {
        let model =
            FlexModel::new(ModelConfig { feature_channels: 4, image_size: (8, 8), ..ModelConfig::new(Arch::ToyCnn) })
                .unwrap();
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        TrainedModel {
            label: "unified".into(),
            protocols: ProtocolId::ALL.to_vec(),
            model,
            log: TrainLog { epoch_loss: vec![0.7], epoch_lr: vec![1e-3], steps: 1, rng: RngState::capture(&rng) },
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt.json");
        let t = trained();
        let ck = Checkpoint::from_trained(&t, &TrainConfig::default(), "abc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), t.model);
    }

    #[test]
    fn wrong_version_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut ck = Checkpoint::from_trained(&trained(), &TrainConfig::default(), "abc");
        ck.version = 99;
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap_err().code(), "CHECKPOINT_INCOMPATIBLE");
        std::fs::write(&path, b"{\"hello\": 1}").unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap_err().code(), "CHECKPOINT_INCOMPATIBLE");
    }

    #[test]
    fn mismatched_layout_is_incompatible() {
        let mut ck = Checkpoint::from_trained(&trained(), &TrainConfig::default(), "abc");
        ck.model.feature_channels = 6;
        assert_eq!(ck.to_model().unwrap_err().code(), "CHECKPOINT_INCOMPATIBLE");
    }
}
