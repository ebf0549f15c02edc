//! TOML run configuration shared by every CLI subcommand.
//!
//! ```toml
//! seed = 7                      # optional; overrides every seed below
//! mode = "unified"              # or "separate"
//! protocols = ["P1", "P2", "P3", "P4"]
//! threshold_rule = "auto"       # or "eer_on_validation" / "fixed_0_5"
//! output_dir = "runs/demo"
//!
//! [data]
//! synth_dir = "data"            # where `flexfas synth` writes
//! train_manifests = ["data/manifest.tsv"]
//! test_manifest = "data/manifest.tsv"
//!
//! [synth]                       # see SynthConfig
//! [model]                       # see ModelConfig
//! arch = "toy_cnn"
//! [trainer]                     # see TrainConfig
//! [trainer.dropmodal]
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{Arch, ModelConfig};
use crate::error::{FlexError, Result};
use crate::fsutil::{read_to_string, sha256_hex};
use crate::metrics::ThresholdRule;
use crate::protocols::{threshold_rule_for, ProtocolId, ProtocolSpec, RunMode, RunPlan};
use crate::synthgen::SynthConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "FLEXFAS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdChoice {
    /// EER on validation when every test dataset was trained on, else 0.5.
    Auto,
    EerOnValidation,
    #[serde(rename = "fixed_0_5")]
    Fixed05,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synth_dir: Option<PathBuf>,
    #[serde(default)]
    pub train_manifests: Vec<PathBuf>,
    /// Defaults to the training manifests.
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
}

fn d_mode() -> RunMode {
    RunMode::Unified
}
fn d_protocols() -> Vec<ProtocolId> {
    ProtocolId::ALL.to_vec()
}
fn d_rule() -> ThresholdChoice {
    ThresholdChoice::Auto
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}
fn d_model() -> ModelConfig {
    ModelConfig::new(Arch::ToyCnn)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "d_mode")]
    pub mode: RunMode,
    #[serde(default = "d_protocols")]
    pub protocols: Vec<ProtocolId>,
    #[serde(default = "d_rule")]
    pub threshold_rule: ThresholdChoice,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default = "d_model")]
    pub model: ModelConfig,
    /// Defaults depend on `model.arch`.
    #[serde(default)]
    pub trainer: Option<TrainConfig>,
}

/// A parsed, seed-resolved and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub file: RunConfigFile,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
    pub hash: String,
}

/// Maps a TOML error to CONFIG_ERROR, naming the offending key when known.
fn toml_error(e: toml::de::Error) -> FlexError {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
        .unwrap_or("<document>")
        .to_string();
    FlexError::Config { key, message: e.to_string().trim().to_string() }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(toml_error)
    }

    pub fn trainer(&self) -> TrainConfig {
        self.trainer.unwrap_or_else(|| TrainConfig::for_arch(self.model.arch))
    }

    pub fn synth(&self) -> SynthConfig {
        self.synth.clone().unwrap_or_default()
    }

    /// Copies `seed` into the synth, model, trainer and DropModal seeds.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        let mut synth = self.synth();
        synth.seed = seed;
        self.synth = Some(synth);
        self.model.seed = seed;
        let mut trainer = self.trainer();
        trainer.seed = seed;
        if let Some(d) = trainer.dropmodal.as_mut() {
            d.seed = seed;
        }
        self.trainer = Some(trainer);
    }

    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() {
            return Err(FlexError::config("protocols", "at least one protocol is required"));
        }
        let unique: BTreeSet<_> = self.protocols.iter().collect();
        if unique.len() != self.protocols.len() {
            return Err(FlexError::config("protocols", "duplicate protocol"));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.mode == RunMode::Unified && self.model.modalities != crate::sample::ModalitySet::ALL {
            return Err(FlexError::config("model.modalities", "the unified model has all three branches"));
        }
        self.model.validate()?;
        self.trainer().validate()
    }

    /// Stable hash of the effective configuration (defaults filled in).
    pub fn hash(&self) -> Result<String> {
        let mut effective = self.clone();
        effective.trainer = Some(self.trainer());
        effective.synth = Some(self.synth());
        Ok(sha256_hex(&serde_json::to_vec(&effective)?))
    }
}

impl RunConfig {
    /// Reads `path`; the seed override (flag, then FLEXFAS_SEED) applies before
    /// validation and hashing.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = read_to_string(path)?;
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                FlexError::config(SEED_ENV, format!("`{v}` is not a non-negative integer"))
            })?),
            Err(_) => None,
        };
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, base_dir, seed_override.or(env_seed))
    }

    pub fn from_text(text: &str, base_dir: PathBuf, seed: Option<u64>) -> Result<Self> {
        let mut file = RunConfigFile::parse(text)?;
        if let Some(s) = seed.or(file.seed) {
            file.apply_seed(s);
        }
        file.validate()?;
        let hash = file.hash()?;
        Ok(Self { file, base_dir, hash })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.file.output_dir)
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.file.data.as_ref().ok_or_else(|| FlexError::config("data", "section is required"))
    }

    pub fn train_manifests(&self) -> Result<Vec<PathBuf>> {
        let d = self.data()?;
        if d.train_manifests.is_empty() {
            return Err(FlexError::config("data.train_manifests", "at least one manifest is required"));
        }
        Ok(d.train_manifests.iter().map(|p| self.resolve(p)).collect())
    }

    /// Test manifest; the first training manifest when unset.
    pub fn test_manifest(&self) -> Result<PathBuf> {
        match &self.data()?.test_manifest {
            Some(p) => Ok(self.resolve(p)),
            None => Ok(self.train_manifests()?.remove(0)),
        }
    }

    pub fn synth_dir(&self) -> Result<PathBuf> {
        let d = self.data()?;
        d.synth_dir
            .as_ref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| FlexError::config("data.synth_dir", "required by `synth`"))
    }

    pub fn threshold_rule(&self, train_ids: &BTreeSet<String>, test_ids: &BTreeSet<String>) -> ThresholdRule {
        match self.file.threshold_rule {
            ThresholdChoice::Auto => threshold_rule_for(train_ids, test_ids),
            ThresholdChoice::EerOnValidation => ThresholdRule::EerOnValidation,
            ThresholdChoice::Fixed05 => ThresholdRule::Fixed05,
        }
    }

    pub fn plan(&self, rule: ThresholdRule) -> RunPlan {
        RunPlan {
            mode: self.file.mode,
            protocols: self.file.protocols.iter().map(|id| ProtocolSpec::new(*id, rule)).collect(),
            model: self.file.model,
            trainer: self.file.trainer(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
        mode = "separate"
        protocols = ["P1", "P4"]
        output_dir = "out"
        [data]
        train_manifests = ["d/manifest.tsv"]
        [model]
        arch = "toy_cnn"
        feature_channels = 8
        [trainer]
        epochs = 3
        lr_halving_epoch = 2
        [trainer.dropmodal]
        p_depth = 0.5
    "#;

    #[test]
    fn parses_and_resolves_paths() {
        let c = RunConfig::from_text(GOOD, PathBuf::from("/base"), None).unwrap();
        assert_eq!(c.file.mode, RunMode::Separate);
        assert_eq!(c.output_dir(), PathBuf::from("/base/out"));
        assert_eq!(c.test_manifest().unwrap(), PathBuf::from("/base/d/manifest.tsv"));
        assert_eq!(c.file.trainer().dropmodal.unwrap().p_ir, 0.3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("[model]\narch = \"toy_cnn\"\nwidth = 3\n", PathBuf::new(), None).unwrap_err();
        assert_eq!(err.code(), "CONFIG_ERROR");
        assert!(err.to_string().contains("`width`"), "{err}");
    }

    #[test]
    fn invalid_value_is_named() {
        let text = GOOD.replace("epochs = 3", "epochs = 0");
        let err = RunConfig::from_text(&text, PathBuf::new(), None).unwrap_err();
        assert!(err.to_string().contains("trainer.epochs"), "{err}");
        let text = GOOD.replace("p_depth = 0.5", "p_depth = 1.5");
        let err = RunConfig::from_text(&text, PathBuf::new(), None).unwrap_err();
        assert!(err.to_string().contains("dropmodal.p_depth"), "{err}");
    }

    #[test]
    fn seed_override_reaches_every_component() {
        let c = RunConfig::from_text(GOOD, PathBuf::new(), Some(42)).unwrap();
        let t = c.file.trainer();
        assert_eq!((c.file.model.seed, t.seed, t.dropmodal.unwrap().seed, c.file.synth().seed), (42, 42, 42, 42));
        let base = RunConfig::from_text(GOOD, PathBuf::new(), None).unwrap();
        assert_ne!(base.hash, c.hash);
        assert_eq!(base.hash, RunConfig::from_text(GOOD, PathBuf::from("/elsewhere"), None).unwrap().hash);
    }

    #[test]
    fn vit_gets_transformer_defaults() {
        let c = RunConfig::from_text("[model]\narch = \"toy_vit\"\n", PathBuf::new(), None).unwrap();
        let t = c.file.trainer();
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.optimizer, crate::trainer::OptimizerKind::Adamw);
    }
}
