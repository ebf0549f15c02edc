//! The four flexible-modal deployment protocols and the drivers that train
//! and evaluate models under them.
//!
//! | Protocol | Evaluated with  |
//! |----------|-----------------|
//! | P1       | RGB             |
//! | P2       | RGB + Depth     |
//! | P3       | RGB + IR        |
//! | P4       | RGB + Depth + IR|
//!
//! Every protocol is trained with all three modalities under the unified
//! plan; the separate plan trains one model per protocol on its own subset.

pub mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::mask_modalities;
use crate::backbones::{FlexModel, ModelConfig};
use crate::error::{FlexError, Result};
use crate::metrics::{build_report, EvalReport, ThresholdRule};
use crate::sample::{ModalitySample, ModalitySet, ScoreRecord};
use crate::trainer::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    P1,
    P2,
    P3,
    P4,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [ProtocolId::P1, ProtocolId::P2, ProtocolId::P3, ProtocolId::P4];

    pub fn eval_modalities(self) -> ModalitySet {
        match self {
            ProtocolId::P1 => ModalitySet::RGB,
            ProtocolId::P2 => ModalitySet::RGB_DEPTH,
            ProtocolId::P3 => ModalitySet::RGB_IR,
            ProtocolId::P4 => ModalitySet::ALL,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolId::P1 => "P1",
            ProtocolId::P2 => "P2",
            ProtocolId::P3 => "P3",
            ProtocolId::P4 => "P4",
        }
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolId {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolId::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| FlexError::InvalidArgument(format!("unknown protocol `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub id: ProtocolId,
    pub train_modalities: ModalitySet,
    pub eval_modalities: ModalitySet,
    pub threshold_rule: ThresholdRule,
}

impl ProtocolSpec {
    pub fn new(id: ProtocolId, threshold_rule: ThresholdRule) -> Self {
        Self { id, train_modalities: ModalitySet::ALL, eval_modalities: id.eval_modalities(), threshold_rule }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_modalities != ModalitySet::ALL {
            return Err(FlexError::config(
                format!("protocols.{}.train_modalities", self.id),
                "every protocol trains with RGB+Depth+IR",
            ));
        }
        self.eval_modalities.require_rgb()
    }
}

/// P1..P4, all with the same threshold rule.
pub fn standard_protocols(rule: ThresholdRule) -> Vec<ProtocolSpec> {
    ProtocolId::ALL.into_iter().map(|id| ProtocolSpec::new(id, rule)).collect()
}

/// Intra-dataset testing (every test dataset was trained on) thresholds at
/// the validation EER; cross-dataset testing uses a fixed 0.5.
pub fn threshold_rule_for(train_datasets: &BTreeSet<String>, test_datasets: &BTreeSet<String>) -> ThresholdRule {
    if test_datasets.is_subset(train_datasets) {
        ThresholdRule::EerOnValidation
    } else {
        ThresholdRule::Fixed05
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// One model per protocol, trained on that protocol's modalities.
    Separate,
    /// One tri-modal model evaluated under every protocol.
    Unified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub mode: RunMode,
    pub protocols: Vec<ProtocolSpec>,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        if self.protocols.is_empty() {
            return Err(FlexError::config("protocols", "at least one protocol is required"));
        }
        let mut seen = BTreeSet::new();
        for p in &self.protocols {
            p.validate()?;
            if !seen.insert(p.id) {
                return Err(FlexError::config("protocols", format!("{} listed twice", p.id)));
            }
        }
        if self.mode == RunMode::Unified && self.model.modalities != ModalitySet::ALL {
            return Err(FlexError::config("model.modalities", "the unified model has all three branches"));
        }
        self.model.validate()?;
        self.trainer.validate()
    }

    /// One entry per model the plan trains.
    pub fn model_specs(&self) -> Vec<ModelSpec> {
        match self.mode {
            RunMode::Unified => vec![ModelSpec {
                label: "unified".into(),
                protocols: self.protocols.iter().map(|p| p.id).collect(),
                config: self.model,
            }],
            RunMode::Separate => self
                .protocols
                .iter()
                .map(|p| ModelSpec {
                    label: p.id.to_string(),
                    protocols: vec![p.id],
                    config: ModelConfig { modalities: p.eval_modalities, ..self.model },
                })
                .collect(),
        }
    }
}

/// A model to train: its name, the protocols it serves and its branches
/// (which are also the modalities it trains on).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub label: String,
    pub protocols: Vec<ProtocolId>,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub label: String,
    pub protocols: Vec<ProtocolId>,
    pub model: FlexModel,
    pub log: TrainLog,
}

/// Score lists for one protocol plus the report built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub report: EvalReport,
    pub val_scores: Vec<ScoreRecord>,
    pub test_scores: Vec<ScoreRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub models: Vec<TrainedModel>,
    pub results: BTreeMap<ProtocolId, ProtocolResult>,
}

/// Trains every model of the plan, sequentially, on the given TRAIN samples.
pub fn train_plan(plan: &RunPlan, train_samples: &[ModalitySample]) -> Result<Vec<TrainedModel>> {
    plan.validate()?;
    let mut out = Vec::new();
    for spec in plan.model_specs() {
        let mut model = FlexModel::new(spec.config)?;
        let log = train(&mut model, train_samples, spec.config.modalities, &plan.trainer)?;
        log::info!("trained `{}`: final loss {:?}", spec.label, log.epoch_loss.last());
        out.push(TrainedModel { label: spec.label, protocols: spec.protocols, model, log });
    }
    Ok(out)
}

/// Scores after masking: modalities outside `active` are zeroed before the
/// model sees the sample.
pub fn score_samples(model: &FlexModel, samples: &[ModalitySample], active: ModalitySet) -> Result<Vec<ScoreRecord>> {
    let masked = samples.iter().map(|s| mask_modalities(s, active)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ModalitySample> = masked.iter().collect();
    let scores = model.predict_batch(&refs, active)?;
    masked
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoreRecord::new(s.sample_id.clone(), score, s.label, s.pai.clone()))
        .collect()
}

pub fn evaluate_protocol(
    model: &FlexModel,
    spec: &ProtocolSpec,
    val: &[ModalitySample],
    test: &[ModalitySample],
) -> Result<ProtocolResult> {
    spec.validate()?;
    let val_scores = match spec.threshold_rule {
        ThresholdRule::EerOnValidation => score_samples(model, val, spec.eval_modalities)?,
        ThresholdRule::Fixed05 => Vec::new(),
    };
    let test_scores = score_samples(model, test, spec.eval_modalities)?;
    let report = build_report(&val_scores, &test_scores, spec.threshold_rule)?;
    Ok(ProtocolResult { report, val_scores, test_scores })
}

/// Evaluation phase only: each protocol is scored by the first model whose
/// protocol list contains it.
pub fn evaluate_plan(
    plan: &RunPlan,
    models: &[(&[ProtocolId], &FlexModel)],
    val: &[ModalitySample],
    test: &[ModalitySample],
) -> Result<BTreeMap<ProtocolId, ProtocolResult>> {
    let mut out = BTreeMap::new();
    for spec in &plan.protocols {
        let (_, model) = models.iter().find(|(ps, _)| ps.contains(&spec.id)).ok_or_else(|| {
            FlexError::InvalidArgument(format!("no trained model covers protocol {}", spec.id))
        })?;
        out.insert(spec.id, evaluate_protocol(model, spec, val, test)?);
    }
    Ok(out)
}

fn run(plan: &RunPlan, mode: RunMode, train_s: &[ModalitySample], val: &[ModalitySample], test: &[ModalitySample]) -> Result<RunOutcome> {
    if plan.mode != mode {
        return Err(FlexError::InvalidArgument(format!("plan mode is {:?}, expected {mode:?}", plan.mode)));
    }
    let models = train_plan(plan, train_s)?;
    let refs: Vec<(&[ProtocolId], &FlexModel)> =
        models.iter().map(|m| (m.protocols.as_slice(), &m.model)).collect();
    let results = evaluate_plan(plan, &refs, val, test)?;
    Ok(RunOutcome { models, results })
}

/// One tri-modal model, evaluated under every protocol of the plan.
pub fn run_unified(plan: &RunPlan, train_s: &[ModalitySample], val: &[ModalitySample], test: &[ModalitySample]) -> Result<RunOutcome> {
    run(plan, RunMode::Unified, train_s, val, test)
}

/// One model per protocol, each trained and evaluated on its own modalities.
pub fn run_separate(plan: &RunPlan, train_s: &[ModalitySample], val: &[ModalitySample], test: &[ModalitySample]) -> Result<RunOutcome> {
    run(plan, RunMode::Separate, train_s, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::Arch;
    use crate::protocols::manifest::Split;
    use crate::synthgen::{generate, SynthConfig};

    fn plan(mode: RunMode) -> RunPlan {
        RunPlan {
            mode,
            protocols: standard_protocols(ThresholdRule::EerOnValidation),
            model: ModelConfig { feature_channels: 4, image_size: (8, 8), ..ModelConfig::new(Arch::ToyCnn) },
            trainer: TrainConfig { epochs: 2, lr_halving_epoch: 2, batch_size: 8, ..Default::default() },
        }
    }

    fn split_data() -> (Vec<ModalitySample>, Vec<ModalitySample>, Vec<ModalitySample>) {
        let ds = generate(&SynthConfig { n_subjects: 10, frames_per_subject: 2, image_size: (8, 8), ..Default::default() })
            .unwrap();
        let pick = |sp: Split| {
            ds.manifest.rows().iter().zip(&ds.samples).filter(|(r, _)| r.split == sp).map(|(_, s)| s.clone()).collect()
        };
        (pick(Split::Train), pick(Split::Val), pick(Split::Test))
    }

    #[test]
    fn protocol_table() {
        assert_eq!(ProtocolId::P1.eval_modalities().to_string(), "RGB");
        assert_eq!(ProtocolId::P2.eval_modalities().to_string(), "RGB+Depth");
        assert_eq!(ProtocolId::P3.eval_modalities().to_string(), "RGB+IR");
        assert_eq!(ProtocolId::P4.eval_modalities(), ModalitySet::ALL);
        for p in standard_protocols(ThresholdRule::Fixed05) {
            assert_eq!(p.train_modalities, ModalitySet::ALL);
            p.validate().unwrap();
        }
    }

    #[test]
    fn rule_follows_dataset_overlap() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(threshold_rule_for(&set(&["a", "b"]), &set(&["a"])), ThresholdRule::EerOnValidation);
        assert_eq!(threshold_rule_for(&set(&["a", "b"]), &set(&["c"])), ThresholdRule::Fixed05);
    }

    #[test]
    fn unified_requires_all_branches() {
        let mut p = plan(RunMode::Unified);
        p.model.modalities = ModalitySet::RGB;
        assert!(p.validate().unwrap_err().to_string().contains("model.modalities"));
    }

    #[test]
    fn model_cardinality() {
        assert_eq!(plan(RunMode::Unified).model_specs().len(), 1);
        let sep = plan(RunMode::Separate).model_specs();
        assert_eq!(sep.len(), 4);
        assert_eq!(sep[0].config.modalities, ModalitySet::RGB);
        assert_eq!(sep[2].label, "P3");
    }

    #[test]
    fn unified_run_reports_every_protocol() {
        let (tr, va, te) = split_data();
        let out = run_unified(&plan(RunMode::Unified), &tr, &va, &te).unwrap();
        assert_eq!(out.models.len(), 1);
        assert_eq!(out.results.len(), 4);
        for r in out.results.values() {
            assert_eq!(r.report.acer, (r.report.apcer + r.report.bpcer) / 2.0);
            assert_eq!(r.test_scores.len(), te.len());
        }
        let again = run_unified(&plan(RunMode::Unified), &tr, &va, &te).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn separate_run_trains_four_models() {
        let (tr, va, te) = split_data();
        let out = run_separate(&plan(RunMode::Separate), &tr, &va, &te).unwrap();
        assert_eq!(out.models.len(), 4);
        assert_eq!(out.models[0].label, "P1");
        assert!(run_unified(&plan(RunMode::Separate), &tr, &va, &te).is_err());
    }
}
