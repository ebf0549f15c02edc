//! `flexfas synth | train | eval | cost`.
//!
//! Every command reads one TOML run configuration (see [`crate::config`]),
//! writes its outputs atomically and stamps them with the config hash. Output
//! layout under `output_dir`:
//!
//! ```text
//! checkpoints/{label}.json     label = "unified" or the protocol id
//! logs/{label}.loss.tsv
//! reports/{P}.json
//! scores/{P}.val.tsv, scores/{P}.test.tsv
//! cost.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::efficiency::{cost_report, Cost, CostReport};
use crate::error::{FlexError, Result};
use crate::fsutil::{sha256_file, write_atomic};
use crate::metrics::{write_scores, EvalReport};
use crate::backbones::FlexModel;
use crate::protocols::manifest::{load_manifest, write_dataset, DatasetManifest, Split};
use crate::protocols::{evaluate_plan, train_plan, ProtocolId, RunMode};
use crate::sample::{ModalitySample, ModalitySet, ScoreRecord};
use crate::synthgen::generate;

#[derive(Debug, Parser)]
#[command(name = "flexfas", version, about = "Flexible-modal face anti-spoofing runs on synthetic or manifest data")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (images + manifest) into data.synth_dir.
    Synth(Common),
    /// Train the model(s) of the run plan and write checkpoints and loss logs.
    Train(Common),
    /// Score every protocol and write reports and score files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; repeat for SEPARATE runs. Defaults to the ones
        /// `train` wrote under output_dir.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Parameter and FLOP counts for the configured model(s).
    Cost(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides FLEXFAS_SEED and the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit code for an error: 1 for configuration problems, 2 otherwise.
pub fn exit_code(e: &FlexError) -> i32 {
    match e {
        FlexError::Config { .. } => 1,
        _ => 2,
    }
}

/// An unreadable config file counts as a configuration error.
fn load(c: &Common) -> Result<RunConfig> {
    RunConfig::load(&c.config, c.seed).map_err(|e| match e {
        FlexError::FileNotFound(_) | FlexError::Io(_) => FlexError::config("--config", e.to_string()),
        other => other,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&load(&c)?).map(drop),
        Command::Train(c) => cmd_train(&load(&c)?).map(drop),
        Command::Eval { common, checkpoints } => cmd_eval(&load(&common)?, &checkpoints).map(drop),
        Command::Cost(c) => {
            let report = cmd_cost(&load(&c)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Generates the dataset and returns the manifest path.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.synth_dir()?;
    let ds = generate(&cfg.file.synth())?;
    let manifest = write_dataset(&dir, &ds)?;
    write_json(
        &dir.join("synth.json"),
        &json!({
            "config_hash": cfg.hash,
            "manifest_sha256": sha256_file(&manifest)?,
            "n_samples": ds.samples.len(),
        }),
    )?;
    log::info!("wrote {} samples to {}", ds.samples.len(), dir.display());
    Ok(manifest)
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<DatasetManifest>> {
    paths.iter().map(|p| load_manifest(p)).collect()
}

fn load_split(manifests: &[DatasetManifest], split: Split) -> Result<Vec<ModalitySample>> {
    let mut out = Vec::new();
    for m in manifests {
        out.extend(m.load_split(split)?);
    }
    Ok(out)
}

fn dataset_ids(manifests: &[DatasetManifest]) -> BTreeSet<String> {
    manifests.iter().flat_map(|m| m.dataset_ids()).collect()
}

fn checkpoint_path(out: &Path, label: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{label}.json"))
}

/// Trains per the run plan; returns the checkpoint paths written.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let train_m = load_manifests(&cfg.train_manifests()?)?;
    let test_m = load_manifest(&cfg.test_manifest()?)?;
    let rule = cfg.threshold_rule(&dataset_ids(&train_m), &test_m.dataset_ids());
    let plan = cfg.plan(rule);
    let samples = load_split(&train_m, Split::Train)?;
    let trained = train_plan(&plan, &samples)?;
    let out = cfg.output_dir();
    let mut paths = Vec::new();
    for t in &trained {
        let path = checkpoint_path(&out, &t.label);
        Checkpoint::from_trained(t, &plan.trainer, &cfg.hash).save(&path)?;
        let log = format!("# config_hash\t{}\n{}", cfg.hash, t.log.to_tsv());
        write_atomic(&out.join("logs").join(format!("{}.loss.tsv", t.label)), log.as_bytes())?;
        log::info!("wrote {}", path.display());
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub protocol: ProtocolId,
    pub config_hash: String,
    pub eval_modalities: Vec<String>,
    pub report: EvalReport,
}

fn score_bytes(records: &[ScoreRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_scores(&mut buf, records)?;
    Ok(buf)
}

fn modality_names(set: ModalitySet) -> Vec<String> {
    set.iter().map(|m| m.to_string()).collect()
}

/// Evaluation phase only. With no explicit checkpoints, loads the ones
/// `cmd_train` would have written for this config.
pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf]) -> Result<BTreeMap<ProtocolId, ProtocolReport>> {
    let train_m = load_manifests(&cfg.train_manifests()?)?;
    let test_m = load_manifest(&cfg.test_manifest()?)?;
    let rule = cfg.threshold_rule(&dataset_ids(&train_m), &test_m.dataset_ids());
    let plan = cfg.plan(rule);
    let out = cfg.output_dir();
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        plan.model_specs().iter().map(|s| checkpoint_path(&out, &s.label)).collect()
    } else {
        checkpoints.to_vec()
    };
    let mut loaded: Vec<(Checkpoint, FlexModel)> = Vec::new();
    for p in &paths {
        let ck = Checkpoint::load(p)?;
        if ck.config_hash != cfg.hash {
            log::warn!("{} was trained with config {}, evaluating with {}", p.display(), ck.config_hash, cfg.hash);
        }
        let model = ck.to_model()?;
        loaded.push((ck, model));
    }
    for spec in &plan.protocols {
        let owner = loaded.iter().find(|(ck, _)| ck.protocols.contains(&spec.id)).ok_or_else(|| {
            FlexError::CheckpointIncompatible(format!("no checkpoint was trained for protocol {}", spec.id))
        })?;
        let have = owner.1.modalities();
        if have.intersection(spec.eval_modalities) != spec.eval_modalities {
            return Err(FlexError::CheckpointIncompatible(format!(
                "checkpoint `{}` has branches {have} but {} needs {}",
                owner.0.label, spec.id, spec.eval_modalities
            )));
        }
    }

    let val = match rule {
        crate::metrics::ThresholdRule::EerOnValidation => load_split(&train_m, Split::Val)?,
        crate::metrics::ThresholdRule::Fixed05 => Vec::new(),
    };
    let test = test_m.load_split(Split::Test)?;
    let refs: Vec<(&[ProtocolId], &FlexModel)> =
        loaded.iter().map(|(ck, m)| (ck.protocols.as_slice(), m)).collect();
    let results = evaluate_plan(&plan, &refs, &val, &test)?;

    let mut reports = BTreeMap::new();
    for (id, res) in results {
        let eval_modalities = id.eval_modalities();
        let report = ProtocolReport {
            protocol: id,
            config_hash: cfg.hash.clone(),
            eval_modalities: modality_names(eval_modalities),
            report: res.report,
        };
        write_json(&out.join("reports").join(format!("{id}.json")), &report)?;
        let scores = out.join("scores");
        write_atomic(&scores.join(format!("{id}.val.tsv")), &score_bytes(&res.val_scores)?)?;
        write_atomic(&scores.join(format!("{id}.test.tsv")), &score_bytes(&res.test_scores)?)?;
        log::info!("{id}: ACER {:.4} at threshold {}", report.report.acer, report.report.threshold);
        reports.insert(id, report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunCost {
    pub config_hash: String,
    pub mode: RunMode,
    pub models: BTreeMap<String, CostReport>,
    pub total: Cost,
}

pub fn cmd_cost(cfg: &RunConfig) -> Result<RunCost> {
    let plan = cfg.plan(crate::metrics::ThresholdRule::Fixed05);
    plan.validate()?;
    let mut models = BTreeMap::new();
    let mut total = Cost::default();
    for spec in plan.model_specs() {
        let report = cost_report(&FlexModel::new(spec.config)?);
        total = total + Cost::new(report.params, report.flops);
        models.insert(spec.label, report);
    }
    let cost = RunCost { config_hash: cfg.hash.clone(), mode: plan.mode, models, total };
    write_json(&cfg.output_dir().join("cost.json"), &cost)?;
    Ok(cost)
}
