//! Minibatch training with Adam/AdamW, a one-step learning-rate halving
//! schedule and optional DropModal.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{draw_drops, DropModalConfig};
use crate::backbones::{Arch, FlexModel, BN_MOMENTUM};
use crate::error::{FlexError, Result};
use crate::sample::{Label, ModalitySample, ModalitySet};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_GRAD_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    Adamw,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_epochs() -> usize {
    10
}
fn d_halving() -> usize {
    7
}
fn d_batch() -> usize {
    32
}
fn d_wd() -> f64 {
    1e-2
}
fn d_opt() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_opt")]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// First epoch (1-based) trained at half the initial rate.
    #[serde(default = "d_halving")]
    pub lr_halving_epoch: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dropmodal: Option<DropModalConfig>,
    /// Global gradient-norm limit; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Decoupled decay, used by ADAMW only.
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: d_opt(),
            learning_rate: d_lr(),
            epochs: d_epochs(),
            lr_halving_epoch: d_halving(),
            batch_size: d_batch(),
            seed: 0,
            dropmodal: None,
            grad_clip: None,
            weight_decay: d_wd(),
        }
    }
}

impl TrainConfig {
    /// Defaults per architecture: ADAM 1e-3 for conv models, ADAMW 1e-4 with
    /// clipping for the transformer.
    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::ToyVit => Self {
                optimizer: OptimizerKind::Adamw,
                learning_rate: 1e-4,
                grad_clip: Some(DEFAULT_GRAD_CLIP),
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FlexError::config("trainer.learning_rate", "must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(FlexError::config("trainer.epochs", "must be at least 1"));
        }
        if self.lr_halving_epoch == 0 || self.lr_halving_epoch > self.epochs {
            return Err(FlexError::config("trainer.lr_halving_epoch", "must lie in [1, epochs]"));
        }
        if self.batch_size == 0 {
            return Err(FlexError::config("trainer.batch_size", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(FlexError::config("trainer.grad_clip", "must be > 0"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(FlexError::config("trainer.weight_decay", "must be finite and >= 0"));
        }
        if let Some(d) = &self.dropmodal {
            d.validate()?;
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_halving_epoch {
            0.5 * self.learning_rate
        } else {
            self.learning_rate
        }
    }
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |m: &str| FlexError::CheckpointIncompatible(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("word_pos is not an integer"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Per-epoch trace of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_lr: Vec<f64>,
    pub steps: usize,
    /// Shuffling stream after the last epoch.
    pub rng: RngState,
}

impl TrainLog {
    /// One `epoch<TAB>lr<TAB>mean_loss` line per epoch after a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tlr\tmean_loss\n");
        for (i, (l, lr)) in self.epoch_loss.iter().zip(&self.epoch_lr).enumerate() {
            out.push_str(&format!("{}\t{lr}\t{l}\n", i + 1));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam / AdamW state over named parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    t: i32,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self { kind, weight_decay, t: 0, state: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut FlexModel, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let decay = if self.kind == OptimizerKind::Adamw { self.weight_decay } else { 0.0 };
        for (name, p) in model.params_mut().params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * gi;
                st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * gi * gi;
                let update = (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + ADAM_EPS);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Trains `model` on `samples`, feeding only the modalities in `active`
/// (further thinned per sample by DropModal when configured).
pub fn train(
    model: &mut FlexModel,
    samples: &[ModalitySample],
    active: ModalitySet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    active.require_rgb()?;
    let has = |l: Label| samples.iter().any(|s| s.label == l);
    if !has(Label::Bonafide) || !has(Label::Attack) {
        return Err(FlexError::OneClassOnly(format!(
            "training set of {} samples needs both bonafide and attack",
            samples.len()
        )));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = cfg.dropmodal.map(|d| d.worker_rng(0));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        epoch_lr: Vec::with_capacity(cfg.epochs),
        steps: 0,
        rng: RngState::capture(&order_rng),
    };
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&ModalitySample, ModalitySet)> = chunk
                .iter()
                .map(|&i| {
                    let set = match (&cfg.dropmodal, drop_rng.as_mut()) {
                        (Some(d), Some(rng)) => active.difference(draw_drops(d, rng)),
                        _ => active,
                    };
                    (&samples[i], set)
                })
                .collect();
            let mut lg = model.loss_and_grads(&batch, true)?;
            if !lg.loss.is_finite() {
                return Err(FlexError::NonfiniteLoss { epoch, batch: bi });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut lg.grads, c);
            }
            opt.step(model, &lg.grads, lr);
            model.apply_bn_updates(&lg.bn_updates, BN_MOMENTUM);
            total += lg.loss * chunk.len() as f64;
            log.steps += 1;
        }
        log.epoch_loss.push(total / samples.len() as f64);
        log.epoch_lr.push(lr);
    }
    log.rng = RngState::capture(&order_rng);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::ModelConfig;
    use crate::synthgen::{generate, SynthConfig};

    fn data() -> Vec<ModalitySample> {
        let cfg = SynthConfig { n_subjects: 6, frames_per_subject: 2, image_size: (8, 8), ..Default::default() };
        generate(&cfg).unwrap().samples
    }

    fn model() -> FlexModel {
        FlexModel::new(ModelConfig { feature_channels: 4, image_size: (8, 8), ..ModelConfig::new(Arch::ToyCnn) })
            .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 3, lr_halving_epoch: 2, batch_size: 4, ..Default::default() }
    }

    #[test]
    fn lr_schedule_halves_once() {
        let c = TrainConfig { epochs: 10, lr_halving_epoch: 7, learning_rate: 0.01, ..Default::default() };
        assert_eq!(c.lr_at(6), 0.01);
        assert_eq!(c.lr_at(7), 0.005);
        assert_eq!(c.lr_at(10), 0.005);
    }

    #[test]
    fn zero_learning_rate_leaves_params_and_loss_fixed() {
        let mut m = model();
        let before = m.params().params().clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..quick() };
        let log = train(&mut m, &data(), ModalitySet::ALL, &cfg).unwrap();
        assert_eq!(m.params().params(), &before);
        assert_eq!(log.epoch_lr[1], 0.0);
        assert_eq!(log.epoch_loss.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let d = data();
        let cfg = TrainConfig { dropmodal: Some(DropModalConfig::default()), ..quick() };
        let (mut a, mut b) = (model(), model());
        let la = train(&mut a, &d, ModalitySet::ALL, &cfg).unwrap();
        let lb = train(&mut b, &d, ModalitySet::ALL, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.epoch_lr, vec![1e-3, 5e-4, 5e-4]);
    }

    #[test]
    fn one_class_is_rejected() {
        let d: Vec<_> = data().into_iter().filter(|s| s.label == Label::Attack).collect();
        let err = train(&mut model(), &d, ModalitySet::ALL, &quick()).unwrap_err();
        assert_eq!(err.code(), "ONE_CLASS_ONLY");
    }

    #[test]
    fn bad_schedule_names_key() {
        let err = TrainConfig { lr_halving_epoch: 11, ..Default::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("trainer.lr_halving_epoch"));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let d = g["a"].data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v: Vec<u32> = (0..10).collect();
        v.shuffle(&mut rng);
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut restored));
    }
}
