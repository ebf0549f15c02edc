//! Parametric synthetic RGB+Depth+IR captures with tunable class separability.
//!
//! For modality `m`, channel `k` and pixel `x` of a sample with class sign
//! `c = +½` (bonafide) or `-½` (attack):
//!
//! ```text
//! v(x) = clamp(0.5 + a · (T_subject,m,k(x) + σ · ((c · d_m + ε) · P(x) + ½ η(x))), 0, 1)
//! ```
//!
//! `P` is a fixed low-frequency pattern with spatial mean 1, `T` a zero-mean
//! subject texture, `ε ~ N(0, 1)` one draw per sample and modality, `η`
//! per-pixel N(0, 1) noise and `a` a fixed pixel scale. The mean intensity of
//! a modality is therefore Gaussian with a class-mean gap of `d_m` noise
//! units, giving a two-class AUC of `Φ(d_m / √2)`. Values are quantized to
//! 16 bits so images written to disk load back bit-identically.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::protocols::manifest::{DatasetManifest, ManifestRow, Split};
use crate::sample::{Label, ModalityId, ModalitySample};
use crate::tensor::Tensor;

const PIXEL_SCALE: f64 = 0.06;
const TEXTURE_AMPLITUDE: f64 = 0.3;
const PIXEL_NOISE: f64 = 0.5;
pub const QUANT_LEVELS: f64 = 65535.0;

/// Class-mean shift per modality, in noise-σ units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Separability {
    pub rgb: f64,
    pub depth: f64,
    pub ir: f64,
}

impl Separability {
    pub fn get(&self, m: ModalityId) -> f64 {
        match m {
            ModalityId::Rgb => self.rgb,
            ModalityId::Depth => self.depth,
            ModalityId::Ir => self.ir,
        }
    }
}

impl Default for Separability {
    /// Depth most separable, RGB moderate, IR weakest.
    fn default() -> Self {
        Self { rgb: 1.5, depth: 3.0, ir: 0.5 }
    }
}

fn d_subjects() -> usize {
    200
}
fn d_frames() -> usize {
    4
}
fn d_size() -> (usize, usize) {
    (32, 32)
}
fn d_sigma() -> f64 {
    1.0
}
fn d_ratio() -> f64 {
    0.5
}
fn d_pai() -> Vec<String> {
    vec!["print".into(), "replay".into(), "mask".into()]
}
fn d_dataset() -> String {
    "synth".into()
}
fn d_fractions() -> (f64, f64) {
    (0.6, 0.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "d_subjects")]
    pub n_subjects: usize,
    #[serde(default = "d_frames")]
    pub frames_per_subject: usize,
    #[serde(default = "d_size")]
    pub image_size: (usize, usize),
    #[serde(default)]
    pub separability: Separability,
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "d_ratio")]
    pub attack_ratio: f64,
    #[serde(default = "d_pai")]
    pub pai_types: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_dataset")]
    pub dataset_id: String,
    /// Fractions of subjects assigned to TRAIN and VAL; TEST takes the rest.
    #[serde(default = "d_fractions")]
    pub split_fractions: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: d_subjects(),
            frames_per_subject: d_frames(),
            image_size: d_size(),
            separability: Separability::default(),
            noise_sigma: d_sigma(),
            attack_ratio: d_ratio(),
            pai_types: d_pai(),
            seed: 0,
            dataset_id: d_dataset(),
            split_fractions: d_fractions(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(FlexError::config("synth.n_subjects", "must be at least 1"));
        }
        if self.frames_per_subject == 0 {
            return Err(FlexError::config("synth.frames_per_subject", "must be at least 1"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(FlexError::config("synth.image_size", "must be positive"));
        }
        for m in ModalityId::ALL {
            let d = self.separability.get(m);
            if !d.is_finite() || d < 0.0 {
                return Err(FlexError::config(
                    format!("synth.separability.{}", m.as_str()),
                    "must be finite and >= 0",
                ));
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(FlexError::config("synth.noise_sigma", "must be > 0"));
        }
        if !(self.attack_ratio > 0.0 && self.attack_ratio < 1.0) {
            return Err(FlexError::config("synth.attack_ratio", "must lie in (0, 1)"));
        }
        if self.pai_types.is_empty() {
            return Err(FlexError::config("synth.pai_types", "needs at least one instrument"));
        }
        let (tr, va) = self.split_fractions;
        if !(tr > 0.0 && va >= 0.0 && tr + va <= 1.0) {
            return Err(FlexError::config("synth.split_fractions", "need train > 0 and train + val <= 1"));
        }
        Ok(())
    }
}

/// Generated samples with their manifest; `samples[i]` matches `manifest.rows[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<ModalitySample>,
    pub manifest: DatasetManifest,
}

/// Spatial pattern shared by all subjects and modalities; spatial mean exactly 1.
pub fn class_pattern(h: usize, w: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cy = (2.0 * PI * y as f64 / h as f64).cos();
            let cx = (2.0 * PI * x as f64 / w as f64).cos();
            p.push(1.0 + 0.5 * cx * cy);
        }
    }
    p
}

fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; h * w];
    for _ in 0..2 {
        let fy = rng.random_range(1..=3) as f64;
        let fx = rng.random_range(1..=3) as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        for y in 0..h {
            for x in 0..w {
                let arg = 2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase;
                t[y * w + x] += 0.5 * TEXTURE_AMPLITUDE * arg.cos();
            }
        }
    }
    t
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * QUANT_LEVELS).round() / QUANT_LEVELS
}

fn channels(m: ModalityId) -> usize {
    if m == ModalityId::Rgb {
        3
    } else {
        1
    }
}

pub fn sample_id(dataset: &str, subject: usize, frame: usize) -> String {
    format!("{dataset}_s{subject:04}_f{frame:02}")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let pattern = class_pattern(h, w);

    // Stream 0 decides the subject split and the label assignment.
    let mut plan_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subjects: Vec<usize> = (0..cfg.n_subjects).collect();
    subjects.shuffle(&mut plan_rng);
    let n_train = ((cfg.split_fractions.0 * cfg.n_subjects as f64).round() as usize).clamp(1, cfg.n_subjects);
    let n_val = ((cfg.split_fractions.1 * cfg.n_subjects as f64).round() as usize)
        .min(cfg.n_subjects - n_train);
    let mut split_of = vec![Split::Test; cfg.n_subjects];
    for (rank, &s) in subjects.iter().enumerate() {
        split_of[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut labels: BTreeMap<(usize, usize), (Label, Option<String>)> = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut units: Vec<(usize, usize)> = (0..cfg.n_subjects)
            .filter(|s| split_of[*s] == split)
            .flat_map(|s| (0..cfg.frames_per_subject).map(move |f| (s, f)))
            .collect();
        units.shuffle(&mut plan_rng);
        let n_attack = (cfg.attack_ratio * units.len() as f64).round() as usize;
        for (i, unit) in units.into_iter().enumerate() {
            let entry = if i < n_attack {
                let pai = cfg.pai_types[plan_rng.random_range(0..cfg.pai_types.len())].clone();
                (Label::Attack, Some(pai))
            } else {
                (Label::Bonafide, None)
            };
            labels.insert(unit, entry);
        }
    }

    let mut samples = Vec::with_capacity(cfg.n_subjects * cfg.frames_per_subject);
    let mut rows = Vec::with_capacity(samples.capacity());
    for subject in 0..cfg.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(subject as u64 + 1);
        let textures: BTreeMap<(ModalityId, usize), Vec<f64>> = ModalityId::ALL
            .iter()
            .flat_map(|m| (0..channels(*m)).map(move |k| (*m, k)))
            .map(|key| (key, texture(&mut rng, h, w)))
            .collect();
        for frame in 0..cfg.frames_per_subject {
            let (label, pai) = labels[&(subject, frame)].clone();
            let sign = if label == Label::Bonafide { 0.5 } else { -0.5 };
            let mut images = BTreeMap::new();
            for m in ModalityId::ALL {
                let eps: f64 = rng.sample(StandardNormal);
                let amplitude = sign * cfg.separability.get(m) + eps;
                let c = channels(m);
                let mut data = Vec::with_capacity(c * h * w);
                for k in 0..c {
                    let tex = &textures[&(m, k)];
                    for (i, p) in pattern.iter().enumerate() {
                        let eta: f64 = rng.sample(StandardNormal);
                        let units = tex[i] + cfg.noise_sigma * (amplitude * p + PIXEL_NOISE * eta);
                        data.push(quantize(0.5 + PIXEL_SCALE * units));
                    }
                }
                images.insert(m, Tensor::new(&[c, h, w], data)?);
            }
            let id = sample_id(&cfg.dataset_id, subject, frame);
            rows.push(ManifestRow {
                sample_id: id.clone(),
                split: split_of[subject],
                dataset_id: cfg.dataset_id.clone(),
                label,
                pai: pai.clone(),
                rgb_path: format!("rgb/{id}.png").into(),
                depth_path: Some(format!("depth/{id}.png").into()),
                ir_path: Some(format!("ir/{id}.png").into()),
            });
            samples.push(ModalitySample {
                sample_id: id,
                images,
                label,
                pai,
                subject_id: format!("s{subject:04}"),
                dataset_id: cfg.dataset_id.clone(),
            });
        }
    }
    Ok(SynthDataset { samples, manifest: DatasetManifest::new(rows)? })
}
