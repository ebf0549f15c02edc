//! DropModal training augmentation and deterministic modality masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::sample::{ModalityId, ModalitySample, ModalitySet};
use crate::tensor::Tensor;

pub const DEFAULT_DROP_PROBABILITY: f64 = 0.3;

fn default_p() -> f64 {
    DEFAULT_DROP_PROBABILITY
}

/// Independent per-sample drop probabilities for Depth and IR. RGB is never
/// dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropModalConfig {
    #[serde(default = "default_p")]
    pub p_depth: f64,
    #[serde(default = "default_p")]
    pub p_ir: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DropModalConfig {
    fn default() -> Self {
        Self { p_depth: DEFAULT_DROP_PROBABILITY, p_ir: DEFAULT_DROP_PROBABILITY, seed: 0 }
    }
}

impl DropModalConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("dropmodal.p_depth", self.p_depth), ("dropmodal.p_ir", self.p_ir)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FlexError::config(key, format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Stream for data worker `worker`: seeded with `seed + worker`.
    pub fn worker_rng(&self, worker: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(worker))
    }
}

/// Draws which of Depth/IR to drop. Always consumes exactly two uniforms so
/// equal seeds give equal patterns regardless of the probabilities.
pub fn draw_drops(cfg: &DropModalConfig, rng: &mut impl Rng) -> ModalitySet {
    let u_depth: f64 = rng.random();
    let u_ir: f64 = rng.random();
    let mut dropped = ModalitySet::EMPTY;
    if u_depth < cfg.p_depth {
        dropped.insert(ModalityId::Depth);
    }
    if u_ir < cfg.p_ir {
        dropped.insert(ModalityId::Ir);
    }
    dropped
}

fn zero_out(s: &mut ModalitySample, m: ModalityId) {
    if let Some(img) = s.images.get_mut(&m) {
        *img = Tensor::zeros(img.shape());
    }
}

/// Copy of `s` with Depth and/or IR replaced by zeros at random.
pub fn drop_modal(s: &ModalitySample, cfg: &DropModalConfig, rng: &mut impl Rng) -> ModalitySample {
    let dropped = draw_drops(cfg, rng);
    let mut out = s.clone();
    for m in dropped.iter() {
        zero_out(&mut out, m);
    }
    out
}

/// Copy of `s` with every modality outside `active` zeroed (shapes kept).
pub fn mask_modalities(s: &ModalitySample, active: ModalitySet) -> Result<ModalitySample> {
    active.require_rgb()?;
    let mut out = s.clone();
    for m in ModalityId::ALL {
        if !active.contains(m) {
            zero_out(&mut out, m);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Label;
    use std::collections::BTreeMap;

    fn sample() -> ModalitySample {
        let mut images = BTreeMap::new();
        images.insert(ModalityId::Rgb, Tensor::from_fn(&[3, 4, 4], |i| (i % 7) as f64 / 7.0));
        images.insert(ModalityId::Depth, Tensor::full(&[1, 4, 4], 0.8));
        images.insert(ModalityId::Ir, Tensor::full(&[1, 4, 4], 0.3));
        ModalitySample {
            sample_id: "s".into(),
            images,
            label: Label::Attack,
            pai: Some("print".into()),
            subject_id: "p".into(),
            dataset_id: "d".into(),
        }
    }

    #[test]
    fn zero_probability_is_identity() {
        let cfg = DropModalConfig { p_depth: 0.0, p_ir: 0.0, seed: 1 };
        let mut rng = cfg.worker_rng(0);
        let s = sample();
        for _ in 0..100 {
            assert_eq!(drop_modal(&s, &cfg, &mut rng), s);
        }
    }

    #[test]
    fn certain_drop_zeroes_depth_and_ir() {
        let cfg = DropModalConfig { p_depth: 1.0, p_ir: 1.0, seed: 1 };
        let mut rng = cfg.worker_rng(0);
        let s = sample();
        let d = drop_modal(&s, &cfg, &mut rng);
        assert!(d.images[&ModalityId::Depth].is_zero());
        assert!(d.images[&ModalityId::Ir].is_zero());
        assert_eq!(d.images[&ModalityId::Rgb], s.images[&ModalityId::Rgb]);
        assert_eq!(d.images[&ModalityId::Depth].shape(), &[1, 4, 4]);
    }

    #[test]
    fn mask_rgb_depth_zeroes_ir_only() {
        let s = sample();
        let m = mask_modalities(&s, ModalitySet::RGB_DEPTH).unwrap();
        assert!(m.images[&ModalityId::Ir].is_zero());
        assert_eq!(m.images[&ModalityId::Depth], s.images[&ModalityId::Depth]);
        assert_eq!(m.images[&ModalityId::Rgb], s.images[&ModalityId::Rgb]);
        assert_eq!(mask_modalities(&s, ModalitySet::ALL).unwrap(), s);
    }

    #[test]
    fn mask_without_rgb_is_rejected() {
        let active = ModalitySet::from_slice(&[ModalityId::Depth]);
        assert_eq!(mask_modalities(&sample(), active).unwrap_err().code(), "MISSING_RGB");
    }

    #[test]
    fn probabilities_are_validated() {
        assert!(DropModalConfig { p_depth: 1.2, ..Default::default() }.validate().is_err());
        assert!(DropModalConfig { p_ir: -0.1, ..Default::default() }.validate().is_err());
        assert!(DropModalConfig::default().validate().is_ok());
    }
}
