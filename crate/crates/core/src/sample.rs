//! Shared data model: modalities, labelled captures, and score records.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Rgb,
    Depth,
    Ir,
}

impl ModalityId {
    /// Canonical order; RGB is the anchor.
    pub const ALL: [ModalityId; 3] = [ModalityId::Rgb, ModalityId::Depth, ModalityId::Ir];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityId::Rgb => "rgb",
            ModalityId::Depth => "depth",
            ModalityId::Ir => "ir",
        }
    }

    fn bit(self) -> u8 {
        match self {
            ModalityId::Rgb => 1,
            ModalityId::Depth => 2,
            ModalityId::Ir => 4,
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityId::Rgb => "RGB",
            ModalityId::Depth => "Depth",
            ModalityId::Ir => "IR",
        })
    }
}

impl FromStr for ModalityId {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ModalityId::Rgb),
            "depth" | "d" => Ok(ModalityId::Depth),
            "ir" => Ok(ModalityId::Ir),
            other => Err(FlexError::InvalidArgument(format!("unknown modality `{other}`"))),
        }
    }
}

/// A subset of {RGB, Depth, IR}, iterated in canonical order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "Vec<ModalityId>", from = "Vec<ModalityId>")]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const RGB: ModalitySet = ModalitySet(1);
    pub const RGB_DEPTH: ModalitySet = ModalitySet(3);
    pub const RGB_IR: ModalitySet = ModalitySet(5);
    pub const ALL: ModalitySet = ModalitySet(7);

    pub fn from_slice(ms: &[ModalityId]) -> Self {
        ModalitySet(ms.iter().fold(0, |acc, m| acc | m.bit()))
    }

    pub fn contains(self, m: ModalityId) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn insert(&mut self, m: ModalityId) {
        self.0 |= m.bit();
    }

    pub fn intersection(self, other: ModalitySet) -> ModalitySet {
        ModalitySet(self.0 & other.0)
    }

    pub fn union(self, other: ModalitySet) -> ModalitySet {
        ModalitySet(self.0 | other.0)
    }

    pub fn difference(self, other: ModalitySet) -> ModalitySet {
        ModalitySet(self.0 & !other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ModalityId> {
        ModalityId::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// Errors with MISSING_RGB unless the anchor modality is present.
    pub fn require_rgb(self) -> Result<()> {
        if self.contains(ModalityId::Rgb) {
            Ok(())
        } else {
            Err(FlexError::MissingRgb(format!("modality set {self} lacks RGB")))
        }
    }
}

impl From<ModalitySet> for Vec<ModalityId> {
    fn from(s: ModalitySet) -> Self {
        s.iter().collect()
    }
}

impl From<Vec<ModalityId>> for ModalitySet {
    fn from(v: Vec<ModalityId>) -> Self {
        ModalitySet::from_slice(&v)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.iter().map(|m| m.to_string()).collect();
        if names.is_empty() {
            f.write_str("{}")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModalitySet({self})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Bonafide,
    Attack,
}

impl Label {
    /// Regression target: bonafide is the positive class.
    pub fn target(self) -> f64 {
        match self {
            Label::Bonafide => 1.0,
            Label::Attack => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Attack => "attack",
        }
    }
}

impl FromStr for Label {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bonafide" | "live" | "real" | "1" => Ok(Label::Bonafide),
            "attack" | "spoof" | "fake" | "0" => Ok(Label::Attack),
            other => Err(FlexError::InvalidArgument(format!("unknown label `{other}`"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One capture of a subject. Each image is `[C, H, W]` with C ∈ {1, 3}.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub sample_id: String,
    pub images: BTreeMap<ModalityId, Tensor>,
    pub label: Label,
    pub pai: Option<String>,
    pub subject_id: String,
    pub dataset_id: String,
}

impl ModalitySample {
    pub fn image(&self, m: ModalityId) -> Option<&Tensor> {
        self.images.get(&m)
    }

    pub fn present(&self) -> ModalitySet {
        ModalitySet::from_slice(&self.images.keys().copied().collect::<Vec<_>>())
    }

    /// Spatial size of the RGB image.
    pub fn spatial(&self) -> Option<(usize, usize)> {
        self.image(ModalityId::Rgb).map(|t| (t.shape()[1], t.shape()[2]))
    }
}

/// Checks every [`ModalitySample`] invariant, reporting the first violation.
pub fn validate_sample(s: &ModalitySample) -> Result<()> {
    let rgb = s.image(ModalityId::Rgb).ok_or_else(|| {
        FlexError::MissingRgb(format!("sample `{}` has no RGB image", s.sample_id))
    })?;
    let mut reference: Option<(usize, usize)> = None;
    for (m, img) in &s.images {
        let shape = img.shape();
        if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
            return Err(FlexError::ShapeMismatch(format!(
                "sample `{}` {m}: expected [1 or 3, H, W], got {:?}",
                s.sample_id, shape
            )));
        }
        let hw = (shape[1], shape[2]);
        match reference {
            None => reference = Some(hw),
            Some(r) if r != hw => {
                return Err(FlexError::ShapeMismatch(format!(
                    "sample `{}`: {m} is {}x{} but other modalities are {}x{}",
                    s.sample_id, hw.0, hw.1, r.0, r.1
                )))
            }
            Some(_) => {}
        }
    }
    if rgb.shape()[0] != 3 {
        return Err(FlexError::ShapeMismatch(format!(
            "sample `{}`: RGB must have 3 channels, got {}",
            s.sample_id,
            rgb.shape()[0]
        )));
    }
    for (m, img) in &s.images {
        if let Some(bad) = img.data().iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(FlexError::ValueRange(format!(
                "sample `{}` {m}: pixel value {bad} outside [0, 1]",
                s.sample_id
            )));
        }
    }
    Ok(())
}

/// A scored presentation; higher scores mean "more bonafide".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub label: Label,
    pub pai: Option<String>,
}

impl ScoreRecord {
    pub fn new(
        sample_id: impl Into<String>,
        score: f64,
        label: Label,
        pai: Option<String>,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(FlexError::ValueRange(format!(
                "score {score} for `{sample_id}` outside [0, 1]"
            )));
        }
        Ok(Self { sample_id, score, label, pai })
    }
}
